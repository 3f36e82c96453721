//! Max-sim relevance scoring and the pairwise softmax cross-entropy loss
//! over `<query, positive, negative>` triples.
//!
//! ```text
//! S(q, d) = Σ_i max_j  q_i · d_j
//! ```
//!
//! With unit-norm rows every term is a cosine similarity in `[-1, 1]`.
//! The backward pass routes each query token's gradient to its winning
//! document token only; ties go to the lowest document index.

use crate::error::{Error, Result};
use crate::tensor::{dot, EmbeddingMatrix, Matrix};

/// Relevance score of one (query, document) pair.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RelevanceScore(pub f64);

impl RelevanceScore {
    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Winning document token (and its similarity) for every query token.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxSimTrace {
    best_doc_token: Vec<usize>,
    best_similarity: Vec<f64>,
    doc_tokens: usize,
}

impl MaxSimTrace {
    pub fn argmax(&self) -> &[usize] {
        &self.best_doc_token
    }

    pub fn similarities(&self) -> &[f64] {
        &self.best_similarity
    }

    pub fn query_tokens(&self) -> usize {
        self.best_doc_token.len()
    }

    pub fn doc_tokens(&self) -> usize {
        self.doc_tokens
    }

    /// Smallest gap between the winner and the runner-up over all query
    /// tokens. Finite-difference checks need this comfortably above `h`.
    pub fn min_margin(q: &EmbeddingMatrix, d: &EmbeddingMatrix) -> f64 {
        let mut margin = f64::INFINITY;
        for i in 0..q.tokens() {
            let mut sims: Vec<f64> = (0..d.tokens()).map(|j| dot(q.row(i), d.row(j))).collect();
            if sims.len() < 2 {
                continue;
            }
            sims.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min(sims[0] - sims[1]);
        }
        margin
    }
}

/// Sum over query tokens of the best dot product against any document token.
pub fn maxsim_score(
    q: &EmbeddingMatrix,
    d: &EmbeddingMatrix,
) -> Result<(RelevanceScore, MaxSimTrace)> {
    if q.dim() != d.dim() {
        return Err(Error::DimMismatch {
            left: q.dim(),
            right: d.dim(),
        });
    }
    let mut best_doc_token = Vec::with_capacity(q.tokens());
    let mut best_similarity = Vec::with_capacity(q.tokens());
    let mut total = 0.0;
    for i in 0..q.tokens() {
        let qi = q.row(i);
        let mut best_j = 0;
        let mut best = f64::NEG_INFINITY;
        for j in 0..d.tokens() {
            let s = dot(qi, d.row(j));
            // strict comparison keeps the lowest index on ties
            if s > best {
                best = s;
                best_j = j;
            }
        }
        best_doc_token.push(best_j);
        best_similarity.push(best);
        total += best;
    }
    Ok((
        RelevanceScore(total),
        MaxSimTrace {
            best_doc_token,
            best_similarity,
            doc_tokens: d.tokens(),
        },
    ))
}

/// Score only, without keeping the trace.
pub fn maxsim_value(q: &EmbeddingMatrix, d: &EmbeddingMatrix) -> Result<f64> {
    if q.dim() != d.dim() {
        return Err(Error::DimMismatch {
            left: q.dim(),
            right: d.dim(),
        });
    }
    Ok(maxsim_unchecked(q.matrix(), d.matrix()))
}

pub(crate) fn maxsim_unchecked(q: &Matrix, d: &Matrix) -> f64 {
    q.iter_rows()
        .map(|qi| {
            d.iter_rows()
                .map(|dj| dot(qi, dj))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Output of [`triple_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripleLoss {
    pub loss: f64,
    pub grad_pos: f64,
    pub grad_neg: f64,
}

/// `−log softmax([s_pos, s_neg])[0]` at temperature 1, with its partials.
pub fn triple_loss(s_pos: RelevanceScore, s_neg: RelevanceScore) -> Result<TripleLoss> {
    if !s_pos.0.is_finite() || !s_neg.0.is_finite() {
        return Err(Error::NonFinite("triple scores"));
    }
    let margin = s_neg.0 - s_pos.0;
    let loss = softplus(margin);
    let sig = sigmoid(margin);
    Ok(TripleLoss {
        loss,
        grad_pos: -sig,
        grad_neg: sig,
    })
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Subgradient of `upstream · S(q, d)` with respect to both embedding
/// matrices.
pub fn maxsim_backward(
    trace: &MaxSimTrace,
    upstream: f64,
    q: &EmbeddingMatrix,
    d: &EmbeddingMatrix,
) -> Result<(Matrix, Matrix)> {
    if trace.query_tokens() != q.tokens() || trace.doc_tokens() != d.tokens() {
        return Err(Error::TraceMismatch(format!(
            "trace is {}x{}, inputs are {}x{}",
            trace.query_tokens(),
            trace.doc_tokens(),
            q.tokens(),
            d.tokens()
        )));
    }
    if q.dim() != d.dim() {
        return Err(Error::DimMismatch {
            left: q.dim(),
            right: d.dim(),
        });
    }
    let mut grad_q = Matrix::zeros(q.tokens(), q.dim());
    let mut grad_d = Matrix::zeros(d.tokens(), d.dim());
    if upstream == 0.0 {
        return Ok((grad_q, grad_d));
    }
    for (i, &j) in trace.argmax().iter().enumerate() {
        if j >= d.tokens() {
            return Err(Error::TraceMismatch(format!(
                "argmax {j} out of range for {} document tokens",
                d.tokens()
            )));
        }
        for (g, v) in grad_q.row_mut(i).iter_mut().zip(d.row(j)) {
            *g = upstream * v;
        }
        for (g, v) in grad_d.row_mut(j).iter_mut().zip(q.row(i)) {
            *g += upstream * v;
        }
    }
    Ok((grad_q, grad_d))
}
