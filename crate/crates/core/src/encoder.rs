//! Context-free token encoder: embedding lookup, linear compression,
//! per-token L2 normalization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, EmbeddingMatrix, Matrix, ZERO_NORM_EPS};

/// Output width of the compression layer at full scale.
pub const DEFAULT_OUT_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    embed_table: Matrix,
    projection: Matrix,
}

impl EncoderParams {
    pub fn new(embed_table: Matrix, projection: Matrix) -> Result<Self> {
        if embed_table.cols() != projection.rows() {
            return Err(Error::ShapeMismatch(format!(
                "embedding width {} does not match projection input {}",
                embed_table.cols(),
                projection.rows()
            )));
        }
        if embed_table.rows() == 0 || projection.rows() == 0 || projection.cols() == 0 {
            return Err(Error::ShapeMismatch("encoder dimensions must be positive".into()));
        }
        if !embed_table.is_finite() || !projection.is_finite() {
            return Err(Error::NonFinite("encoder parameters"));
        }
        Ok(EncoderParams {
            embed_table,
            projection,
        })
    }

    /// Gaussian initialization: table entries ~ N(0, 1), projection entries
    /// ~ N(0, 1/hidden).
    pub fn random(vocab_size: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::ShapeMismatch("encoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let table: Vec<f64> = (0..vocab_size * hidden).map(|_| unit.sample(&mut rng)).collect();
        let proj_dist = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("valid normal");
        let proj: Vec<f64> = (0..hidden * out_dim).map(|_| proj_dist.sample(&mut rng)).collect();
        Self::new(
            Matrix::from_vec(vocab_size, hidden, table)?,
            Matrix::from_vec(hidden, out_dim, proj)?,
        )
    }

    pub fn vocab_size(&self) -> usize {
        self.embed_table.rows()
    }

    pub fn hidden(&self) -> usize {
        self.embed_table.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn embed_table(&self) -> &Matrix {
        &self.embed_table
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub(crate) fn embed_table_mut(&mut self) -> &mut Matrix {
        &mut self.embed_table
    }

    pub(crate) fn projection_mut(&mut self) -> &mut Matrix {
        &mut self.projection
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.vocab_size() == other.vocab_size()
            && self.hidden() == other.hidden()
            && self.out_dim() == other.out_dim()
    }

    /// SHA-256 over shapes and the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in [self.vocab_size(), self.hidden(), self.out_dim()] {
            h.update((n as u64).to_le_bytes());
        }
        for v in self.embed_table.as_slice().iter().chain(self.projection.as_slice()) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: self.vocab_size(),
            });
        }
        Ok(())
    }

    /// Pre-normalization output `embed_table[t] · projection` of one token.
    fn project_into(&self, token: u32, out: &mut [f64]) {
        out.fill(0.0);
        let e = self.embed_table.row(token as usize);
        for (h, &eh) in e.iter().enumerate() {
            if eh == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.projection.row(h)) {
                *o += eh * p;
            }
        }
    }

    /// Encodes a token sequence into unit-norm rows, one per token.
    pub fn encode(&self, tokens: &[u32]) -> Result<EmbeddingMatrix> {
        self.check_tokens(tokens)?;
        let d = self.out_dim();
        let mut out = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = out.row_mut(t);
            self.project_into(tok, row);
            let norm = dot(row, row).sqrt();
            if !(norm >= ZERO_NORM_EPS) {
                return Err(Error::ZeroRow { row: t });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(EmbeddingMatrix::from_unit_rows(out))
    }

    /// Encodes after truncating to `max_len` tokens.
    pub fn encode_truncated(&self, tokens: &[u32], max_len: usize) -> Result<EmbeddingMatrix> {
        self.encode(truncate(tokens, max_len))
    }

    /// Backpropagates `∂L/∂(output rows)` into parameter gradients,
    /// accumulating into `grads`.
    ///
    /// For a row `y = x / ‖x‖` the Jacobian is `(I − y yᵀ) / ‖x‖`. Rows with
    /// an all-zero upstream gradient are skipped.
    pub fn encode_backward_into(
        &self,
        tokens: &[u32],
        grad_embeddings: &Matrix,
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        self.check_tokens(tokens)?;
        if grad_embeddings.rows() != tokens.len() || grad_embeddings.cols() != self.out_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                grad_embeddings.rows(),
                grad_embeddings.cols(),
                tokens.len(),
                self.out_dim()
            )));
        }
        if !grads.matches(self) {
            return Err(Error::ShapeMismatch("gradient buffer has a different shape".into()));
        }
        let d = self.out_dim();
        let hdim = self.hidden();
        let mut x = vec![0.0; d];
        let mut gx = vec![0.0; d];
        for (t, &tok) in tokens.iter().enumerate() {
            let g = grad_embeddings.row(t);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.project_into(tok, &mut x);
            let norm = dot(&x, &x).sqrt();
            if !(norm >= ZERO_NORM_EPS) {
                return Err(Error::ZeroRow { row: t });
            }
            let y_dot_g = dot(&x, g) / norm;
            for k in 0..d {
                gx[k] = (g[k] - x[k] / norm * y_dot_g) / norm;
            }
            let e = self.embed_table.row(tok as usize);
            let row_grad = grads
                .embed_rows
                .entry(tok)
                .or_insert_with(|| vec![0.0; hdim]);
            for h in 0..hdim {
                let p = self.projection.row(h);
                row_grad[h] += dot(p, &gx);
                let eh = e[h];
                if eh != 0.0 {
                    for (gp, &gxk) in grads.projection.row_mut(h).iter_mut().zip(&gx) {
                        *gp += eh * gxk;
                    }
                }
            }
        }
        Ok(())
    }

    /// Fresh gradient for one sequence.
    pub fn encode_backward(&self, tokens: &[u32], grad_embeddings: &Matrix) -> Result<EncoderGrads> {
        let mut grads = EncoderGrads::zeros(self);
        self.encode_backward_into(tokens, grad_embeddings, &mut grads)?;
        Ok(grads)
    }
}

pub fn truncate(tokens: &[u32], max_len: usize) -> &[u32] {
    &tokens[..tokens.len().min(max_len)]
}

/// Parameter gradients: sparse over embedding rows, dense over the
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embed_rows: BTreeMap<u32, Vec<f64>>,
    pub projection: Matrix,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        EncoderGrads {
            embed_rows: BTreeMap::new(),
            projection: Matrix::zeros(params.hidden(), params.out_dim()),
        }
    }

    fn matches(&self, params: &EncoderParams) -> bool {
        self.projection.rows() == params.hidden() && self.projection.cols() == params.out_dim()
    }

    pub fn is_zero(&self) -> bool {
        self.projection.as_slice().iter().all(|&v| v == 0.0)
            && self.embed_rows.values().flatten().all(|&v| v == 0.0)
    }

    pub fn scale(&mut self, factor: f64) {
        self.projection.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        self.embed_rows
            .values_mut()
            .flatten()
            .for_each(|v| *v *= factor);
    }

    /// Plain SGD step: `θ ← θ − lr · g`.
    pub fn apply_sgd(&self, params: &mut EncoderParams, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for (&tok, g) in &self.embed_rows {
            for (p, &gv) in params.embed_table_mut().row_mut(tok as usize).iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
        for (p, &gv) in params
            .projection_mut()
            .as_mut_slice()
            .iter_mut()
            .zip(self.projection.as_slice())
        {
            *p -= lr * gv;
        }
    }
}
