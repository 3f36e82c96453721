//! Distillation objectives.
//!
//! * Relevance distillation: the student's softmax over `(S(q,d+), S(q,d-))`
//!   is pulled towards the teacher's with a temperature-scaled
//!   `KL(teacher ‖ student)`.
//! * Representation distillation: the student's token embeddings are
//!   pulled towards the teacher's (greedily re-ordered) token embeddings
//!   with a mean squared error.

use crate::alignment::{apply_alignment, greedy_align, AlignmentPlan};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_with_temperature, softmax_with_temperature, EmbeddingMatrix, Matrix};

/// Multiplier applied to the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlScaling {
    /// `τ² · KL`, which keeps gradient magnitudes comparable across
    /// temperatures.
    #[default]
    TauSquared,
    /// Plain `KL`.
    Unscaled,
}

impl KlScaling {
    pub fn factor(self, tau: f64) -> f64 {
        match self {
            KlScaling::TauSquared => tau * tau,
            KlScaling::Unscaled => 1.0,
        }
    }
}

/// `(s_pos, s_neg)` score pairs for teacher and student, one per triple.
#[derive(Debug, Clone, PartialEq)]
pub struct KdRelevanceBatch {
    pub teacher_scores: Vec<(f64, f64)>,
    pub student_scores: Vec<(f64, f64)>,
    pub tau: f64,
    pub scaling: KlScaling,
}

impl KdRelevanceBatch {
    pub fn new(teacher_scores: Vec<(f64, f64)>, student_scores: Vec<(f64, f64)>, tau: f64) -> Self {
        KdRelevanceBatch {
            teacher_scores,
            student_scores,
            tau,
            scaling: KlScaling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdRelevanceOutput {
    /// Mean over triples of `scale · KL(p ‖ q)`.
    pub loss: f64,
    /// Mean unscaled KL, for reporting.
    pub mean_kl: f64,
    /// `∂loss/∂(s_pos, s_neg)` of the student, per triple. Since the loss
    /// is a batch mean each entry carries a `1/n` factor.
    pub grads: Vec<(f64, f64)>,
}

/// `KL(p ‖ q) = Σ p_k (ln p_k − ln q_k)` from log-probabilities.
pub fn kl_divergence_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() * (lp - lq) })
        .sum()
}

pub fn kd_relevance_loss(batch: &KdRelevanceBatch) -> Result<KdRelevanceOutput> {
    let tau = batch.tau;
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let n = batch.teacher_scores.len();
    if n != batch.student_scores.len() {
        return Err(Error::LengthMismatch {
            teacher: n,
            student: batch.student_scores.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("relevance distillation batch"));
    }
    let scale = batch.scaling.factor(tau);
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut kl_sum = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (&(tp, tn), &(sp, sn)) in batch.teacher_scores.iter().zip(&batch.student_scores) {
        let log_p = log_softmax_with_temperature(&[tp, tn], tau)?;
        let log_q = log_softmax_with_temperature(&[sp, sn], tau)?;
        let kl = kl_divergence_from_logs(&log_p, &log_q).max(0.0);
        kl_sum += kl;
        loss += scale * kl;
        let p = softmax_with_temperature(&[tp, tn], tau)?;
        let q = softmax_with_temperature(&[sp, sn], tau)?;
        // d KL / d s_k = (q_k - p_k) / tau
        let g = scale / tau * inv_n;
        grads.push((g * (q[0] - p[0]), g * (q[1] - p[1])));
    }
    Ok(KdRelevanceOutput {
        loss: loss * inv_n,
        mean_kl: kl_sum * inv_n,
        grads,
    })
}

/// How the teacher side of a representation batch is lined up with the
/// student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Teacher sees English, student sees the translation: greedy alignment.
    CrossLingual,
    /// Both see the same English text: position `i` matches position `i`.
    EnglishIdentity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdReprBatch {
    pub student_embeddings: EmbeddingMatrix,
    pub teacher_aligned: EmbeddingMatrix,
    pub matched_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdReprOutput {
    pub loss: f64,
    /// Same shape as the student embeddings; zero on unmatched rows.
    pub grad_student: Matrix,
}

/// Mean over matched positions and dimensions of `(student − teacher)²`.
pub fn kd_repr_loss(batch: &KdReprBatch) -> Result<KdReprOutput> {
    let student = &batch.student_embeddings;
    let teacher = &batch.teacher_aligned;
    if student.dim() != teacher.dim() {
        return Err(Error::DimMismatch {
            left: student.dim(),
            right: teacher.dim(),
        });
    }
    if batch.matched_positions.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    let limit = student.tokens().min(teacher.tokens());
    if let Some(&bad) = batch.matched_positions.iter().find(|&&p| p >= limit) {
        return Err(Error::PositionOutOfRange {
            position: bad,
            len: limit,
        });
    }
    let dim = student.dim();
    let denom = (batch.matched_positions.len() * dim) as f64;
    let mut grad = Matrix::zeros(student.tokens(), dim);
    let mut sum = 0.0;
    for &pos in &batch.matched_positions {
        let g = grad.row_mut(pos);
        for ((gk, &s), &t) in g.iter_mut().zip(student.row(pos)).zip(teacher.row(pos)) {
            let diff = s - t;
            sum += diff * diff;
            *gk = 2.0 * diff / denom;
        }
    }
    Ok(KdReprOutput {
        loss: sum / denom,
        grad_student: grad,
    })
}

/// Lines up teacher embeddings with the student's and packages them for
/// [`kd_repr_loss`]. The alignment plan is returned alongside for callers
/// that want to inspect it.
pub fn make_repr_batch(
    kind: PairKind,
    teacher: &EmbeddingMatrix,
    student: &EmbeddingMatrix,
) -> Result<(KdReprBatch, AlignmentPlan)> {
    if teacher.dim() != student.dim() {
        return Err(Error::DimMismatch {
            left: teacher.dim(),
            right: student.dim(),
        });
    }
    let (teacher_aligned, plan) = match kind {
        PairKind::CrossLingual => {
            let plan = greedy_align(teacher, student)?;
            (apply_alignment(teacher, &plan)?, plan)
        }
        PairKind::EnglishIdentity => (
            teacher.clone(),
            AlignmentPlan::identity(teacher.tokens(), student.tokens()),
        ),
    };
    let matched_positions = plan.matched_positions();
    Ok((
        KdReprBatch {
            student_embeddings: student.clone(),
            teacher_aligned,
            matched_positions,
        },
        plan,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// KL((σ(1), 1−σ(1)) ‖ (½, ½)), computed with 30-digit arithmetic.
    const WORKED_KL: f64 = 0.110_944_071_671_727_35;

    fn random_emb(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
        let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingMatrix::normalized(Matrix::from_vec(rows, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn identical_scores_give_zero_loss() {
        let s = vec![(1.5, -0.2), (0.3, 0.9)];
        let out = kd_relevance_loss(&KdRelevanceBatch::new(s.clone(), s, 2.0)).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert!(out.grads.iter().all(|&(a, b)| a.abs() < 1e-15 && b.abs() < 1e-15));
    }

    #[test]
    fn worked_example_at_tau_two() {
        let out = kd_relevance_loss(&KdRelevanceBatch::new(vec![(2.0, 0.0)], vec![(0.0, 0.0)], 2.0)).unwrap();
        assert!((out.mean_kl - WORKED_KL).abs() < 1e-12);
        assert!((out.mean_kl - 0.11087).abs() < 1e-4);
        assert!((out.loss - 4.0 * WORKED_KL).abs() < 1e-12);
        assert!((out.loss - 0.44348).abs() < 1e-3);

        let mut unscaled = KdRelevanceBatch::new(vec![(2.0, 0.0)], vec![(0.0, 0.0)], 2.0);
        unscaled.scaling = KlScaling::Unscaled;
        assert!((kd_relevance_loss(&unscaled).unwrap().loss - WORKED_KL).abs() < 1e-12);
    }

    #[test]
    fn relevance_errors() {
        let b = KdRelevanceBatch::new(vec![(1.0, 0.0)], vec![(1.0, 0.0)], 0.0);
        assert!(matches!(kd_relevance_loss(&b), Err(Error::NonPositiveTemperature(_))));
        let b = KdRelevanceBatch::new(vec![(1.0, 0.0)], vec![], 1.0);
        assert!(matches!(kd_relevance_loss(&b), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn relevance_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = 1e-5;
        for _ in 0..20 {
            let n = rng.random_range(1..5);
            let teacher: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let student: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let tau = rng.random_range(0.5..4.0);
            let out = kd_relevance_loss(&KdRelevanceBatch::new(teacher.clone(), student.clone(), tau)).unwrap();
            for k in 0..n {
                for side in 0..2 {
                    let eval = |delta: f64| {
                        let mut s = student.clone();
                        if side == 0 { s[k].0 += delta } else { s[k].1 += delta }
                        kd_relevance_loss(&KdRelevanceBatch::new(teacher.clone(), s, tau)).unwrap().loss
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = if side == 0 { out.grads[k].0 } else { out.grads[k].1 };
                    assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-6), "{fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn repr_examples() {
        let s = EmbeddingMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let t = EmbeddingMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let out = kd_repr_loss(&KdReprBatch {
            student_embeddings: s.clone(),
            teacher_aligned: t,
            matched_positions: vec![0],
        })
        .unwrap();
        assert_eq!(out.loss, 1.0);
        let same = kd_repr_loss(&KdReprBatch {
            student_embeddings: s.clone(),
            teacher_aligned: s.clone(),
            matched_positions: vec![0],
        })
        .unwrap();
        assert_eq!(same.loss, 0.0);
        let empty = KdReprBatch {
            student_embeddings: s.clone(),
            teacher_aligned: s,
            matched_positions: vec![],
        };
        assert!(matches!(kd_repr_loss(&empty), Err(Error::EmptyMatchSet)));
    }

    #[test]
    fn repr_matches_elementwise_recomputation_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = random_emb(&mut rng, 5, 8);
        let t = random_emb(&mut rng, 5, 8);
        let matched = vec![0, 2, 3];
        let batch = KdReprBatch {
            student_embeddings: s.clone(),
            teacher_aligned: t.clone(),
            matched_positions: matched.clone(),
        };
        let out = kd_repr_loss(&batch).unwrap();
        let mut brute = 0.0;
        for &p in &matched {
            for k in 0..8 {
                brute += (s.row(p)[k] - t.row(p)[k]).powi(2);
            }
        }
        brute /= (matched.len() * 8) as f64;
        assert!((out.loss - brute).abs() < 1e-12);

        let h = 1e-5;
        for k in 0..s.matrix().as_slice().len() {
            let eval = |delta: f64| {
                let mut m = s.matrix().clone();
                m.as_mut_slice()[k] += delta;
                kd_repr_loss(&KdReprBatch {
                    student_embeddings: EmbeddingMatrix::new(m).unwrap(),
                    teacher_aligned: t.clone(),
                    matched_positions: matched.clone(),
                })
                .unwrap()
                .loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = out.grad_student.as_slice()[k];
            assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-8), "{fd} vs {a}");
        }
    }

    #[test]
    fn english_identity_uses_teacher_as_is() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_emb(&mut rng, 4, 8);
        let s = random_emb(&mut rng, 4, 8);
        let (batch, _) = make_repr_batch(PairKind::EnglishIdentity, &t, &s).unwrap();
        assert_eq!(batch.matched_positions, vec![0, 1, 2, 3]);
        assert_eq!(batch.teacher_aligned, t);
    }

    #[test]
    fn cross_lingual_permutation_is_undone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_emb(&mut rng, 6, 8);
        let mut order: Vec<usize> = (0..6).collect();
        order.shuffle(&mut rng);
        let s = EmbeddingMatrix::from_unit_rows(t.matrix().gather_rows(&order));
        let (batch, _) = make_repr_batch(PairKind::CrossLingual, &t, &s).unwrap();
        assert_eq!(batch.teacher_aligned.matrix(), s.matrix());
        assert!(kd_repr_loss(&batch).unwrap().loss < 1e-12);
    }

    #[test]
    fn cross_lingual_unequal_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_emb(&mut rng, 3, 8);
        let s = random_emb(&mut rng, 5, 8);
        let (batch, _) = make_repr_batch(PairKind::CrossLingual, &t, &s).unwrap();
        assert_eq!(batch.matched_positions.len(), 3);
        kd_repr_loss(&batch).unwrap();
    }

    proptest! {
        #[test]
        fn relevance_loss_depends_only_on_score_differences(
            tp in -5.0f64..5.0, tn in -5.0f64..5.0, sp in -5.0f64..5.0, sn in -5.0f64..5.0,
            shift in -10.0f64..10.0, tau in 0.2f64..5.0,
        ) {
            let base = kd_relevance_loss(&KdRelevanceBatch::new(vec![(tp, tn)], vec![(sp, sn)], tau)).unwrap();
            prop_assert!(base.loss >= 0.0);
            let shifted = kd_relevance_loss(&KdRelevanceBatch::new(vec![(tp + shift, tn + shift)], vec![(sp, sn)], tau)).unwrap();
            prop_assert!((base.loss - shifted.loss).abs() < 1e-9);
            let matched = kd_relevance_loss(&KdRelevanceBatch::new(vec![(tp, tn)], vec![(tp + shift, tn + shift)], tau)).unwrap();
            prop_assert!(matched.loss < 1e-12);
        }

        #[test]
        fn one_descent_step_lowers_repr_loss(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_emb(&mut rng, 4, 6);
            let t = random_emb(&mut rng, 4, 6);
            let batch = KdReprBatch { student_embeddings: s.clone(), teacher_aligned: t.clone(), matched_positions: vec![0, 1, 3] };
            let out = kd_repr_loss(&batch).unwrap();
            prop_assume!(out.loss > 1e-9);
            let mut stepped = s.matrix().clone();
            for (v, g) in stepped.as_mut_slice().iter_mut().zip(out.grad_student.as_slice()) {
                *v -= 1e-3 * g;
            }
            let after = kd_repr_loss(&KdReprBatch { student_embeddings: EmbeddingMatrix::new(stepped).unwrap(), ..batch }).unwrap();
            prop_assert!(after.loss < out.loss);
        }
    }
}
