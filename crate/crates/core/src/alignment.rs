//! Greedy cross-lingual token alignment.
//!
//! Given teacher embeddings of an English text and student embeddings of
//! its translation, repeatedly pick the globally closest (teacher, student)
//! pair under cosine distance and move that teacher row into the student's
//! position. The working distance matrix has one row per *slot* of the
//! reordered teacher arrangement: after a match `(i, j)` rows `i` and `j`
//! are swapped, and only then are row `j` and column `j` masked with `+∞`.
//! The teacher row displaced from slot `j` into slot `i` therefore stays
//! matchable.
//!
//! When the student is longer than the teacher the arrangement is padded
//! with empty slots (all-`+∞` rows) so that any student position can
//! receive a teacher row. At most `min(|teacher|, |student|)` matches are
//! made.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{cosine_distance_matrix, EmbeddingMatrix, Matrix};

/// One matched pair, recorded in the order matches were made.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedPair {
    pub student_pos: usize,
    pub teacher_row: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPlan {
    teacher_len: usize,
    student_len: usize,
    swaps: Vec<(usize, usize)>,
    matches: Vec<AlignedPair>,
    permutation: Vec<Option<usize>>,
}

impl AlignmentPlan {
    /// Identity alignment over the first `min(teacher_len, student_len)`
    /// positions.
    pub fn identity(teacher_len: usize, student_len: usize) -> Self {
        let k = teacher_len.min(student_len);
        let n = teacher_len.max(student_len);
        AlignmentPlan {
            teacher_len,
            student_len,
            swaps: (0..k).map(|p| (p, p)).collect(),
            matches: (0..k)
                .map(|p| AlignedPair {
                    student_pos: p,
                    teacher_row: p,
                    distance: f64::NAN,
                })
                .collect(),
            permutation: (0..n).map(|p| (p < teacher_len).then_some(p)).collect(),
        }
    }

    pub fn teacher_len(&self) -> usize {
        self.teacher_len
    }

    pub fn student_len(&self) -> usize {
        self.student_len
    }

    /// Row swaps to apply to the teacher matrix, in order.
    pub fn swaps(&self) -> &[(usize, usize)] {
        &self.swaps
    }

    pub fn matches(&self) -> &[AlignedPair] {
        &self.matches
    }

    /// Output slot → source teacher row. Has `max(|teacher|, |student|)`
    /// entries; `None` marks padding slots.
    pub fn permutation(&self) -> &[Option<usize>] {
        &self.permutation
    }

    /// Student positions that received a teacher row, ascending.
    pub fn matched_positions(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.matches.iter().map(|m| m.student_pos).collect();
        p.sort_unstable();
        p
    }

    /// Sum of matched distances.
    pub fn total_cost(&self) -> f64 {
        self.matches.iter().map(|m| m.distance).sum()
    }

    /// Replays the swap list on the identity arrangement.
    pub fn replay_swaps(&self) -> Vec<Option<usize>> {
        let n = self.teacher_len.max(self.student_len);
        let mut slots: Vec<Option<usize>> = (0..n).map(|p| (p < self.teacher_len).then_some(p)).collect();
        for &(i, j) in &self.swaps {
            slots.swap(i, j);
        }
        slots
    }
}

impl fmt::Display for AlignmentPlan {
    /// One `student_pos ← teacher_row (distance)` line per matched position.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut matches = self.matches.clone();
        matches.sort_by_key(|m| m.student_pos);
        for m in matches {
            writeln!(f, "{} ← {} ({:.6})", m.student_pos, m.teacher_row, m.distance)?;
        }
        Ok(())
    }
}

fn check_inputs(v_t: &EmbeddingMatrix, v_s: &EmbeddingMatrix) -> Result<()> {
    if v_t.dim() != v_s.dim() {
        return Err(Error::DimMismatch {
            left: v_t.dim(),
            right: v_s.dim(),
        });
    }
    Ok(())
}

/// Greedy alignment of teacher rows to student positions.
pub fn greedy_align(v_t: &EmbeddingMatrix, v_s: &EmbeddingMatrix) -> Result<AlignmentPlan> {
    check_inputs(v_t, v_s)?;
    greedy_align_distances(&cosine_distance_matrix(v_t, v_s)?)
}

/// Greedy alignment driven by a precomputed `teacher × student` distance
/// matrix.
pub fn greedy_align_distances(dm: &Matrix) -> Result<AlignmentPlan> {
    let (t_len, s_len) = (dm.rows(), dm.cols());
    if t_len == 0 || s_len == 0 {
        return Err(Error::EmptyInput("alignment needs at least one token per side"));
    }
    let n = t_len.max(s_len);
    let mut work = Matrix::zeros(n, s_len);
    for i in 0..n {
        if i < t_len {
            work.row_mut(i).copy_from_slice(dm.row(i));
        } else {
            work.fill_row(i, f64::INFINITY);
        }
    }
    let mut slots: Vec<Option<usize>> = (0..n).map(|p| (p < t_len).then_some(p)).collect();
    let iterations = t_len.min(s_len);
    let mut swaps = Vec::with_capacity(iterations);
    let mut matches = Vec::with_capacity(iterations);

    for _ in 0..iterations {
        let Some((i, j)) = argmin_finite(&work) else {
            break;
        };
        let teacher_row = slots[i].expect("finite rows always hold a teacher");
        matches.push(AlignedPair {
            student_pos: j,
            teacher_row,
            distance: dm.get(teacher_row, j),
        });
        work.swap_rows(i, j);
        slots.swap(i, j);
        work.fill_row(j, f64::INFINITY);
        work.fill_col(j, f64::INFINITY);
        swaps.push((i, j));
    }

    Ok(AlignmentPlan {
        teacher_len: t_len,
        student_len: s_len,
        swaps,
        matches,
        permutation: slots,
    })
}

/// First minimum in row-major order, skipping `+∞` (and NaN) entries.
fn argmin_finite(m: &Matrix) -> Option<(usize, usize)> {
    let mut best = f64::INFINITY;
    let mut at = None;
    for i in 0..m.rows() {
        for (j, &v) in m.row(i).iter().enumerate() {
            if v < best {
                best = v;
                at = Some((i, j));
            }
        }
    }
    at
}

/// Exchanges teacher rows according to the plan's swap list.
///
/// The result has `max(|teacher|, |student|)` rows so that row `j` holds
/// the teacher row aligned to student position `j`. Padding slots are zero
/// rows, and a padded result is not flagged as normalized.
pub fn apply_alignment(v_t: &EmbeddingMatrix, plan: &AlignmentPlan) -> Result<EmbeddingMatrix> {
    if plan.teacher_len() != v_t.tokens() {
        return Err(Error::PlanMismatch(format!(
            "plan covers {} teacher rows, matrix has {}",
            plan.teacher_len(),
            v_t.tokens()
        )));
    }
    let n = plan.teacher_len().max(plan.student_len());
    let mut out = Matrix::zeros(n, v_t.dim());
    for i in 0..v_t.tokens() {
        out.row_mut(i).copy_from_slice(v_t.row(i));
    }
    for &(i, j) in plan.swaps() {
        if i >= n || j >= n {
            return Err(Error::PlanMismatch(format!("swap ({i}, {j}) outside {n} slots")));
        }
        out.swap_rows(i, j);
    }
    let normalized = v_t.is_normalized() && plan.student_len() <= plan.teacher_len();
    Ok(EmbeddingMatrix::with_normalized_flag(out, normalized))
}

/// Straightforward restatement of the greedy matcher used as an oracle.
///
/// Instead of mutating a distance matrix it keeps, for every teacher row,
/// the slot it currently occupies, and scans all unconsumed
/// `(teacher, student)` pairs for the smallest distance (ties: lowest slot,
/// then lowest student position).
pub fn reference_align(v_t: &EmbeddingMatrix, v_s: &EmbeddingMatrix) -> Result<AlignmentPlan> {
    check_inputs(v_t, v_s)?;
    reference_align_distances(&cosine_distance_matrix(v_t, v_s)?)
}

pub fn reference_align_distances(dm: &Matrix) -> Result<AlignmentPlan> {
    let (t_len, s_len) = (dm.rows(), dm.cols());
    if t_len == 0 || s_len == 0 {
        return Err(Error::EmptyInput("alignment needs at least one token per side"));
    }
    let n = t_len.max(s_len);
    let mut slot_of: Vec<usize> = (0..t_len).collect();
    let mut teacher_used = vec![false; t_len];
    let mut student_used = vec![false; s_len];
    let mut swaps = Vec::new();
    let mut matches = Vec::new();

    for _ in 0..t_len.min(s_len) {
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for t in (0..t_len).filter(|&t| !teacher_used[t]) {
            for j in (0..s_len).filter(|&j| !student_used[j]) {
                let cand = (dm.get(t, j), slot_of[t], j, t);
                if cand.0.is_nan() || cand.0 == f64::INFINITY {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => (cand.0, cand.1, cand.2) < (b.0, b.1, b.2),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let Some((distance, from_slot, j, t)) = best else {
            break;
        };
        // whoever sits in slot j moves to the slot t is leaving
        if let Some(u) = (0..t_len).find(|&u| slot_of[u] == j) {
            slot_of[u] = from_slot;
        }
        slot_of[t] = j;
        teacher_used[t] = true;
        student_used[j] = true;
        swaps.push((from_slot, j));
        matches.push(AlignedPair {
            student_pos: j,
            teacher_row: t,
            distance,
        });
    }

    let mut permutation = vec![None; n];
    for (t, &slot) in slot_of.iter().enumerate() {
        permutation[slot] = Some(t);
    }
    Ok(AlignmentPlan {
        teacher_len: t_len,
        student_len: s_len,
        swaps,
        matches,
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_emb(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
        let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingMatrix::normalized(Matrix::from_vec(rows, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn identity_friendly_distances() {
        let dm = Matrix::from_rows(&[[0.1, 0.9], [0.8, 0.2]]).unwrap();
        let plan = greedy_align_distances(&dm).unwrap();
        assert_eq!(plan.swaps(), &[(0, 0), (1, 1)]);
        assert_eq!(plan.permutation(), &[Some(0), Some(1)]);
    }

    #[test]
    fn crossed_distances() {
        let dm = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let plan = greedy_align_distances(&dm).unwrap();
        assert_eq!(plan.swaps(), &[(0, 1), (0, 0)]);
        assert_eq!(plan.permutation(), &[Some(1), Some(0)]);
        assert_eq!(reference_align_distances(&dm).unwrap().permutation(), plan.permutation());
    }

    #[test]
    fn identical_inputs_align_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_emb(&mut rng, 6, 8);
        let plan = greedy_align(&v, &v).unwrap();
        let expected: Vec<_> = (0..6).map(Some).collect();
        assert_eq!(plan.permutation(), expected.as_slice());
    }

    #[test]
    fn single_token() {
        let v = EmbeddingMatrix::normalized(Matrix::from_rows(&[[0.3, 0.4]]).unwrap()).unwrap();
        let plan = reference_align(&v, &v).unwrap();
        assert_eq!(plan.matches().len(), 1);
        assert_eq!(plan.permutation(), &[Some(0)]);
    }

    #[test]
    fn displaced_row_stays_matchable() {
        // teacher 0 matches student 2 first, pushing teacher 2 into slot 0;
        // teacher 2 must still be able to claim student 0 afterwards.
        let dm = Matrix::from_rows(&[
            [0.9, 0.8, 0.0],
            [0.7, 0.1, 0.9],
            [0.2, 0.9, 0.9],
        ])
        .unwrap();
        let plan = greedy_align_distances(&dm).unwrap();
        assert_eq!(plan.swaps(), &[(0, 2), (1, 1), (0, 0)]);
        assert_eq!(plan.permutation(), &[Some(2), Some(1), Some(0)]);
        assert_eq!(reference_align_distances(&dm).unwrap(), plan);
    }

    #[test]
    fn errors() {
        let a = EmbeddingMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = EmbeddingMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(greedy_align(&a, &b), Err(Error::DimMismatch { .. })));
        assert!(matches!(
            greedy_align_distances(&Matrix::zeros(0, 3)),
            Err(Error::EmptyInput(_))
        ));
        let plan = greedy_align(&a, &a).unwrap();
        let two = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(apply_alignment(&two, &plan), Err(Error::PlanMismatch(_))));
    }

    #[test]
    fn apply_empty_and_single_swap() {
        let v = EmbeddingMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut plan = AlignmentPlan::identity(2, 2);
        plan.swaps.clear();
        assert_eq!(apply_alignment(&v, &plan).unwrap().matrix(), v.matrix());
        plan.swaps = vec![(0, 1)];
        let out = apply_alignment(&v, &plan).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
        assert_eq!(out.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn apply_matches_permutation_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v_t = random_emb(&mut rng, 6, 8);
        let v_s = random_emb(&mut rng, 6, 8);
        let plan = greedy_align(&v_t, &v_s).unwrap();
        let out = apply_alignment(&v_t, &plan).unwrap();
        for (pos, src) in plan.permutation().iter().enumerate() {
            assert_eq!(out.row(pos), v_t.row(src.unwrap()));
        }
        for m in plan.matches() {
            assert_eq!(out.row(m.student_pos), v_t.row(m.teacher_row));
        }
        let mut a: Vec<Vec<u64>> = out.matrix().iter_rows().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = v_t.matrix().iter_rows().map(|r| r.iter().map(|x| x.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn shorter_teacher_leaves_padding_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let v_t = random_emb(&mut rng, 3, 8);
        let v_s = random_emb(&mut rng, 5, 8);
        let plan = greedy_align(&v_t, &v_s).unwrap();
        assert_eq!(plan.matched_positions().len(), 3);
        assert_eq!(plan.permutation().len(), 5);
        assert_eq!(plan.permutation().iter().filter(|p| p.is_none()).count(), 2);
        for m in plan.matches() {
            assert_eq!(plan.permutation()[m.student_pos], Some(m.teacher_row));
        }
        let out = apply_alignment(&v_t, &plan).unwrap();
        assert_eq!(out.tokens(), 5);
        assert!(!out.is_normalized());
    }

    #[test]
    fn greedy_cost_is_never_below_optimal() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for k in 0..n {
                    let mut q = p.clone();
                    q.insert(k, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let perms = permutations(5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut gaps = Vec::new();
        for _ in 0..50 {
            let v_t = random_emb(&mut rng, 5, 8);
            let v_s = random_emb(&mut rng, 5, 8);
            let dm = cosine_distance_matrix(&v_t, &v_s).unwrap();
            let optimal = perms
                .iter()
                .map(|p| (0..5).map(|t| dm.get(t, p[t])).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let greedy = greedy_align_distances(&dm).unwrap().total_cost();
            assert!(greedy >= optimal - 1e-12);
            gaps.push(greedy - optimal);
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        println!("greedy - optimal cost on 5x5: mean gap {mean:.4}");
    }

    proptest! {
        #[test]
        fn greedy_equals_reference(seed in any::<u64>(), t in 1usize..9, s in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v_t = random_emb(&mut rng, t, 4);
            let v_s = random_emb(&mut rng, s, 4);
            let g = greedy_align(&v_t, &v_s).unwrap();
            let r = reference_align(&v_t, &v_s).unwrap();
            prop_assert_eq!(g.permutation(), r.permutation());
            prop_assert_eq!(g.swaps(), r.swaps());
            prop_assert_eq!(g.replay_swaps(), g.permutation().to_vec());
            prop_assert_eq!(g.swaps().len(), t.min(s));
        }

        #[test]
        fn first_match_is_global_minimum(seed in any::<u64>(), t in 1usize..7, s in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dm = cosine_distance_matrix(&random_emb(&mut rng, t, 4), &random_emb(&mut rng, s, 4)).unwrap();
            let plan = greedy_align_distances(&dm).unwrap();
            let min = dm.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(plan.matches()[0].distance, min);
            let mut students: Vec<usize> = plan.matches().iter().map(|m| m.student_pos).collect();
            let mut teachers: Vec<usize> = plan.matches().iter().map(|m| m.teacher_row).collect();
            students.sort_unstable();
            students.dedup();
            teachers.sort_unstable();
            teachers.dedup();
            prop_assert_eq!(students.len(), plan.matches().len());
            prop_assert_eq!(teachers.len(), plan.matches().len());
        }

        #[test]
        fn recovers_row_permutation(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v_t = random_emb(&mut rng, n, 8);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let v_s = EmbeddingMatrix::from_unit_rows(v_t.matrix().gather_rows(&order));
            let plan = greedy_align(&v_t, &v_s).unwrap();
            let expected: Vec<Option<usize>> = order.iter().copied().map(Some).collect();
            prop_assert_eq!(plan.permutation(), expected.as_slice());
        }
    }
}
