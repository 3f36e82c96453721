//! One training stage: fine-tuning on triples, relevance distillation, or
//! representation distillation, all driven by plain mini-batch SGD.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::distillation::{kd_relevance_loss, kd_repr_loss, make_repr_batch, KdRelevanceBatch, KlScaling, PairKind};
use crate::encoder::{truncate, EncoderGrads, EncoderParams};
use crate::error::{Error, Result};
use crate::late_interaction::{maxsim_backward, maxsim_score, maxsim_value, triple_loss};
use crate::tensor::EmbeddingMatrix;

pub const DEFAULT_MAX_QUERY_TOKENS: usize = 32;
pub const DEFAULT_MAX_DOC_TOKENS: usize = 180;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKind {
    FinetuneTriples,
    KdRelevance,
    KdRepresentation,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::FinetuneTriples => "finetune_triples",
            StageKind::KdRelevance => "kd_relevance",
            StageKind::KdRepresentation => "kd_representation",
        }
    }

    pub fn needs_teacher(self) -> bool {
        !matches!(self, StageKind::FinetuneTriples)
    }
}

impl std::str::FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune_triples" => Ok(StageKind::FinetuneTriples),
            "kd_relevance" => Ok(StageKind::KdRelevance),
            "kd_representation" => Ok(StageKind::KdRepresentation),
            other => Err(Error::InvalidConfig(format!("unknown stage kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub name: String,
    pub kind: StageKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Only read by relevance distillation.
    pub tau: f64,
    pub kl_scaling: KlScaling,
    /// Examples per gradient computation.
    pub batch_size: usize,
    /// Micro-batches summed into one update; the effective batch is
    /// `batch_size · accum_steps`.
    pub accum_steps: usize,
    pub seed: u64,
    pub max_query_tokens: usize,
    pub max_doc_tokens: usize,
    /// Representation distillation also feeds the student the English side
    /// against an identity alignment.
    pub english_identity: bool,
}

impl StageConfig {
    /// Full-scale hyper-parameters for each stage kind.
    pub fn reference_defaults(kind: StageKind) -> Self {
        let (lr, epochs) = match kind {
            StageKind::FinetuneTriples => (6e-6, 5),
            StageKind::KdRelevance => (6e-6, 5),
            StageKind::KdRepresentation => (4.8e-5, 2),
        };
        StageConfig {
            name: kind.as_str().to_string(),
            kind,
            learning_rate: lr,
            epochs,
            tau: 2.0,
            kl_scaling: KlScaling::TauSquared,
            batch_size: 32,
            accum_steps: 6,
            seed: 0,
            max_query_tokens: DEFAULT_MAX_QUERY_TOKENS,
            max_doc_tokens: DEFAULT_MAX_DOC_TOKENS,
            english_identity: true,
        }
    }

    /// Copy of `self` with every `{prefix}.{field}` key of `config` applied.
    pub fn with_config(&self, config: &Config, prefix: &str) -> Result<Self> {
        let key = |field: &str| format!("{prefix}.{field}");
        let kl_scaling = match config.get(&key("kl_scaling")) {
            None => self.kl_scaling,
            Some("tau_squared") => KlScaling::TauSquared,
            Some("unscaled") => KlScaling::Unscaled,
            Some(other) => return Err(Error::InvalidConfig(format!("unknown kl_scaling `{other}`"))),
        };
        Ok(StageConfig {
            name: config.get_or(&key("name"), self.name.clone())?,
            kind: self.kind,
            learning_rate: config.get_or(&key("learning_rate"), self.learning_rate)?,
            epochs: config.get_or(&key("epochs"), self.epochs)?,
            tau: config.get_or(&key("tau"), self.tau)?,
            kl_scaling,
            batch_size: config.get_or(&key("batch_size"), self.batch_size)?,
            accum_steps: config.get_or(&key("accum_steps"), self.accum_steps)?,
            seed: config.get_or(&key("seed"), self.seed)?,
            max_query_tokens: config.get_or(&key("max_query_tokens"), self.max_query_tokens)?,
            max_doc_tokens: config.get_or(&key("max_doc_tokens"), self.max_doc_tokens)?,
            english_identity: config.get_or(&key("english_identity"), self.english_identity)?,
        })
    }

    /// Inverse of [`StageConfig::with_config`].
    pub fn write_config(&self, config: &mut Config, prefix: &str) {
        let key = |field: &str| format!("{prefix}.{field}");
        config.set(key("name"), &self.name);
        config.set(key("learning_rate"), self.learning_rate);
        config.set(key("epochs"), self.epochs);
        config.set(key("tau"), self.tau);
        config.set(
            key("kl_scaling"),
            match self.kl_scaling {
                KlScaling::TauSquared => "tau_squared",
                KlScaling::Unscaled => "unscaled",
            },
        );
        config.set(key("batch_size"), self.batch_size);
        config.set(key("accum_steps"), self.accum_steps);
        config.set(key("seed"), self.seed);
        config.set(key("max_query_tokens"), self.max_query_tokens);
        config.set(key("max_doc_tokens"), self.max_doc_tokens);
        config.set(key("english_identity"), self.english_identity);
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("stage `{}`: {m}", self.name)));
        // lr = 0 is allowed and leaves the model untouched
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.kind == StageKind::KdRelevance && !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return bad("batch size and accumulation steps must be at least 1".into());
        }
        if self.max_query_tokens == 0 || self.max_doc_tokens == 0 {
            return bad("maximum lengths must be at least 1".into());
        }
        Ok(())
    }
}

/// A training triple whose documents are indices into a shared table.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    /// Query as the trained model sees it.
    pub query: Vec<u32>,
    /// English rendering shown to the teacher during relevance distillation.
    pub teacher_query: Option<Vec<u32>>,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelText {
    pub english: Vec<u32>,
    pub foreign: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub enum StageData<'a> {
    Triples { triples: &'a [Triple], docs: &'a [Vec<u32>] },
    Parallel(&'a [ParallelText]),
}

impl StageData<'_> {
    fn describe(&self) -> &'static str {
        match self {
            StageData::Triples { .. } => "triple",
            StageData::Parallel(_) => "parallel-text",
        }
    }

    fn len(&self) -> usize {
        match self {
            StageData::Triples { triples, .. } => triples.len(),
            StageData::Parallel(p) => p.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Per-epoch mean losses; renders as `stage epoch mean_loss` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn last_loss(&self, stage: &str) -> Option<f64> {
        self.entries.iter().rev().find(|e| e.stage == stage).map(|e| e.mean_loss)
    }
}

impl fmt::Display for TrainingLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {} {:.9}", e.stage, e.epoch, e.mean_loss)?;
        }
        Ok(())
    }
}

/// Runs one stage and returns the updated student.
pub fn run_stage(
    model: &EncoderParams,
    teacher: Option<&EncoderParams>,
    config: &StageConfig,
    data: StageData<'_>,
    log: &mut TrainingLog,
) -> Result<EncoderParams> {
    config.validate()?;
    let teacher = match (config.kind.needs_teacher(), teacher) {
        (true, None) => return Err(Error::MissingTeacher(config.name.clone())),
        (true, Some(t)) => {
            if !t.same_shape(model) {
                return Err(Error::IncompatibleModels(format!(
                    "teacher {}x{}x{}, student {}x{}x{}",
                    t.vocab_size(),
                    t.hidden(),
                    t.out_dim(),
                    model.vocab_size(),
                    model.hidden(),
                    model.out_dim()
                )));
            }
            Some(t)
        }
        (false, _) => None,
    };
    let mismatch = || Error::DataKindMismatch {
        stage: config.name.clone(),
        data: data.describe(),
    };
    let mut stage = match (config.kind, data) {
        (StageKind::FinetuneTriples, StageData::Triples { triples, docs }) => {
            check_doc_refs(triples, docs)?;
            Stage::Finetune { triples, docs }
        }
        (StageKind::KdRelevance, StageData::Triples { triples, docs }) => {
            check_doc_refs(triples, docs)?;
            let teacher = teacher.expect("checked above");
            Stage::Relevance {
                triples,
                docs,
                teacher_scores: teacher_scores(teacher, triples, docs, config)?,
            }
        }
        (StageKind::KdRepresentation, StageData::Parallel(pairs)) => {
            let teacher = teacher.expect("checked above");
            let teacher_embeddings = pairs
                .iter()
                .map(|p| teacher.encode_truncated(&p.english, config.max_doc_tokens))
                .collect::<Result<Vec<_>>>()?;
            Stage::Representation {
                pairs,
                teacher_embeddings,
            }
        }
        _ => return Err(mismatch()),
    };

    let mut params = model.clone();
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyInput("stage data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.effective_batch()) {
            let mut grads = EncoderGrads::zeros(&params);
            loss_sum += stage.accumulate(&params, batch, config, &mut grads)? * batch.len() as f64;
            grads.apply_sgd(&mut params, config.learning_rate);
        }
        log.entries.push(LogEntry {
            stage: config.name.clone(),
            epoch,
            mean_loss: loss_sum / n as f64,
        });
    }
    if !params.embed_table().is_finite() || !params.projection().is_finite() {
        return Err(Error::NonFinite("parameters after training"));
    }
    Ok(params)
}

fn check_doc_refs(triples: &[Triple], docs: &[Vec<u32>]) -> Result<()> {
    for t in triples {
        for d in [t.positive, t.negative] {
            if d >= docs.len() {
                return Err(Error::UnknownDocument(format!("#{d}")));
            }
        }
    }
    Ok(())
}

fn teacher_scores(
    teacher: &EncoderParams,
    triples: &[Triple],
    docs: &[Vec<u32>],
    config: &StageConfig,
) -> Result<Vec<(f64, f64)>> {
    triples
        .iter()
        .map(|t| {
            let query = t
                .teacher_query
                .as_deref()
                .ok_or_else(|| Error::DataKindMismatch {
                    stage: config.name.clone(),
                    data: "triples without an English query",
                })?;
            let q = teacher.encode_truncated(query, config.max_query_tokens)?;
            let pos = teacher.encode_truncated(&docs[t.positive], config.max_doc_tokens)?;
            let neg = teacher.encode_truncated(&docs[t.negative], config.max_doc_tokens)?;
            Ok((maxsim_value(&q, &pos)?, maxsim_value(&q, &neg)?))
        })
        .collect()
}

enum Stage<'a> {
    Finetune {
        triples: &'a [Triple],
        docs: &'a [Vec<u32>],
    },
    Relevance {
        triples: &'a [Triple],
        docs: &'a [Vec<u32>],
        teacher_scores: Vec<(f64, f64)>,
    },
    Representation {
        pairs: &'a [ParallelText],
        teacher_embeddings: Vec<EmbeddingMatrix>,
    },
}

struct Encoded<'a> {
    query: (&'a [u32], EmbeddingMatrix),
    pos: (&'a [u32], EmbeddingMatrix),
    neg: (&'a [u32], EmbeddingMatrix),
}

fn encode_triple<'a>(
    params: &EncoderParams,
    t: &'a Triple,
    docs: &'a [Vec<u32>],
    config: &StageConfig,
) -> Result<Encoded<'a>> {
    let q = truncate(&t.query, config.max_query_tokens);
    let p = truncate(&docs[t.positive], config.max_doc_tokens);
    let n = truncate(&docs[t.negative], config.max_doc_tokens);
    Ok(Encoded {
        query: (q, params.encode(q)?),
        pos: (p, params.encode(p)?),
        neg: (n, params.encode(n)?),
    })
}

/// Backpropagates `up_pos · S(q, d+) + up_neg · S(q, d-)`.
fn backward_triple(
    params: &EncoderParams,
    enc: &Encoded<'_>,
    up_pos: f64,
    up_neg: f64,
    grads: &mut EncoderGrads,
) -> Result<()> {
    let (_, trace_pos) = maxsim_score(&enc.query.1, &enc.pos.1)?;
    let (_, trace_neg) = maxsim_score(&enc.query.1, &enc.neg.1)?;
    let (mut gq, gp) = maxsim_backward(&trace_pos, up_pos, &enc.query.1, &enc.pos.1)?;
    let (gq_neg, gn) = maxsim_backward(&trace_neg, up_neg, &enc.query.1, &enc.neg.1)?;
    for (a, b) in gq.as_mut_slice().iter_mut().zip(gq_neg.as_slice()) {
        *a += b;
    }
    params.encode_backward_into(enc.query.0, &gq, grads)?;
    params.encode_backward_into(enc.pos.0, &gp, grads)?;
    params.encode_backward_into(enc.neg.0, &gn, grads)?;
    Ok(())
}

impl Stage<'_> {
    /// Adds the gradient of the batch-mean loss to `grads` and returns that
    /// mean loss.
    fn accumulate(
        &mut self,
        params: &EncoderParams,
        batch: &[usize],
        config: &StageConfig,
        grads: &mut EncoderGrads,
    ) -> Result<f64> {
        let inv_n = 1.0 / batch.len() as f64;
        match self {
            Stage::Finetune { triples, docs } => {
                let mut loss = 0.0;
                for &i in batch {
                    let enc = encode_triple(params, &triples[i], docs, config)?;
                    let s_pos = maxsim_score(&enc.query.1, &enc.pos.1)?.0;
                    let s_neg = maxsim_score(&enc.query.1, &enc.neg.1)?.0;
                    let l = triple_loss(s_pos, s_neg)?;
                    loss += l.loss;
                    backward_triple(params, &enc, l.grad_pos * inv_n, l.grad_neg * inv_n, grads)?;
                }
                Ok(loss * inv_n)
            }
            Stage::Relevance {
                triples,
                docs,
                teacher_scores,
            } => {
                let mut encoded = Vec::with_capacity(batch.len());
                let mut student = Vec::with_capacity(batch.len());
                for &i in batch {
                    let enc = encode_triple(params, &triples[i], docs, config)?;
                    student.push((
                        maxsim_value(&enc.query.1, &enc.pos.1)?,
                        maxsim_value(&enc.query.1, &enc.neg.1)?,
                    ));
                    encoded.push(enc);
                }
                let kd = kd_relevance_loss(&KdRelevanceBatch {
                    teacher_scores: batch.iter().map(|&i| teacher_scores[i]).collect(),
                    student_scores: student,
                    tau: config.tau,
                    scaling: config.kl_scaling,
                })?;
                for (enc, &(g_pos, g_neg)) in encoded.iter().zip(&kd.grads) {
                    backward_triple(params, enc, g_pos, g_neg, grads)?;
                }
                Ok(kd.loss)
            }
            Stage::Representation {
                pairs,
                teacher_embeddings,
            } => {
                let mut loss = 0.0;
                for &i in batch {
                    let pair = &pairs[i];
                    let teacher = &teacher_embeddings[i];
                    let mut sides = vec![(PairKind::CrossLingual, &pair.foreign)];
                    if config.english_identity {
                        sides.push((PairKind::EnglishIdentity, &pair.english));
                    }
                    for (kind, tokens) in sides {
                        let tokens = truncate(tokens, config.max_doc_tokens);
                        let student = params.encode(tokens)?;
                        let (kd_batch, _) = make_repr_batch(kind, teacher, &student)?;
                        let mut out = kd_repr_loss(&kd_batch)?;
                        loss += out.loss;
                        out.grad_student.as_mut_slice().iter_mut().for_each(|g| *g *= inv_n);
                        params.encode_backward_into(tokens, &out.grad_student, grads)?;
                    }
                }
                Ok(loss * inv_n)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_docs() -> Vec<Vec<u32>> {
        vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![1, 9, 10, 2], vec![11, 12, 5, 13]]
    }

    fn toy_triples() -> Vec<Triple> {
        vec![
            Triple { query: vec![1, 3], teacher_query: Some(vec![1, 3]), positive: 0, negative: 1 },
            Triple { query: vec![6, 8], teacher_query: Some(vec![6, 8]), positive: 1, negative: 2 },
            Triple { query: vec![9, 10], teacher_query: Some(vec![9, 10]), positive: 2, negative: 3 },
        ]
    }

    fn config(kind: StageKind, lr: f64) -> StageConfig {
        StageConfig {
            learning_rate: lr,
            epochs: 2,
            batch_size: 2,
            accum_steps: 1,
            seed: 5,
            ..StageConfig::reference_defaults(kind)
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let model = EncoderParams::random(16, 6, 4, 1).unwrap();
        let docs = toy_docs();
        let triples = toy_triples();
        let out = run_stage(
            &model,
            None,
            &config(StageKind::FinetuneTriples, 0.0),
            StageData::Triples { triples: &triples, docs: &docs },
            &mut TrainingLog::default(),
        )
        .unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn one_step_lowers_triple_loss() {
        let model = EncoderParams::random(16, 6, 4, 2).unwrap();
        let docs = toy_docs();
        let triples = &toy_triples()[..1];
        let mut cfg = config(StageKind::FinetuneTriples, 0.05);
        cfg.epochs = 1;
        let loss_of = |p: &EncoderParams| {
            let q = p.encode(&triples[0].query).unwrap();
            let a = maxsim_value(&q, &p.encode(&docs[0]).unwrap()).unwrap();
            let b = maxsim_value(&q, &p.encode(&docs[1]).unwrap()).unwrap();
            triple_loss(crate::late_interaction::RelevanceScore(a), crate::late_interaction::RelevanceScore(b))
                .unwrap()
                .loss
        };
        let mut log = TrainingLog::default();
        let out = run_stage(&model, None, &cfg, StageData::Triples { triples, docs: &docs }, &mut log).unwrap();
        assert!(loss_of(&out) < loss_of(&model));
        assert!((log.entries[0].mean_loss - loss_of(&model)).abs() < 1e-12);
    }

    #[test]
    fn identical_student_and_teacher_do_not_move() {
        let model = EncoderParams::random(16, 6, 4, 3).unwrap();
        let docs = toy_docs();
        let triples = toy_triples();
        let out = run_stage(
            &model,
            Some(&model),
            &config(StageKind::KdRelevance, 0.5),
            StageData::Triples { triples: &triples, docs: &docs },
            &mut TrainingLog::default(),
        )
        .unwrap();
        for (a, b) in out.embed_table().as_slice().iter().zip(model.embed_table().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out.projection().as_slice().iter().zip(model.projection().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let model = EncoderParams::random(16, 6, 4, 4).unwrap();
        let docs = toy_docs();
        let triples = toy_triples();
        let run = || {
            run_stage(
                &model,
                None,
                &config(StageKind::FinetuneTriples, 0.1),
                StageData::Triples { triples: &triples, docs: &docs },
                &mut TrainingLog::default(),
            )
            .unwrap()
        };
        assert_eq!(run().fingerprint(), run().fingerprint());
    }

    #[test]
    fn kd_stages_require_teacher_and_matching_data() {
        let model = EncoderParams::random(16, 6, 4, 4).unwrap();
        let docs = toy_docs();
        let triples = toy_triples();
        let pairs = vec![ParallelText { english: vec![1, 2], foreign: vec![3, 4] }];
        let data = StageData::Triples { triples: &triples, docs: &docs };
        let mut log = TrainingLog::default();
        assert!(matches!(
            run_stage(&model, None, &config(StageKind::KdRelevance, 0.1), data, &mut log),
            Err(Error::MissingTeacher(_))
        ));
        assert!(matches!(
            run_stage(&model, Some(&model), &config(StageKind::KdRepresentation, 0.1), data, &mut log),
            Err(Error::DataKindMismatch { .. })
        ));
        assert!(matches!(
            run_stage(&model, None, &config(StageKind::FinetuneTriples, 0.1), StageData::Parallel(&pairs), &mut log),
            Err(Error::DataKindMismatch { .. })
        ));
        let no_english = vec![Triple { teacher_query: None, ..triples[0].clone() }];
        assert!(matches!(
            run_stage(
                &model,
                Some(&model),
                &config(StageKind::KdRelevance, 0.1),
                StageData::Triples { triples: &no_english, docs: &docs },
                &mut log
            ),
            Err(Error::DataKindMismatch { .. })
        ));
    }

    #[test]
    fn representation_stage_pulls_student_towards_teacher() {
        let teacher = EncoderParams::random(16, 6, 4, 7).unwrap();
        let student = EncoderParams::random(16, 6, 4, 8).unwrap();
        let pairs = vec![
            ParallelText { english: vec![1, 2, 3], foreign: vec![11, 12, 13] },
            ParallelText { english: vec![4, 5], foreign: vec![14, 15] },
        ];
        let mut cfg = config(StageKind::KdRepresentation, 0.5);
        cfg.epochs = 30;
        let mut log = TrainingLog::default();
        run_stage(&student, Some(&teacher), &cfg, StageData::Parallel(&pairs), &mut log).unwrap();
        let first = log.entries.first().unwrap().mean_loss;
        let last = log.entries.last().unwrap().mean_loss;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(log.to_string().lines().count(), 30);
        assert!(log.to_string().starts_with("kd_representation 1 "));
    }
}
