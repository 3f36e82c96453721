//! Stage scheduling, named checkpoints, and the five-system experiment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{resolve_triples, ParallelPair, TripleRecord};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::retrieval::{build_index, evaluate, format_report, DocumentRecord, EvalExample, QuerySide, RecallSummary};
use crate::synthetic::{SyntheticWorld, SyntheticWorldSpec};
use crate::trainer::{run_stage, ParallelText, StageConfig, StageData, StageKind, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// Which training set a stage reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetRef {
    TriplesEnglish,
    TriplesCrossLingual,
    Parallel,
}

impl DatasetRef {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRef::TriplesEnglish => "triples_en",
            DatasetRef::TriplesCrossLingual => "triples_xl",
            DatasetRef::Parallel => "parallel",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitSource {
    Random { seed: u64 },
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineStage {
    /// `config.name` doubles as the name of the checkpoint written after
    /// the stage.
    pub config: StageConfig,
    pub dataset: DatasetRef,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub name: String,
    /// Used by random initializations.
    pub shape: ModelShape,
    pub student: Option<InitSource>,
    pub teacher: Option<InitSource>,
    pub stages: Vec<PipelineStage>,
}

impl PipelineSpec {
    /// Name of the checkpoint holding a randomly initialized model.
    pub fn init_name(&self, role: Role) -> String {
        match role {
            Role::Student => format!("{}-init", self.name),
            Role::Teacher => format!("{}-teacher-init", self.name),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("pipeline `{}`: {m}", self.name)));
        let mut names = Vec::new();
        for stage in &self.stages {
            let c = &stage.config;
            c.validate()?;
            if c.kind.needs_teacher() {
                if stage.role != Role::Student {
                    return bad(format!("stage `{}` distills into the teacher", c.name));
                }
                if self.teacher.is_none() {
                    return Err(Error::MissingTeacher(c.name.clone()));
                }
            }
            let init = match stage.role {
                Role::Student => &self.student,
                Role::Teacher => &self.teacher,
            };
            if init.is_none() {
                return bad(format!("stage `{}` trains a model with no initialization", c.name));
            }
            let ok = match c.kind {
                StageKind::FinetuneTriples => stage.dataset != DatasetRef::Parallel,
                StageKind::KdRelevance => stage.dataset == DatasetRef::TriplesCrossLingual,
                StageKind::KdRepresentation => stage.dataset == DatasetRef::Parallel,
            };
            if !ok {
                return bad(format!(
                    "stage `{}` ({}) cannot read `{}`",
                    c.name,
                    c.kind.as_str(),
                    stage.dataset.as_str()
                ));
            }
            if names.contains(&c.name) || c.name.is_empty() {
                return bad(format!("stage name `{}` is empty or repeated", c.name));
            }
            names.push(c.name.clone());
        }
        Ok(())
    }
}

/// Training inputs shared by every pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Datasets<'a> {
    pub corpus: &'a [DocumentRecord],
    pub triples_english: &'a [TripleRecord],
    pub triples_cross_lingual: &'a [TripleRecord],
    pub parallel: &'a [ParallelPair],
}

impl<'a> Datasets<'a> {
    pub fn from_world(world: &'a SyntheticWorld) -> Self {
        Datasets {
            corpus: &world.corpus,
            triples_english: &world.triples_english,
            triples_cross_lingual: &world.triples_cross_lingual,
            parallel: &world.parallel,
        }
    }
}

/// Named checkpoints held in memory and, when a directory is set, mirrored
/// to `<dir>/<name>.ckpt`.
#[derive(Debug, Default)]
pub struct CheckpointStore {
    dir: Option<PathBuf>,
    items: BTreeMap<String, Checkpoint>,
}

impl CheckpointStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(dir: impl Into<PathBuf>) -> Self {
        CheckpointStore {
            dir: Some(dir.into()),
            items: BTreeMap::new(),
        }
    }

    pub fn path_of(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.ckpt"))
    }

    pub fn insert(&mut self, checkpoint: Checkpoint) -> Result<()> {
        if let Some(dir) = &self.dir {
            checkpoint.save(&Self::path_of(dir, &checkpoint.meta.name))?;
        }
        self.items.insert(checkpoint.meta.name.clone(), checkpoint);
        Ok(())
    }

    /// Looks in memory first, then on disk.
    pub fn get(&mut self, name: &str) -> Result<&Checkpoint> {
        if !self.items.contains_key(name) {
            let dir = self.dir.as_ref().ok_or_else(|| Error::UnknownCheckpoint(name.to_string()))?;
            let path = Self::path_of(dir, name);
            if !path.exists() {
                return Err(Error::UnknownCheckpoint(name.to_string()));
            }
            let loaded = Checkpoint::load(&path)?;
            self.items.insert(name.to_string(), loaded);
        }
        Ok(&self.items[name])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }
}

fn resolve_init(
    spec: &PipelineSpec,
    role: Role,
    source: &InitSource,
    store: &mut CheckpointStore,
    produced: &mut Vec<String>,
    provenance: &[String],
) -> Result<(EncoderParams, Vec<String>)> {
    match source {
        InitSource::Random { seed } => {
            let s = spec.shape;
            let params = EncoderParams::random(s.vocab_size, s.hidden, s.out_dim, *seed)?;
            let lineage = vec![format!("random(seed={seed})")];
            let name = spec.init_name(role);
            let mut checkpoint = Checkpoint::new(name.clone(), params.clone(), lineage.clone());
            checkpoint.meta.provenance = provenance.to_vec();
            store.insert(checkpoint)?;
            produced.push(name);
            Ok((params, lineage))
        }
        InitSource::Checkpoint(name) => {
            let c = store.get(name)?;
            Ok((c.params.clone(), c.meta.lineage.clone()))
        }
    }
}

/// Runs the stages in order, storing a checkpoint after each one, and
/// returns the names of every checkpoint written.
pub fn run_pipeline(
    spec: &PipelineSpec,
    data: Datasets<'_>,
    store: &mut CheckpointStore,
    log: &mut TrainingLog,
    provenance: &[String],
) -> Result<Vec<String>> {
    spec.validate()?;
    let mut produced = Vec::new();
    let mut student = match &spec.student {
        Some(src) => Some(resolve_init(spec, Role::Student, src, store, &mut produced, provenance)?),
        None => None,
    };
    let mut teacher = match &spec.teacher {
        Some(src) => Some(resolve_init(spec, Role::Teacher, src, store, &mut produced, provenance)?),
        None => None,
    };

    let mut resolved: BTreeMap<&'static str, (Vec<Vec<u32>>, Vec<crate::trainer::Triple>)> = BTreeMap::new();
    let mut parallel: Option<Vec<ParallelText>> = None;
    for stage in &spec.stages {
        let c = &stage.config;
        let stage_data = match stage.dataset {
            DatasetRef::Parallel => StageData::Parallel(
                parallel.get_or_insert_with(|| data.parallel.iter().map(ParallelPair::to_text).collect()),
            ),
            triples => {
                let key = triples.as_str();
                if !resolved.contains_key(key) {
                    let records = match triples {
                        DatasetRef::TriplesEnglish => data.triples_english,
                        _ => data.triples_cross_lingual,
                    };
                    resolved.insert(key, resolve_triples(records, data.corpus)?);
                }
                let (docs, triples) = &resolved[key];
                StageData::Triples { triples, docs }
            }
        };
        let frozen = teacher.as_ref().map(|(p, _)| p);
        let (model, lineage) = match stage.role {
            Role::Student => student.as_ref(),
            Role::Teacher => teacher.as_ref(),
        }
        .expect("validated");
        let trained = run_stage(
            model,
            if c.kind.needs_teacher() { frozen } else { None },
            c,
            stage_data,
            log,
        )?;
        let mut lineage = lineage.clone();
        lineage.push(format!("{}:{}", c.kind.as_str(), c.name));
        let mut checkpoint = Checkpoint::new(c.name.clone(), trained.clone(), lineage.clone());
        checkpoint.meta.provenance = provenance.to_vec();
        store.insert(checkpoint)?;
        produced.push(c.name.clone());
        let slot = match stage.role {
            Role::Student => &mut student,
            Role::Teacher => &mut teacher,
        };
        *slot = Some((trained, lineage));
    }
    Ok(produced)
}

/// Names of the five systems, in report order.
pub const TEACHER: &str = "teacher";
pub const BASELINE: &str = "baseline";
pub const KD_PC: &str = "kd_pc";
pub const KD_XOR: &str = "kd_xor";
pub const KD_FULL: &str = "kd_pc-kd_xor";

/// Every knob of the desk-scale experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: SyntheticWorldSpec,
    pub hidden: usize,
    pub out_dim: usize,
    pub model_seed: u64,
    /// Teacher: English triples.
    pub finetune_english: StageConfig,
    /// Baseline: cross-lingual triples, starting from the teacher.
    pub finetune_cross_lingual: StageConfig,
    pub kd_pc: StageConfig,
    pub kd_xor: StageConfig,
    pub budget: usize,
}

impl ExperimentConfig {
    /// Hyper-parameters retuned for the toy encoder; a few minutes on one
    /// core.
    pub fn desk_scale(seed: u64) -> Self {
        let world = SyntheticWorldSpec {
            seed,
            negatives_per_query: 10,
            ..SyntheticWorldSpec::default()
        };
        let stage = |kind: StageKind, name: &str, lr: f64, epochs: usize, offset: u64| StageConfig {
            name: name.to_string(),
            learning_rate: lr,
            epochs,
            batch_size: 16,
            accum_steps: 2,
            seed: seed.wrapping_add(offset),
            ..StageConfig::reference_defaults(kind)
        };
        ExperimentConfig {
            world,
            hidden: 32,
            out_dim: 16,
            model_seed: seed,
            finetune_english: stage(StageKind::FinetuneTriples, TEACHER, 0.5, 1, 1),
            finetune_cross_lingual: stage(StageKind::FinetuneTriples, BASELINE, 20.0, 5, 2),
            kd_pc: stage(StageKind::KdRepresentation, KD_PC, 400.0, 3, 3),
            kd_xor: stage(StageKind::KdRelevance, KD_XOR, 60.0, 5, 4),
            budget: crate::retrieval::DEFAULT_TOKEN_BUDGET,
        }
    }

    /// Full-scale stage hyper-parameters (learning rates, epochs, τ, batch
    /// 32 × 6, maximum lengths, D = 128) on the desk-scale world.
    pub fn reference_scale(seed: u64) -> Self {
        let desk = Self::desk_scale(seed);
        let stage = |kind: StageKind, from: &StageConfig| StageConfig {
            name: from.name.clone(),
            seed: from.seed,
            ..StageConfig::reference_defaults(kind)
        };
        ExperimentConfig {
            out_dim: crate::encoder::DEFAULT_OUT_DIM,
            hidden: 256,
            finetune_english: stage(StageKind::FinetuneTriples, &desk.finetune_english),
            finetune_cross_lingual: stage(StageKind::FinetuneTriples, &desk.finetune_cross_lingual),
            kd_pc: stage(StageKind::KdRepresentation, &desk.kd_pc),
            kd_xor: stage(StageKind::KdRelevance, &desk.kd_xor),
            ..desk
        }
    }

    /// Points every seed (world, model, stages) at `seed`, the same way
    /// [`ExperimentConfig::desk_scale`] derives them.
    pub fn reseed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.model_seed = seed;
        for (offset, stage) in [
            &mut self.finetune_english,
            &mut self.finetune_cross_lingual,
            &mut self.kd_pc,
            &mut self.kd_xor,
        ]
        .into_iter()
        .enumerate()
        {
            stage.seed = seed.wrapping_add(offset as u64 + 1);
        }
    }

    /// Applies `world.*`, `model.*`, `teacher.*`, `baseline.*`, `kd_pc.*`,
    /// `kd_xor.*` and `budget` keys.
    pub fn with_config(&self, config: &Config) -> Result<Self> {
        let mut world = Config::default();
        for (k, v) in config.iter() {
            if let Some(field) = k.strip_prefix("world.") {
                world.set(field, v);
            }
        }
        Ok(ExperimentConfig {
            world: self.world.with_config(&world)?,
            hidden: config.get_or("model.hidden", self.hidden)?,
            out_dim: config.get_or("model.out_dim", self.out_dim)?,
            model_seed: config.get_or("model.seed", self.model_seed)?,
            finetune_english: self.finetune_english.with_config(config, "teacher")?,
            finetune_cross_lingual: self.finetune_cross_lingual.with_config(config, "baseline")?,
            kd_pc: self.kd_pc.with_config(config, "kd_pc")?,
            kd_xor: self.kd_xor.with_config(config, "kd_xor")?,
            budget: config.get_or("budget", self.budget)?,
        })
    }

    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        for (k, v) in self.world.to_config().iter() {
            c.set(format!("world.{k}"), v);
        }
        c.set("model.hidden", self.hidden);
        c.set("model.out_dim", self.out_dim);
        c.set("model.seed", self.model_seed);
        self.finetune_english.write_config(&mut c, "teacher");
        self.finetune_cross_lingual.write_config(&mut c, "baseline");
        self.kd_pc.write_config(&mut c, "kd_pc");
        self.kd_xor.write_config(&mut c, "kd_xor");
        c.set("budget", self.budget);
        c
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab_size: self.world.vocab_size(),
            hidden: self.hidden,
            out_dim: self.out_dim,
        }
    }

    /// Teacher, baseline, and three distilled students. Each student starts
    /// from the baseline; the full system continues from `kd_pc`.
    pub fn pipelines(&self) -> Vec<PipelineSpec> {
        let shape = self.shape();
        let ckpt = |n: &str| Some(InitSource::Checkpoint(n.to_string()));
        let stage = |config: &StageConfig, name: &str, dataset, role| PipelineStage {
            config: StageConfig {
                name: name.to_string(),
                ..config.clone()
            },
            dataset,
            role,
        };
        let spec = |name: &str, student, teacher, stages| PipelineSpec {
            name: name.to_string(),
            shape,
            student,
            teacher,
            stages,
        };
        vec![
            spec(
                TEACHER,
                None,
                Some(InitSource::Random { seed: self.model_seed }),
                vec![stage(&self.finetune_english, TEACHER, DatasetRef::TriplesEnglish, Role::Teacher)],
            ),
            spec(
                BASELINE,
                ckpt(TEACHER),
                None,
                vec![stage(&self.finetune_cross_lingual, BASELINE, DatasetRef::TriplesCrossLingual, Role::Student)],
            ),
            spec(
                KD_PC,
                ckpt(BASELINE),
                ckpt(TEACHER),
                vec![stage(&self.kd_pc, KD_PC, DatasetRef::Parallel, Role::Student)],
            ),
            spec(
                KD_XOR,
                ckpt(BASELINE),
                ckpt(TEACHER),
                vec![stage(&self.kd_xor, KD_XOR, DatasetRef::TriplesCrossLingual, Role::Student)],
            ),
            spec(
                KD_FULL,
                ckpt(KD_PC),
                ckpt(TEACHER),
                vec![stage(&self.kd_xor, KD_FULL, DatasetRef::TriplesCrossLingual, Role::Student)],
            ),
        ]
    }
}

/// Recall of each system plus the fingerprints of the evaluated models.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<(String, RecallSummary)>,
    pub fingerprints: Vec<(String, String)>,
    pub budget: usize,
    pub log: TrainingLog,
}

impl ExperimentReport {
    pub fn recall(&self, system: &str) -> Option<f64> {
        self.rows.iter().find(|(s, _)| s == system).map(|(_, r)| r.percent())
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_report(&self.rows, self.budget))
    }
}

/// Recall of `params` on `examples`; `side` picks native or English
/// queries.
pub fn evaluate_checkpoint(
    params: &EncoderParams,
    corpus: &[DocumentRecord],
    examples: &[EvalExample],
    side: QuerySide,
    budget: usize,
    max_doc_tokens: usize,
    max_query_tokens: usize,
) -> Result<RecallSummary> {
    let index = build_index(corpus, params, max_doc_tokens)?;
    evaluate(&index.searcher(params)?, corpus, examples, side, budget, max_query_tokens)
}

/// Trains all five systems on `world` and evaluates them; the teacher reads
/// the English rendering of every query.
pub fn run_experiment(
    config: &ExperimentConfig,
    world: &SyntheticWorld,
    store: &mut CheckpointStore,
    provenance: &[String],
) -> Result<ExperimentReport> {
    let data = Datasets::from_world(world);
    let mut log = TrainingLog::default();
    for spec in config.pipelines() {
        run_pipeline(&spec, data, store, &mut log, provenance)?;
    }
    let mut rows = Vec::new();
    let mut fingerprints = Vec::new();
    for system in [TEACHER, BASELINE, KD_PC, KD_XOR, KD_FULL] {
        let side = if system == TEACHER {
            QuerySide::English
        } else {
            QuerySide::Native
        };
        let params = &store.get(system)?.params;
        let c = &config.kd_xor;
        let summary = evaluate_checkpoint(
            params,
            &world.corpus,
            &world.eval,
            side,
            config.budget,
            c.max_doc_tokens,
            c.max_query_tokens,
        )?;
        fingerprints.push((system.to_string(), params.fingerprint()));
        rows.push((system.to_string(), summary));
    }
    Ok(ExperimentReport {
        rows,
        fingerprints,
        budget: config.budget,
        log,
    })
}
