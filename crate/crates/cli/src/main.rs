//! `xlcolbert` command-line tool.
//!
//! Settings resolve as: command-line flag, then `--config` file, then the
//! built-in preset. Every artifact records the command line, the config
//! file and the effective seed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use xlcolbert::checkpoint::Checkpoint;
use xlcolbert::config::Config;
use xlcolbert::data::{self, ParallelPair, TripleRecord};
use xlcolbert::pipeline::{
    evaluate_checkpoint, run_experiment, run_pipeline, CheckpointStore, DatasetRef, Datasets, ExperimentConfig,
    InitSource, ModelShape, PipelineSpec, PipelineStage, Role,
};
use xlcolbert::retrieval::{build_index, format_report, DocumentRecord, EvalExample, QuerySide, RetrievalIndex};
use xlcolbert::synthetic::{self, gen_synthetic, SyntheticWorld, SyntheticWorldSpec};
use xlcolbert::trainer::{StageConfig, TrainingLog};
use xlcolbert::{greedy_align, EncoderParams};

#[derive(Parser)]
#[command(name = "xlcolbert", version, about = "Cross-lingual late-interaction retrieval with knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Toy-scale hyper-parameters tuned for the synthetic world.
    Desk,
    /// Full-scale learning rates, epochs, batch size and D = 128.
    Reference,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds the world, the initialization and every stage.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic bilingual world to `--out`.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random init, then fine-tuning on English triples.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tuning on cross-lingual triples, from `--checkpoint` or from
    /// scratch (English triples first).
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Representation distillation on parallel text.
    DistillPc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        distill: Distill,
    },
    /// Relevance-score distillation on cross-lingual triples.
    DistillXor {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        distill: Distill,
        /// Softmax temperature.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Encode the corpus of `--data` into an index file.
    Index {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed documents for one query.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Space-separated token ids.
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// R@kt table for one or more checkpoints.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// `name=path`; repeat for several systems.
        #[arg(long, required = true)]
        checkpoint: Vec<String>,
        /// Systems fed the English rendering of each query. Defaults to
        /// the one named `teacher`, if any.
        #[arg(long = "english-queries")]
        english_queries: Vec<String>,
        /// Token budget [default: 5000].
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the greedy alignment plan for one parallel pair.
    Align {
        /// Student model.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Teacher model; defaults to the student.
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
        /// English token ids, encoded by the teacher.
        #[arg(long)]
        english: String,
        /// Non-English token ids, encoded by the student.
        #[arg(long)]
        foreign: String,
    },
    /// Generate a world, train all five systems and print the table.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
    },
}

#[derive(Args)]
struct Distill {
    #[arg(long)]
    data: PathBuf,
    /// Student initialization.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frozen teacher.
    #[arg(long)]
    teacher_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Effective settings plus the provenance lines that describe them.
struct Resolved {
    config: ExperimentConfig,
    provenance: Vec<String>,
}

fn command_line() -> String {
    std::env::args()
        .map(|a| {
            if a.is_empty() || a.contains(char::is_whitespace) {
                format!("'{a}'")
            } else {
                a
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn resolve(common: &Common) -> Result<Resolved> {
    let preset = |seed| match common.preset {
        Preset::Desk => ExperimentConfig::desk_scale(seed),
        Preset::Reference => ExperimentConfig::reference_scale(seed),
    };
    let mut config = preset(0);
    if let Some(path) = &common.config {
        let file = Config::load(path)?;
        if let Some(seed) = file.get("seed") {
            let seed: u64 = seed.parse().with_context(|| format!("bad seed `{seed}` in {}", path.display()))?;
            config = preset(seed);
        }
        config = config.with_config(&file)?;
    }
    if let Some(seed) = common.seed {
        config.reseed(seed);
    }
    let provenance = vec![
        format!("command = {}", command_line()),
        format!(
            "config = {}",
            common.config.as_ref().map_or("none".to_string(), |p| p.display().to_string())
        ),
        format!("seed = {}", config.world.seed),
    ];
    Ok(Resolved { config, provenance })
}

fn load_tsv<T: data::TsvRecord>(dir: &Path, file: &str) -> Result<Vec<T>> {
    Ok(data::load(&dir.join(file))?.records)
}

/// Vocabulary sizes come from the world description stored with the data,
/// falling back to the resolved settings.
fn world_spec(dir: &Path, fallback: &SyntheticWorldSpec) -> Result<SyntheticWorldSpec> {
    let path = dir.join(synthetic::WORLD_FILE);
    if path.exists() {
        Ok(fallback.with_config(&Config::load(&path)?)?)
    } else {
        Ok(fallback.clone())
    }
}

struct Loaded {
    corpus: Vec<DocumentRecord>,
    triples_english: Vec<TripleRecord>,
    triples_cross_lingual: Vec<TripleRecord>,
    parallel: Vec<ParallelPair>,
}

impl Loaded {
    fn read(dir: &Path, needs: &[DatasetRef]) -> Result<Self> {
        let want = |d| needs.contains(&d);
        Ok(Loaded {
            corpus: load_tsv(dir, synthetic::CORPUS_FILE)?,
            triples_english: if want(DatasetRef::TriplesEnglish) {
                load_tsv(dir, synthetic::TRIPLES_ENGLISH_FILE)?
            } else {
                Vec::new()
            },
            triples_cross_lingual: if want(DatasetRef::TriplesCrossLingual) {
                load_tsv(dir, synthetic::TRIPLES_CROSS_LINGUAL_FILE)?
            } else {
                Vec::new()
            },
            parallel: if want(DatasetRef::Parallel) {
                load_tsv(dir, synthetic::PARALLEL_FILE)?
            } else {
                Vec::new()
            },
        })
    }

    fn datasets(&self) -> Datasets<'_> {
        Datasets {
            corpus: &self.corpus,
            triples_english: &self.triples_english,
            triples_cross_lingual: &self.triples_cross_lingual,
            parallel: &self.parallel,
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn stage(config: &StageConfig, dataset: DatasetRef, role: Role) -> PipelineStage {
    PipelineStage {
        config: config.clone(),
        dataset,
        role,
    }
}

/// Runs `spec` and writes its last checkpoint to `out`, with the training
/// log next to it.
fn train(
    spec: PipelineSpec,
    data_dir: &Path,
    preloaded: Vec<Checkpoint>,
    out: &Path,
    provenance: &[String],
) -> Result<()> {
    let needs: Vec<DatasetRef> = spec.stages.iter().map(|s| s.dataset).collect();
    let loaded = Loaded::read(data_dir, &needs)?;
    let mut store = CheckpointStore::in_memory();
    for c in preloaded {
        store.insert(c)?;
    }
    let mut log = TrainingLog::default();
    let produced = run_pipeline(&spec, loaded.datasets(), &mut store, &mut log, provenance)?;
    let last = produced.last().context("pipeline produced no checkpoint")?;
    store.get(last)?.save(out)?;
    let log_path = out.with_extension("log");
    fs::write(&log_path, log.to_string()).with_context(|| format!("writing {}", log_path.display()))?;
    print!("{log}");
    println!("wrote {} ({})", out.display(), store.get(last)?.fingerprint());
    Ok(())
}

fn shape(config: &ExperimentConfig, data: &Path) -> Result<ModelShape> {
    let world = world_spec(data, &config.world)?;
    Ok(ModelShape {
        vocab_size: world.vocab_size(),
        hidden: config.hidden,
        out_dim: config.out_dim,
    })
}

fn named(mut c: Checkpoint, name: &str) -> Checkpoint {
    c.meta.name = name.to_string();
    c
}

fn parse_tokens(s: &str, flag: &str) -> Result<Vec<u32>> {
    data::parse_tokens(s.trim()).map_err(|e| anyhow::anyhow!("--{flag}: {e}"))
}

fn distill(
    common: &Common,
    args: &Distill,
    pick: impl Fn(&ExperimentConfig) -> StageConfig,
    dataset: DatasetRef,
) -> Result<()> {
    let r = resolve(common)?;
    let student = named(load_checkpoint(&args.checkpoint)?, "student-init");
    let teacher = named(load_checkpoint(&args.teacher_checkpoint)?, "teacher");
    if !student.params.same_shape(&teacher.params) {
        bail!(
            "incompatible checkpoints: student {} and teacher {} have different shapes",
            args.checkpoint.display(),
            args.teacher_checkpoint.display()
        );
    }
    let spec = PipelineSpec {
        name: "distill".into(),
        shape: shape(&r.config, &args.data)?,
        student: Some(InitSource::Checkpoint("student-init".into())),
        teacher: Some(InitSource::Checkpoint("teacher".into())),
        stages: vec![stage(&pick(&r.config), dataset, Role::Student)],
    };
    train(spec, &args.data, vec![student, teacher], &args.out, &r.provenance)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic { common, out } => {
            let r = resolve(&common)?;
            let world = gen_synthetic(&r.config.world)?;
            world.write(&out, &r.provenance)?;
            println!(
                "wrote {} documents, {} + {} triples, {} parallel pairs, {} eval queries to {}",
                world.corpus.len(),
                world.triples_english.len(),
                world.triples_cross_lingual.len(),
                world.parallel.len(),
                world.eval.len(),
                out.display()
            );
        }
        Command::TrainTeacher { common, data, out } => {
            let r = resolve(&common)?;
            let spec = PipelineSpec {
                name: "teacher".into(),
                shape: shape(&r.config, &data)?,
                student: None,
                teacher: Some(InitSource::Random {
                    seed: r.config.model_seed,
                }),
                stages: vec![stage(&r.config.finetune_english, DatasetRef::TriplesEnglish, Role::Teacher)],
            };
            train(spec, &data, vec![], &out, &r.provenance)?;
        }
        Command::TrainBaseline {
            common,
            data,
            out,
            checkpoint,
        } => {
            let r = resolve(&common)?;
            let mut stages = Vec::new();
            let (init, preloaded) = match checkpoint {
                Some(path) => (
                    InitSource::Checkpoint("init".into()),
                    vec![named(load_checkpoint(&path)?, "init")],
                ),
                None => {
                    let english = StageConfig {
                        name: "finetune_english".into(),
                        ..r.config.finetune_english.clone()
                    };
                    stages.push(stage(&english, DatasetRef::TriplesEnglish, Role::Student));
                    (
                        InitSource::Random {
                            seed: r.config.model_seed,
                        },
                        vec![],
                    )
                }
            };
            stages.push(stage(&r.config.finetune_cross_lingual, DatasetRef::TriplesCrossLingual, Role::Student));
            let spec = PipelineSpec {
                name: "baseline".into(),
                shape: shape(&r.config, &data)?,
                student: Some(init),
                teacher: None,
                stages,
            };
            train(spec, &data, preloaded, &out, &r.provenance)?;
        }
        Command::DistillPc { common, distill: args } => {
            distill(&common, &args, |c| c.kd_pc.clone(), DatasetRef::Parallel)?;
        }
        Command::DistillXor {
            common,
            distill: args,
            tau,
        } => {
            distill(
                &common,
                &args,
                |c| StageConfig {
                    tau: tau.unwrap_or(c.kd_xor.tau),
                    ..c.kd_xor.clone()
                },
                DatasetRef::TriplesCrossLingual,
            )?;
        }
        Command::Index {
            common,
            data,
            checkpoint,
            out,
        } => {
            let r = resolve(&common)?;
            let corpus: Vec<DocumentRecord> = load_tsv(&data, synthetic::CORPUS_FILE)?;
            let model = load_checkpoint(&checkpoint)?;
            let mut index = build_index(&corpus, &model.params, r.config.kd_xor.max_doc_tokens)?;
            index.provenance = r.provenance.clone();
            index.provenance.push(format!("checkpoint = {}", checkpoint.display()));
            index.save(&out)?;
            println!("indexed {} documents into {} ({})", index.len(), out.display(), index.fingerprint());
        }
        Command::Search {
            common,
            index,
            checkpoint,
            query,
            k,
        } => {
            let r = resolve(&common)?;
            let index = RetrievalIndex::load(&index)?;
            let model = load_checkpoint(&checkpoint)?;
            let tokens = parse_tokens(&query, "query")?;
            let hits = index.searcher(&model.params)?.search(&tokens, k, r.config.kd_xor.max_query_tokens)?;
            println!("rank\tdoc_id\tscore");
            for (rank, hit) in hits.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, hit.doc_id, hit.score);
            }
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            english_queries,
            budget,
            out,
        } => {
            let r = resolve(&common)?;
            let budget = budget.unwrap_or(r.config.budget);
            let corpus: Vec<DocumentRecord> = load_tsv(&data, synthetic::CORPUS_FILE)?;
            let eval: Vec<EvalExample> = load_tsv(&data, synthetic::EVAL_FILE)?;
            let mut rows = Vec::new();
            for entry in &checkpoint {
                let (name, path) = entry
                    .split_once('=')
                    .with_context(|| format!("--checkpoint expects name=path, got `{entry}`"))?;
                let model = load_checkpoint(Path::new(path))?;
                let english = if english_queries.is_empty() {
                    name == "teacher"
                } else {
                    english_queries.iter().any(|n| n == name)
                };
                let side = if english { QuerySide::English } else { QuerySide::Native };
                let c = &r.config.kd_xor;
                let summary = evaluate_checkpoint(
                    &model.params,
                    &corpus,
                    &eval,
                    side,
                    budget,
                    c.max_doc_tokens,
                    c.max_query_tokens,
                )?;
                rows.push((name.to_string(), summary));
            }
            let mut report: String = r.provenance.iter().map(|l| format!("# {l}\n")).collect();
            report.push_str(&format_report(&rows, budget));
            print!("{report}");
            if let Some(out) = out {
                fs::write(&out, &report).with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Align {
            checkpoint,
            teacher_checkpoint,
            english,
            foreign,
        } => {
            let student = load_checkpoint(&checkpoint)?.params;
            let teacher: EncoderParams = match &teacher_checkpoint {
                Some(p) => load_checkpoint(p)?.params,
                None => student.clone(),
            };
            let v_t = teacher.encode(&parse_tokens(&english, "english")?)?;
            let v_s = student.encode(&parse_tokens(&foreign, "foreign")?)?;
            let plan = greedy_align(&v_t, &v_s)?;
            print!("{plan}");
            let perm: Vec<String> = plan
                .permutation()
                .iter()
                .take(plan.student_len())
                .map(|p| p.map_or("-".to_string(), |t| t.to_string()))
                .collect();
            println!("permutation: {}", perm.join(" "));
        }
        Command::Experiment {
            common,
            out,
            budget,
            tau,
        } => {
            let r = resolve(&common)?;
            let mut config = r.config;
            if let Some(b) = budget {
                config.budget = b;
            }
            if let Some(t) = tau {
                config.kd_xor.tau = t;
            }
            let world: SyntheticWorld = gen_synthetic(&config.world)?;
            world.write(&out.join("data"), &r.provenance)?;
            let settings = out.join("settings.conf");
            fs::write(&settings, config.to_config().to_string())
                .with_context(|| format!("writing {}", settings.display()))?;
            let mut store = CheckpointStore::persistent(out.join("checkpoints"));
            let report = run_experiment(&config, &world, &mut store, &r.provenance)?;
            let mut text: String = r.provenance.iter().map(|l| format!("# {l}\n")).collect();
            text.push_str(&report.to_string());
            fs::write(out.join("report.txt"), &text).context("writing report")?;
            fs::write(out.join("training.log"), report.log.to_string()).context("writing training log")?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
