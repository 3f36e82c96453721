//! Cross-lingual late-interaction retrieval with knowledge distillation.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distillation;
pub mod encoder;
pub mod error;
pub mod late_interaction;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use alignment::{apply_alignment, greedy_align, reference_align, AlignedPair, AlignmentPlan};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::Config;
pub use data::{ParallelPair, TripleRecord, TsvFile, TsvRecord};
pub use distillation::{kd_relevance_loss, kd_repr_loss, KdRelevanceBatch, KdReprBatch, KlScaling, PairKind};
pub use encoder::{EncoderGrads, EncoderParams};
pub use error::{Error, Result};
pub use late_interaction::{maxsim_score, triple_loss, MaxSimTrace, RelevanceScore};
pub use pipeline::{
    run_experiment, run_pipeline, CheckpointStore, DatasetRef, ExperimentConfig, InitSource, PipelineSpec, Role,
};
pub use retrieval::{
    build_index, recall_at_tokens, search, DocumentRecord, EvalExample, QuerySide, RecallSummary, RetrievalIndex,
    SearchHit,
};
pub use synthetic::{gen_synthetic, SyntheticWorld, SyntheticWorldSpec, TokenMapping};
pub use tensor::{EmbeddingMatrix, Matrix};
pub use trainer::{run_stage, StageConfig, StageKind, TrainingLog};
