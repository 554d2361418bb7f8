//! Automatic LoRA layer selection for chain models.
//!
//! The crate trains a small gated low-rank adapter stack where every layer's
//! adapter is multiplied by a softmax-relaxed gate. Alternating optimization
//! of adapter weights (on training batches) and gate logits (on validation
//! batches) drives unhelpful layers' logits below zero; the positive logits
//! name the layers worth adapting, and a second training pass fine-tunes
//! only those. Smoothness probes estimate per-layer gradient Lipschitz
//! constants and compare them against operator-norm bounds, which is the
//! quantity that explains why some layers are easier to adapt than others.

pub mod bilevel;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gating;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod smoothness;
pub mod tensor;

pub use bilevel::{
    run_selection, sample_batch, BatchSampler, EarlyStop, RunConfig, TrajectoryLog, TrajectoryRow,
};
pub use config::{
    CsvTask, ExperimentConfig, FinetuneSection, ModelSection, OutputSection, RunSection,
    SweepSection, TaskSection,
};
pub use data::{
    export_csv, generate_planted, ingest_csv, planted_base_model, IngestSchema, PlantedTask,
    TargetKind, TaskKind, TaskKindName,
};
pub use error::{Error, Result};
pub use finetune::{
    accuracy, evaluate_carry, finetune_selected, finetune_selected_logged, oracle_from_csv,
    oracle_rank, oracle_to_csv, random_k_baseline, subset_oracle, EvalReport, FinetuneConfig,
    FinetuneLog, LossKind, OracleEntry,
};
pub use gating::{
    grad_alpha, relax, relax_jacobian, select, sgd_alpha_step, AlphaVector, SelectionResult,
    SelectionRule,
};
pub use model::{
    freeze_unselected, load_checkpoint, reinit_adapters, save_checkpoint, Activation, Adapter,
    Batch, GatedLoraModel, GradBundle, LayerSpec, Targets,
};
pub use pipeline::{
    aggregate_runs, discover_run_dirs, prepare_task, run_finetune_cmd, run_oracle_cmd,
    run_pipeline, run_probe_cmd, run_seed, run_select_cmd, run_sweep_cmd, with_jobs,
    write_seed_dir, PipelineOutcome, PreparedTask, SeedArtifacts, SweepGrid,
};
pub use rng::Rng;
pub use smoothness::{
    beta_quotient_fn, bound_from_lambdas, chain_lambdas, depth_sweep, estimate_beta,
    estimate_beta_chain, layer_norm, lora_bound, lora_bound_with, mean_row_norm_sq,
    per_layer_report, prop2_bound, random_orthogonal, spectral_norm, to_dense_chain, BetaReport,
    BetaRow, ChainFamily, DenseChain, LoraBound, NormKind, Perturbation, ProbeMode, ProbeTarget,
    SmoothnessProbeConfig,
};
pub use tensor::{cross_entropy, cross_entropy_grad, grad_check, mse_loss, mse_loss_grad, Tensor};
