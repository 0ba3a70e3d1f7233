//! Noisy student training: stage functions and the generation loop.

mod generation;
mod stages;

pub use generation::{
    balance_seed, balance_stage, filter_stage, generation_input_hash, generation_metrics,
    load_model, nst_run, pseudo_label_stage, pseudo_pairs, read_manifests, run_generation,
    train_candidate, weights_for, CandidateRecord, EvalReport, GenerationManifest,
    GenerationStatus, MetricRecord, WeightRecord, KEPT_FILE, MANIFEST_FILE, METRICS_FILE,
    PLOT_FILE, PSEUDO_FILE, WEIGHTS_FILE,
};

pub use stages::{
    balance, kl_to_counts, lm_filter, mix_batches, pseudo_label, BalanceConfig, BalanceResult,
    FilterResult, MixItem, MixMode, MixPolicy, MixRatio, MixStream, PseudoLabels,
};
