//! Experiment configuration, dataset generation, the end-to-end pipeline and result emission.

mod config;
mod dataset;
mod eval;
mod pipeline;

pub use config::{
    DataConfig, DomainConfig, ExperimentConfig, FtlSettings, MulticosetConfig, NetworkConfig,
    PruningConfig, SnrRange, Stages, TransportKind,
};
pub use dataset::{
    build_dataset, build_spectra, config_hash, decode_dataset, derive_seed, draw_scenario,
    encode_dataset, load_dataset, save_dataset, seeded_rng, DatasetMeta, DatasetRequest, SnrDraw,
};
pub use eval::{
    all_zero_accuracy, emit_results, emit_summary, model_accuracy, model_predictions,
    predict_occupancy, prediction_accuracy, read_results, somp_accuracy, summarize, ResultSummary,
    SchemeStanding, SweepRow,
};
pub use pipeline::{
    dataset, federate, federate_users, front_end, ftl_config, prune_on, prune_source, rank_schemes,
    run_pipeline, split_request, su_id, sweep, tl_scheme, train_domain, train_on, PipelineFacts,
    PipelineModels, PipelineReport, Split, Stage, StageError, SCHEME_FTL, SCHEME_RT, SCHEME_SOMP,
    SCHEME_ZERO_SHOT,
};
