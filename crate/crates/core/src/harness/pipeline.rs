//! End-to-end experiment: offline training on the source domain, pruning,
//! federated adaptation, the baselines and an SNR sweep over every target.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{DomainConfig, ExperimentConfig, TransportKind};
use super::dataset::{
    build_dataset, build_spectra, derive_seed, seeded_rng, DatasetRequest, SnrDraw,
};
use super::eval::{
    all_zero_accuracy, emit_results, emit_summary, model_accuracy, somp_accuracy, summarize,
    ResultSummary, SweepRow,
};
use crate::error::{Error, Result};
use crate::federation::{
    run_ftl, FtlConfig, FtlReport, InProcessTransport, LocalConfig, SecondaryUser, SocketTransport,
};
use crate::multicoset::FrontEnd;
use crate::pruning::{prune_and_fine_tune, PruneOutcome};
use crate::tensornet::checkpoint::save_checkpoint;
use crate::tensornet::{init_weights, train_from, LabeledDataset, ModelWeights, TrainReport};

pub const SCHEME_FTL: &str = "FTL-WSSNet";
pub const SCHEME_RT: &str = "RT WSSNet";
pub const SCHEME_SOMP: &str = "SA SOMP";
pub const SCHEME_ZERO_SHOT: &str = "FTL-WSSNet zero-shot";

pub fn tl_scheme(config: &ExperimentConfig) -> String {
    format!("TL S->{}", config.ftl.tl_domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Setup,
    OfflineTraining,
    Pruning,
    Federation,
    TransferLearning,
    ZeroShot,
    RegularTraining,
    Evaluation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Purpose of a generated dataset; each purpose gets its own seed stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Adaptation,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Adaptation => "adapt",
            Split::Test => "test",
        }
    }
}

/// Generation request for `split` of `domain`. Test sets use a fixed SNR;
/// every other split draws the SNR per sample from the training range.
pub fn split_request(
    config: &ExperimentConfig,
    domain: &DomainConfig,
    split: Split,
    snr_db: Option<f64>,
) -> DatasetRequest {
    let count = match split {
        Split::Train => config.data.train_samples,
        Split::Validation => config.data.val_samples,
        Split::Adaptation => config.ftl.samples_per_su,
        Split::Test => config.data.test_samples,
    };
    let snr = match (split, snr_db) {
        (_, Some(db)) => SnrDraw::Fixed(db),
        _ => SnrDraw::Uniform(config.data.train_snr),
    };
    let index = snr_db.map_or(u64::MAX, f64::to_bits);
    DatasetRequest {
        domain: domain.clone(),
        count,
        snr,
        seed: derive_seed(
            config.seed,
            &format!("{}/{}", split.tag(), domain.id),
            index,
        ),
    }
}

pub fn front_end(config: &ExperimentConfig) -> Result<FrontEnd> {
    FrontEnd::new(config.coset_pattern()?, config.multicoset.snapshots)
}

pub fn dataset(
    config: &ExperimentConfig,
    fe: &FrontEnd,
    domain: &DomainConfig,
    split: Split,
    snr_db: Option<f64>,
) -> Result<LabeledDataset> {
    build_dataset(config, fe, &split_request(config, domain, split, snr_db))
}

/// Trains a freshly initialised WSSNet on `domain` with early stopping.
pub fn train_domain(
    config: &ExperimentConfig,
    fe: &FrontEnd,
    domain: &DomainConfig,
) -> Result<TrainReport<f32>> {
    let train = dataset(config, fe, domain, Split::Train, None)?;
    let val = dataset(config, fe, domain, Split::Validation, None)?;
    train_on(config, &domain.id, &train, &val)
}

pub fn train_on(
    config: &ExperimentConfig,
    domain_id: &str,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<TrainReport<f32>> {
    let init = init_weights(
        &config.network_spec(),
        &mut seeded_rng(config.seed, "init", 0),
    )?;
    let mut rng = seeded_rng(config.seed, &format!("train-order/{domain_id}"), 0);
    let report = train_from(init, train, val, &config.training, &mut rng)?;
    info!(
        "trained on {domain_id}: best epoch {} of {}, initial val loss {:.4}",
        report.best_epoch,
        report.history.len(),
        report.initial_val_loss
    );
    Ok(report)
}

/// Prunes `theta_3` with the configured ratio and fine-tunes on the source domain.
pub fn prune_source(
    config: &ExperimentConfig,
    fe: &FrontEnd,
    model: &ModelWeights<f32>,
) -> Result<(ModelWeights<f32>, PruneOutcome)> {
    let train = dataset(config, fe, &config.source, Split::Train, None)?;
    let val = dataset(config, fe, &config.source, Split::Validation, None)?;
    prune_on(config, model, &train, &val)
}

pub fn prune_on(
    config: &ExperimentConfig,
    model: &ModelWeights<f32>,
    train: &LabeledDataset,
    val: &LabeledDataset,
) -> Result<(ModelWeights<f32>, PruneOutcome)> {
    let mut w = model.clone();
    let mut rng = seeded_rng(config.seed, "fine-tune", 0);
    let outcome = prune_and_fine_tune(
        &mut w,
        config.pruning.kappa,
        train,
        val,
        &config.pruning.fine_tune,
        &mut rng,
    )?;
    Ok((w, outcome))
}

pub fn ftl_config(config: &ExperimentConfig) -> FtlConfig {
    let f = &config.ftl;
    FtlConfig {
        rounds: f.rounds,
        local: LocalConfig {
            epochs: f.local_epochs,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            seed: derive_seed(config.seed, "ftl", 0),
        },
        server_learning_rate: f.server_learning_rate,
        timeout: Duration::from_millis(f.timeout_ms),
        retries: f.retries,
    }
}

/// SU id of a target domain: its position in `config.targets`.
pub fn su_id(config: &ExperimentConfig, domain_id: &str) -> Result<u32> {
    config
        .targets
        .iter()
        .position(|t| t.id == domain_id)
        .map(|i| i as u32)
        .ok_or_else(|| Error::Config(format!("{domain_id} is not a target domain")))
}

/// Federated adaptation with one SU per listed target domain.
pub fn federate(
    config: &ExperimentConfig,
    fe: &FrontEnd,
    init: &ModelWeights<f32>,
    participants: &[&DomainConfig],
) -> Result<FtlReport> {
    let users = participants
        .iter()
        .map(|d| {
            Ok(SecondaryUser {
                id: su_id(config, &d.id)?,
                data: dataset(config, fe, d, Split::Adaptation, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    federate_users(config, init, users)
}

pub fn federate_users(
    config: &ExperimentConfig,
    init: &ModelWeights<f32>,
    users: Vec<SecondaryUser>,
) -> Result<FtlReport> {
    let cfg = ftl_config(config);
    match config.ftl.transport {
        TransportKind::InProcess => run_ftl(
            &cfg,
            init,
            &mut InProcessTransport::spawn(users, cfg.local)?,
        ),
        TransportKind::Socket => run_ftl(
            &cfg,
            init,
            &mut SocketTransport::spawn_local(users, cfg.local)?,
        ),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineModels {
    pub source: ModelWeights<f32>,
    pub pruned: ModelWeights<f32>,
    pub ftl: Option<ModelWeights<f32>>,
    pub tl: Option<ModelWeights<f32>>,
    pub zero_shot: Option<ModelWeights<f32>>,
    pub rt: BTreeMap<String, ModelWeights<f32>>,
}

/// Scalar facts about a run, written to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineFacts {
    pub prune: PruneOutcome,
    /// Source-domain accuracy at the summary SNR before pruning.
    pub source_acc_unpruned: f64,
    /// Source-domain accuracy at the summary SNR after pruning and fine-tuning.
    pub source_acc_pruned: f64,
    /// All-zero predictor accuracy per domain on the summary-SNR test sets.
    pub all_zero: BTreeMap<String, f64>,
    pub zero_shot_domain: Option<String>,
    pub stage_seconds: Vec<(Stage, f64)>,
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub rows: Vec<SweepRow>,
    pub summary: ResultSummary,
    pub facts: PipelineFacts,
    pub models: PipelineModels,
}

impl PipelineReport {
    pub fn accuracy(&self, domain: &str, scheme: &str, snr_db: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.domain == domain && r.scheme == scheme && r.snr_db == snr_db)
            .map(|r| r.p_acc)
    }
}

struct Clock {
    start: Instant,
    log: Vec<(Stage, f64)>,
}

impl Clock {
    fn lap(&mut self, stage: Stage) {
        let secs = self.start.elapsed().as_secs_f64();
        info!("stage {stage} finished in {secs:.1}s");
        self.log.push((stage, secs));
        self.start = Instant::now();
    }
}

/// Accuracy of every scheme on every target domain over the SNR grid.
/// `schemes` entries are `(name, model, only_on_domain)`; `test_set`
/// supplies the feature dataset for a domain and SNR.
pub fn sweep(
    config: &ExperimentConfig,
    fe: &FrontEnd,
    schemes: &[(String, &ModelWeights<f32>, Option<&str>)],
    rt: &BTreeMap<String, ModelWeights<f32>>,
    mut test_set: impl FnMut(&DomainConfig, f64) -> Result<LabeledDataset>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for d in &config.targets {
        for &snr in &config.snr_grid_db {
            let test = test_set(d, snr)?;
            let mut push = |scheme: &str, p_acc: f64| {
                rows.push(SweepRow {
                    domain: d.id.clone(),
                    scheme: scheme.to_string(),
                    snr_db: snr,
                    p_acc,
                    n_test: test.len(),
                })
            };
            for (name, w, only) in schemes {
                if only.is_none_or(|o| o == d.id) {
                    push(name, model_accuracy(*w, &test, config.threshold)?);
                }
            }
            if let Some(w) = rt.get(&d.id) {
                push(SCHEME_RT, model_accuracy(w, &test, config.threshold)?);
            }
            if config.stages.somp {
                let spectra = build_spectra(
                    config,
                    fe,
                    &split_request(config, d, Split::Test, Some(snr)),
                )?;
                push(SCHEME_SOMP, somp_accuracy(fe.measurement(), &spectra)?);
            }
        }
    }
    Ok(rows)
}

/// Per-domain ranking at the summary SNR; the zero-shot rows are not ranked.
pub fn rank_schemes(config: &ExperimentConfig, rows: &[SweepRow]) -> ResultSummary {
    let ranked: Vec<SweepRow> = rows
        .iter()
        .filter(|r| r.scheme != SCHEME_ZERO_SHOT)
        .cloned()
        .collect();
    summarize(&ranked, config.summary_snr_db)
}

/// Runs every enabled stage. With `out_dir`, writes `results.csv`,
/// `summary.json`, `report.json`, `config.json` and the model checkpoints.
pub fn run_pipeline(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> std::result::Result<PipelineReport, StageError> {
    config.validate().at(Stage::Setup)?;
    let mut clock = Clock {
        start: Instant::now(),
        log: Vec::new(),
    };
    let fe = front_end(config).at(Stage::Setup)?;
    clock.lap(Stage::Setup);

    let source = train_domain(config, &fe, &config.source)
        .at(Stage::OfflineTraining)?
        .weights;
    clock.lap(Stage::OfflineTraining);

    let (pruned, prune) = prune_source(config, &fe, &source).at(Stage::Pruning)?;
    let source_test = dataset(
        config,
        &fe,
        &config.source,
        Split::Test,
        Some(config.summary_snr_db),
    )
    .at(Stage::Pruning)?;
    let source_acc_unpruned =
        model_accuracy(&source, &source_test, config.threshold).at(Stage::Pruning)?;
    let source_acc_pruned =
        model_accuracy(&pruned, &source_test, config.threshold).at(Stage::Pruning)?;
    info!(
        "pruned {} of {} hidden weights; source accuracy {source_acc_unpruned:.4} -> {source_acc_pruned:.4}",
        prune.report.zeroed_count, prune.report.total_count
    );
    clock.lap(Stage::Pruning);

    let targets: Vec<&DomainConfig> = config.targets.iter().collect();
    let ftl = if config.stages.ftl {
        let r = federate(config, &fe, &pruned, &targets).at(Stage::Federation)?;
        clock.lap(Stage::Federation);
        Some(r.weights)
    } else {
        None
    };

    let tl = if config.stages.tl {
        let d = config
            .domain(&config.ftl.tl_domain)
            .at(Stage::TransferLearning)?;
        let r = federate(config, &fe, &pruned, &[d]).at(Stage::TransferLearning)?;
        clock.lap(Stage::TransferLearning);
        Some(r.weights)
    } else {
        None
    };

    let zero_shot_domain = config
        .ftl
        .zero_shot_exclude
        .clone()
        .filter(|_| config.stages.ftl);
    let zero_shot = match &zero_shot_domain {
        Some(excluded) => {
            let rest: Vec<&DomainConfig> = targets
                .iter()
                .copied()
                .filter(|d| &d.id != excluded)
                .collect();
            let r = federate(config, &fe, &pruned, &rest).at(Stage::ZeroShot)?;
            clock.lap(Stage::ZeroShot);
            Some(r.weights)
        }
        None => None,
    };

    let mut rt = BTreeMap::new();
    if config.stages.rt {
        for d in &config.targets {
            let r = train_domain(config, &fe, d).at(Stage::RegularTraining)?;
            rt.insert(d.id.clone(), r.weights);
        }
        clock.lap(Stage::RegularTraining);
    }

    let tl_name = tl_scheme(config);
    let mut schemes: Vec<(String, &ModelWeights<f32>, Option<&str>)> = Vec::new();
    if let Some(w) = &ftl {
        schemes.push((SCHEME_FTL.to_string(), w, None));
    }
    if let Some(w) = &tl {
        schemes.push((tl_name.clone(), w, None));
    }
    if let (Some(w), Some(d)) = (&zero_shot, &zero_shot_domain) {
        schemes.push((SCHEME_ZERO_SHOT.to_string(), w, Some(d.as_str())));
    }
    let rows = sweep(config, &fe, &schemes, &rt, |d, snr| {
        dataset(config, &fe, d, Split::Test, Some(snr))
    })
    .at(Stage::Evaluation)?;
    let summary = rank_schemes(config, &rows);
    let mut all_zero = BTreeMap::new();
    for d in config.domains() {
        let test = dataset(config, &fe, d, Split::Test, Some(config.summary_snr_db))
            .at(Stage::Evaluation)?;
        let labels: Vec<_> = test.labels().cloned().collect();
        all_zero.insert(
            d.id.clone(),
            all_zero_accuracy(&labels).at(Stage::Evaluation)?,
        );
    }
    clock.lap(Stage::Evaluation);

    let mut report = PipelineReport {
        rows,
        summary,
        facts: PipelineFacts {
            prune,
            source_acc_unpruned,
            source_acc_pruned,
            all_zero,
            zero_shot_domain,
            stage_seconds: Vec::new(),
        },
        models: PipelineModels {
            source,
            pruned,
            ftl,
            tl,
            zero_shot,
            rt,
        },
    };
    if let Some(dir) = out_dir {
        write_artifacts(config, &report, dir).at(Stage::Output)?;
        clock.lap(Stage::Output);
    }
    report.facts.stage_seconds = clock.log;
    if let Some(dir) = out_dir {
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report.facts)
                .map_err(Error::from)
                .at(Stage::Output)?,
        )
        .map_err(Error::from)
        .at(Stage::Output)?;
    }
    Ok(report)
}

fn write_artifacts(config: &ExperimentConfig, report: &PipelineReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.to_json())?;
    emit_results(&report.rows, dir.join("results.csv"))?;
    emit_summary(&report.summary, dir.join("summary.json"))?;
    let m = &report.models;
    save_checkpoint(&m.source, dir.join("source.wssn"))?;
    save_checkpoint(&m.pruned, dir.join("pruned.wssn"))?;
    for (name, w) in [("ftl", &m.ftl), ("tl", &m.tl), ("zero_shot", &m.zero_shot)] {
        if let Some(w) = w {
            save_checkpoint(w, dir.join(format!("{name}.wssn")))?;
        }
    }
    for (d, w) in &m.rt {
        save_checkpoint(w, dir.join(format!("rt_{d}.wssn")))?;
    }
    Ok(())
}
