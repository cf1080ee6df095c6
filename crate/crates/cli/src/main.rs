use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use wssnet_core::federation::SecondaryUser;
use wssnet_core::harness::{
    build_spectra, config_hash, dataset, emit_results, emit_summary, federate_users, front_end,
    load_dataset, model_accuracy, prune_on, rank_schemes, run_pipeline, save_dataset,
    somp_accuracy, split_request, su_id, sweep as harness_sweep, tl_scheme, train_on, DatasetMeta,
    DomainConfig, ExperimentConfig, Split, StageError, SweepRow, TransportKind, SCHEME_FTL,
    SCHEME_SOMP, SCHEME_ZERO_SHOT,
};
use wssnet_core::multicoset::FrontEnd;
use wssnet_core::tensornet::checkpoint::{load_checkpoint, save_checkpoint};
use wssnet_core::tensornet::{LabeledDataset, ModelWeights};
use wssnet_core::Error;

/// Federated transfer learning simulator for wideband spectrum sensing.
#[derive(Debug, Parser)]
#[command(name = "wssnet", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON). Overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration: `desk` or `full`.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Directory of datasets written by `gen-data`; missing files are generated.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate and persist train, validation, adaptation and test datasets.
    GenData {
        /// Domains to generate (default: all).
        #[arg(long)]
        domain: Vec<String>,
    },
    /// Train a WSSNet from scratch on one domain.
    Train {
        /// Domain id (default: the source domain).
        #[arg(long)]
        domain: Option<String>,
    },
    /// Prune the hidden layer of a source model and fine-tune it.
    Prune {
        /// Model to prune (default: <out>/source.wssn).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Federated adaptation over the target-domain SUs.
    Ftl {
        /// Initial model (default: <out>/pruned.wssn).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Run with this single SU only (transfer-learning baseline).
        #[arg(long, conflicts_with = "exclude")]
        only: Option<String>,
        /// Leave this SU out of every round (zero-shot evaluation).
        #[arg(long)]
        exclude: Option<String>,
        #[arg(long, value_enum)]
        transport: Option<TransportArg>,
    },
    /// Score one model, or the SOMP baseline, on test sets.
    Eval {
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "scheme")]
        model: Option<PathBuf>,
        #[arg(long, value_enum, conflicts_with = "model")]
        scheme: Option<SchemeArg>,
        /// Name written to the scheme column (default: file stem of the model).
        #[arg(long)]
        label: Option<String>,
        /// Domains to evaluate (default: all targets).
        #[arg(long)]
        domain: Vec<String>,
        /// SNR points in dB (default: the configured grid).
        #[arg(long, allow_negative_numbers = true)]
        snr: Vec<f64>,
    },
    /// Evaluate every checkpoint found in <out> and write results.csv and summary.json.
    Sweep,
    /// Run the whole pipeline.
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Socket,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    Somp,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 1 } else { 2 };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        let code = if matches!(e.source, Error::Config(_)) {
            1
        } else {
            2
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&common.preset)?,
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

struct Ctx {
    config: ExperimentConfig,
    fe: FrontEnd,
    out: PathBuf,
    data: Option<PathBuf>,
}

impl Ctx {
    fn domain(&self, id: &str) -> CliResult<DomainConfig> {
        Ok(self.config.domain(id)?.clone())
    }

    fn domains(&self, ids: &[String], default: Vec<DomainConfig>) -> CliResult<Vec<DomainConfig>> {
        if ids.is_empty() {
            return Ok(default);
        }
        ids.iter().map(|id| self.domain(id)).collect()
    }

    /// Loads a persisted dataset when one exists, otherwise generates it.
    fn dataset(
        &self,
        domain: &DomainConfig,
        split: Split,
        snr: Option<f64>,
    ) -> Result<LabeledDataset, Error> {
        if let Some(dir) = &self.data {
            let stem = dataset_stem(dir, &domain.id, split, snr);
            if stem.with_extension("bin").exists() {
                let (data, meta) = load_dataset(&stem)?;
                if meta.request != split_request(&self.config, domain, split, snr) {
                    return Err(Error::Config(format!(
                        "{} was generated with a different configuration",
                        stem.display()
                    )));
                }
                info!("loaded {} samples from {}", data.len(), stem.display());
                return Ok(data);
            }
        }
        dataset(&self.config, &self.fe, domain, split, snr)
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn save_model(&self, w: &ModelWeights<f32>, name: &str) -> CliResult<()> {
        let path = self.out_file(name);
        save_checkpoint(w, &path)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).context("serialising report")?;
        fs::write(self.out_file(name), text).with_context(|| format!("writing {name}"))?;
        Ok(())
    }
}

fn dataset_stem(dir: &Path, domain: &str, split: Split, snr: Option<f64>) -> PathBuf {
    match snr {
        Some(db) => dir.join(format!(
            "{domain}_{}_{}dB",
            split.tag(),
            db.to_string().replace('.', "p")
        )),
        None => dir.join(format!("{domain}_{}", split.tag())),
    }
}

fn model_name(config: &ExperimentConfig, domain: &str) -> String {
    if domain == config.source.id {
        "source.wssn".into()
    } else {
        format!("rt_{domain}.wssn")
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli.common)?;
    let out = cli.common.out.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if let Command::All = cli.command {
        let report = run_pipeline(&config, Some(&out))?;
        for (domain, standings) in &report.summary.domains {
            for (scheme, s) in standings {
                println!("{domain}\t{scheme}\t{:.4}\trank {}", s.p_acc, s.rank);
            }
        }
        return Ok(());
    }
    let ctx = Ctx {
        fe: front_end(&config)?,
        config,
        out,
        data: cli.common.data,
    };
    match cli.command {
        Command::GenData { domain } => gen_data(&ctx, &domain),
        Command::Train { domain } => train(&ctx, domain),
        Command::Prune { model } => prune(&ctx, model),
        Command::Ftl {
            model,
            only,
            exclude,
            transport,
        } => ftl(&ctx, model, only, exclude, transport),
        Command::Eval {
            model,
            scheme,
            label,
            domain,
            snr,
        } => eval(&ctx, model, scheme, label, &domain, snr),
        Command::Sweep => sweep(&ctx),
        Command::All => unreachable!("handled above"),
    }
}

fn gen_data(ctx: &Ctx, ids: &[String]) -> CliResult<()> {
    let c = &ctx.config;
    let dir = ctx.data.clone().unwrap_or_else(|| ctx.out.join("data"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let hash = config_hash(c);
    let domains = ctx.domains(ids, c.domains().cloned().collect())?;
    for d in &domains {
        let mut jobs = vec![(Split::Train, None), (Split::Validation, None)];
        if d.id != c.source.id {
            jobs.push((Split::Adaptation, None));
        }
        jobs.extend(c.snr_grid_db.iter().map(|&s| (Split::Test, Some(s))));
        for (split, snr) in jobs {
            let request = split_request(c, d, split, snr);
            let data = dataset(c, &ctx.fe, d, split, snr)?;
            let meta = DatasetMeta {
                request,
                subbands: c.subbands,
                snapshots: c.multicoset.snapshots,
                config_hash: hash.clone(),
            };
            let stem = dataset_stem(&dir, &d.id, split, snr);
            save_dataset(&stem, &data, &meta)?;
            println!("{}\t{}", stem.display(), data.len());
        }
    }
    Ok(())
}

fn train(ctx: &Ctx, domain: Option<String>) -> CliResult<()> {
    let d = ctx.domain(domain.as_deref().unwrap_or(&ctx.config.source.id))?;
    let train = ctx.dataset(&d, Split::Train, None)?;
    let val = ctx.dataset(&d, Split::Validation, None)?;
    let report = train_on(&ctx.config, &d.id, &train, &val)?;
    ctx.save_model(&report.weights, &model_name(&ctx.config, &d.id))?;
    ctx.write_json(&format!("train_{}.json", d.id), &report.history)?;
    println!(
        "best epoch {} of {}",
        report.best_epoch,
        report.history.len()
    );
    Ok(())
}

fn prune(ctx: &Ctx, model: Option<PathBuf>) -> CliResult<()> {
    let path = model.unwrap_or_else(|| ctx.out_file("source.wssn"));
    let w = load_checkpoint(&path)?;
    let src = ctx.config.source.clone();
    let train = ctx.dataset(&src, Split::Train, None)?;
    let val = ctx.dataset(&src, Split::Validation, None)?;
    let (pruned, outcome) = prune_on(&ctx.config, &w, &train, &val)?;
    ctx.save_model(&pruned, "pruned.wssn")?;
    ctx.write_json("prune.json", &outcome)?;
    println!(
        "zeroed {} of {} weights; val loss {:.4} -> {:.4}",
        outcome.report.zeroed_count,
        outcome.report.total_count,
        outcome.val_loss_pruned,
        outcome.val_loss_tuned
    );
    Ok(())
}

fn ftl(
    ctx: &Ctx,
    model: Option<PathBuf>,
    only: Option<String>,
    exclude: Option<String>,
    transport: Option<TransportArg>,
) -> CliResult<()> {
    let mut config = ctx.config.clone();
    if let Some(t) = transport {
        config.ftl.transport = match t {
            TransportArg::InProcess => TransportKind::InProcess,
            TransportArg::Socket => TransportKind::Socket,
        };
    }
    let init = load_checkpoint(model.unwrap_or_else(|| ctx.out_file("pruned.wssn")))?;
    let (participants, name) = match (&only, &exclude) {
        (Some(id), _) => (vec![ctx.domain(id)?], "tl.wssn"),
        (None, Some(id)) => {
            ctx.domain(id)?;
            (
                config
                    .targets
                    .iter()
                    .filter(|d| &d.id != id)
                    .cloned()
                    .collect(),
                "zero_shot.wssn",
            )
        }
        (None, None) => (config.targets.clone(), "ftl.wssn"),
    };
    let users = participants
        .iter()
        .map(|d| {
            Ok(SecondaryUser {
                id: su_id(&config, &d.id)?,
                data: ctx.dataset(d, Split::Adaptation, None)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let report = federate_users(&config, &init, users)?;
    ctx.save_model(&report.weights, name)?;
    let retries: usize = report
        .rounds
        .iter()
        .map(|r| r.attempts.saturating_sub(1))
        .sum();
    println!(
        "{} rounds, {retries} retried exchanges",
        report.rounds.len()
    );
    Ok(())
}

fn eval(
    ctx: &Ctx,
    model: Option<PathBuf>,
    scheme: Option<SchemeArg>,
    label: Option<String>,
    ids: &[String],
    snr: Vec<f64>,
) -> CliResult<()> {
    let c = &ctx.config;
    let domains = ctx.domains(ids, c.targets.clone())?;
    let grid = if snr.is_empty() {
        c.snr_grid_db.clone()
    } else {
        snr
    };
    let weights = model.as_ref().map(load_checkpoint).transpose()?;
    let name = match (&label, &model, scheme) {
        (Some(l), _, _) => l.clone(),
        (None, _, Some(SchemeArg::Somp)) => SCHEME_SOMP.to_string(),
        (None, Some(p), _) => p
            .file_stem()
            .map_or("model".into(), |s| s.to_string_lossy().into_owned()),
        (None, None, None) => unreachable!("clap requires --model or --scheme"),
    };
    let mut rows = Vec::new();
    for d in &domains {
        for &db in &grid {
            let (p_acc, n_test) = match &weights {
                Some(w) => {
                    let test = ctx.dataset(d, Split::Test, Some(db))?;
                    (model_accuracy(w, &test, c.threshold)?, test.len())
                }
                None => {
                    let spectra =
                        build_spectra(c, &ctx.fe, &split_request(c, d, Split::Test, Some(db)))?;
                    (
                        somp_accuracy(ctx.fe.measurement(), &spectra)?,
                        spectra.len(),
                    )
                }
            };
            println!("{}\t{name}\t{db}\t{p_acc:.4}", d.id);
            rows.push(SweepRow {
                domain: d.id.clone(),
                scheme: name.clone(),
                snr_db: db,
                p_acc,
                n_test,
            });
        }
    }
    emit_results(
        &rows,
        ctx.out_file(&format!("eval_{}.csv", file_safe(&name))),
    )?;
    Ok(())
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn sweep(ctx: &Ctx) -> CliResult<()> {
    let c = &ctx.config;
    let load = |name: &str| -> CliResult<Option<ModelWeights<f32>>> {
        let path = ctx.out_file(name);
        Ok(if path.exists() {
            Some(load_checkpoint(path)?)
        } else {
            None
        })
    };
    let ftl = load("ftl.wssn")?;
    let tl = load("tl.wssn")?;
    let zero_shot = load("zero_shot.wssn")?;
    let mut schemes: Vec<(String, &ModelWeights<f32>, Option<&str>)> = Vec::new();
    if let Some(w) = &ftl {
        schemes.push((SCHEME_FTL.into(), w, None));
    }
    if let Some(w) = &tl {
        schemes.push((tl_scheme(c), w, None));
    }
    if let (Some(w), Some(d)) = (&zero_shot, &c.ftl.zero_shot_exclude) {
        schemes.push((SCHEME_ZERO_SHOT.into(), w, Some(d.as_str())));
    }
    let mut rt = BTreeMap::new();
    for d in &c.targets {
        if let Some(w) = load(&model_name(c, &d.id))? {
            rt.insert(d.id.clone(), w);
        }
    }
    let rows = harness_sweep(c, &ctx.fe, &schemes, &rt, |d, snr| {
        ctx.dataset(d, Split::Test, Some(snr))
    })?;
    emit_results(&rows, ctx.out_file("results.csv"))?;
    emit_summary(&rank_schemes(c, &rows), ctx.out_file("summary.json"))?;
    for r in &rows {
        println!("{}\t{}\t{}\t{:.4}", r.domain, r.scheme, r.snr_db, r.p_acc);
    }
    Ok(())
}
