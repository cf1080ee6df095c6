use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multicoset::CosetPattern;
use crate::pruning::FineTuneConfig;
use crate::signal_model::{Noise, ScenarioConfig};
use crate::tensornet::{DropoutRates, Padding, TrainConfig, WssNetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub id: String,
    /// Active PUs `K` in this domain.
    pub num_pus: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticosetConfig {
    /// Cosets `P`.
    pub cosets: usize,
    /// Snapshots per coset `N`.
    pub snapshots: usize,
    /// Coset offsets; defaults to `0..P`.
    #[serde(default)]
    pub pattern: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub conv1_kernels: usize,
    pub conv2_kernels: usize,
    pub hidden_units: usize,
    pub padding: Padding,
    pub dropout: DropoutRates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRange {
    pub min_db: f64,
    pub max_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Per-sample SNR for training and adaptation sets is drawn uniformly from this range.
    pub train_snr: SnrRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningConfig {
    pub kappa: f64,
    pub fine_tune: FineTuneConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    InProcess,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtlSettings {
    /// Adaptation samples held by each SU (`N_ad^i`).
    pub samples_per_su: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Server aggregation rate; the local rate is used when absent.
    #[serde(default)]
    pub server_learning_rate: Option<f64>,
    pub timeout_ms: u64,
    pub retries: usize,
    pub transport: TransportKind,
    /// Target domain whose SU joins single-SU transfer learning.
    pub tl_domain: String,
    /// Target domain left out of a second, zero-shot federation run.
    #[serde(default)]
    pub zero_shot_exclude: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stages {
    pub ftl: bool,
    pub tl: bool,
    pub rt: bool,
    pub somp: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            ftl: true,
            tl: true,
            rt: true,
            somp: true,
        }
    }
}

/// Whole-experiment configuration, read from a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Monitored bandwidth `B` in Hz.
    pub bandwidth_hz: f64,
    /// Sub-bands `L`.
    pub subbands: usize,
    /// Signal duration `Td`; defaults to the acquisition window `N L / B`.
    #[serde(default)]
    pub duration_s: Option<f64>,
    pub pu_energy: f64,
    pub source: DomainConfig,
    pub targets: Vec<DomainConfig>,
    pub multicoset: MulticosetConfig,
    pub network: NetworkConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub pruning: PruningConfig,
    pub ftl: FtlSettings,
    /// Decision threshold `lambda`.
    pub threshold: f64,
    pub snr_grid_db: Vec<f64>,
    /// SNR at which rankings and ratios are summarised.
    pub summary_snr_db: f64,
    #[serde(default)]
    pub stages: Stages,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale preset: L=16, N=32, P=6, 16/8 kernels, 64 hidden units.
    pub fn desk() -> Self {
        Self {
            bandwidth_hz: 128e6,
            subbands: 16,
            duration_s: None,
            pu_energy: 1.0,
            source: DomainConfig {
                id: "S".into(),
                num_pus: 7,
            },
            targets: [("T1", 2), ("T2", 4), ("T3", 6), ("T4", 9)]
                .into_iter()
                .map(|(id, k)| DomainConfig {
                    id: id.into(),
                    num_pus: k,
                })
                .collect(),
            multicoset: MulticosetConfig {
                cosets: 6,
                snapshots: 32,
                pattern: None,
            },
            network: NetworkConfig {
                conv1_kernels: 16,
                conv2_kernels: 8,
                hidden_units: 64,
                padding: Padding::Valid,
                dropout: DropoutRates::default(),
            },
            training: TrainConfig::default(),
            data: DataConfig {
                train_samples: 2000,
                val_samples: 500,
                test_samples: 500,
                train_snr: SnrRange {
                    min_db: 0.0,
                    max_db: 20.0,
                },
            },
            pruning: PruningConfig {
                kappa: 0.8,
                fine_tune: FineTuneConfig::default(),
            },
            ftl: FtlSettings {
                samples_per_su: 100,
                rounds: 30,
                local_epochs: 5,
                batch_size: 10,
                learning_rate: 0.01,
                server_learning_rate: None,
                timeout_ms: 60_000,
                retries: 2,
                transport: TransportKind::InProcess,
                tl_domain: "T1".into(),
                zero_shot_exclude: Some("T4".into()),
            },
            threshold: 0.5,
            snr_grid_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
            summary_snr_db: 10.0,
            stages: Stages::default(),
            seed: 2024,
        }
    }

    /// Full-size preset: L=40 over 320 MHz, N=64, P=8, 32/16 kernels, 128 hidden units.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.bandwidth_hz = 320e6;
        c.subbands = 40;
        c.duration_s = Some(8e-6);
        c.source.num_pus = 20;
        for (t, k) in c.targets.iter_mut().zip([8, 12, 16, 24]) {
            t.num_pus = k;
        }
        c.multicoset = MulticosetConfig {
            cosets: 8,
            snapshots: 64,
            pattern: None,
        };
        c.network = NetworkConfig {
            conv1_kernels: 32,
            conv2_kernels: 16,
            hidden_units: 128,
            padding: Padding::Valid,
            dropout: DropoutRates::default(),
        };
        c.data.train_samples = 12_000;
        c.data.val_samples = 4_000;
        c.data.test_samples = 4_000;
        c.pruning.kappa = 0.9;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn nyquist_period(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    pub fn duration(&self) -> f64 {
        self.duration_s
            .unwrap_or(self.multicoset.snapshots as f64 * self.subbands as f64 / self.bandwidth_hz)
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainConfig> {
        std::iter::once(&self.source).chain(&self.targets)
    }

    pub fn domain(&self, id: &str) -> Result<&DomainConfig> {
        self.domains()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::Config(format!("unknown domain {id:?}")))
    }

    pub fn scenario(&self, domain: &DomainConfig, noise: Noise) -> ScenarioConfig {
        ScenarioConfig {
            subbands: self.subbands,
            bandwidth_hz: self.bandwidth_hz,
            num_pus: domain.num_pus,
            duration_s: self.duration(),
            noise,
            pu_energy: self.pu_energy,
            seed: self.seed,
        }
    }

    pub fn coset_pattern(&self) -> Result<CosetPattern> {
        let t = self.nyquist_period();
        match &self.multicoset.pattern {
            Some(p) => CosetPattern::new(p.clone(), self.subbands, t),
            None => CosetPattern::leading(self.multicoset.cosets, self.subbands, t),
        }
    }

    pub fn network_spec(&self) -> WssNetSpec {
        WssNetSpec {
            subbands: self.subbands,
            snapshots: self.multicoset.snapshots,
            conv1_kernels: self.network.conv1_kernels,
            conv2_kernels: self.network.conv2_kernels,
            hidden_units: self.network.hidden_units,
            padding: self.network.padding,
            dropout: self.network.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        for d in self.domains() {
            if d.num_pus == 0 || d.num_pus > self.subbands {
                return cfg_err(format!(
                    "domain {} has K = {} outside [1, L]",
                    d.id, d.num_pus
                ));
            }
            self.scenario(d, Noise::Noiseless)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        let mut ids: Vec<&str> = self.domains().map(|d| d.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return cfg_err("domain ids must be unique".into());
        }
        if self.targets.is_empty() {
            return cfg_err("at least one target domain is required".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return cfg_err(format!("threshold {} outside (0, 1)", self.threshold));
        }
        let pattern = self
            .coset_pattern()
            .map_err(|e| Error::Config(e.to_string()))?;
        if pattern.cosets() != self.multicoset.cosets {
            return cfg_err("coset pattern length differs from the coset count".into());
        }
        if !pattern.is_sub_nyquist() {
            return cfg_err(format!(
                "P = {} must be below L = {}",
                pattern.cosets(),
                self.subbands
            ));
        }
        self.network_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.pruning.kappa > 0.0 && self.pruning.kappa < 1.0) {
            return cfg_err(format!(
                "pruning ratio {} outside (0, 1)",
                self.pruning.kappa
            ));
        }
        let d = &self.data;
        if d.train_samples == 0 || d.val_samples == 0 || d.test_samples == 0 {
            return cfg_err("dataset sizes must be positive".into());
        }
        if d.train_snr.min_db > d.train_snr.max_db {
            return cfg_err("training SNR range is inverted".into());
        }
        let f = &self.ftl;
        if f.samples_per_su == 0 || f.rounds == 0 || f.local_epochs == 0 || f.batch_size == 0 {
            return cfg_err("FTL sizes, rounds, epochs and batch must be positive".into());
        }
        if f.learning_rate.is_nan() || f.learning_rate < 0.0 {
            return cfg_err("FTL learning rate must be non-negative".into());
        }
        if !self.targets.iter().any(|t| t.id == f.tl_domain) {
            return cfg_err(format!("TL domain {:?} is not a target", f.tl_domain));
        }
        if let Some(z) = &f.zero_shot_exclude {
            if !self.targets.iter().any(|t| &t.id == z) {
                return cfg_err(format!("zero-shot domain {z:?} is not a target"));
            }
            if self.targets.len() < 2 {
                return cfg_err("zero-shot evaluation needs at least two target SUs".into());
            }
        }
        if self.training.batch_size == 0 || self.training.max_epochs == 0 {
            return cfg_err("training batch size and epochs must be positive".into());
        }
        if self.snr_grid_db.is_empty() {
            return cfg_err("SNR grid is empty".into());
        }
        Ok(())
    }
}
