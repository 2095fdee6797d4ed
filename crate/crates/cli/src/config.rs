//! Declarative experiment configuration: a flat TOML file (or a named
//! built-in preset) describing the dataset, diffusion schedule, networks,
//! training, sampling, and evaluation settings.

use seqdiff_core::codec::{CodecArch, CodecConfig};
use seqdiff_core::error::{Error, Result};
use seqdiff_core::score::{CondMode, ScoreNetConfig};
use seqdiff_core::sde::{SdeKind, SdeSpec};
use seqdiff_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceSpec {
    /// Delimited text file with a header row.
    Csv {
        path: PathBuf,
        #[serde(default)]
        columns: Vec<String>,
        #[serde(default = "default_delimiter")]
        delimiter: String,
    },
    /// Synthetic sine fixture.
    Sines { n_samples: usize, dim: usize },
}

fn default_delimiter() -> String {
    ",".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSection {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataSection {
    pub source: SourceSpec,
    pub length: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// None means the regular regime; Some(r) drops round(r*length)
    /// observations per training window.
    #[serde(default)]
    pub missing_rate: Option<f64>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_stride() -> usize {
    1
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SdeSection {
    pub kind: SdeKind,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max: f64,
}

fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}
fn default_sigma_min() -> f64 {
    0.01
}
fn default_sigma_max() -> f64 {
    50.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodecSection {
    pub arch: CodecArch,
    pub latent_dim: usize,
    /// GRU-ODE decoder width; defaults to 2x latent_dim when unset.
    #[serde(default)]
    pub decoder_hidden: Option<usize>,
    #[serde(default = "default_substeps")]
    pub ode_substeps: usize,
}

fn default_substeps() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreSection {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_temb")]
    pub time_embed_dim: usize,
}

fn default_depth() -> usize {
    4
}
fn default_base_channels() -> usize {
    32
}
fn default_temb() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainSection {
    pub iter_pre: usize,
    pub iter_main: usize,
    pub use_alt: bool,
    #[serde(default = "default_alt_period")]
    pub alt_period: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_codec")]
    pub lr_codec: f64,
    #[serde(default = "default_lr_score")]
    pub lr_score: f64,
}

fn default_alt_period() -> usize {
    5
}
fn default_batch() -> usize {
    32
}
fn default_lr_codec() -> f64 {
    1e-3
}
fn default_lr_score() -> f64 {
    2e-4
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerSection {
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_corrector_steps")]
    pub corrector_steps: usize,
    #[serde(default = "default_snr")]
    pub snr: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_n_steps() -> usize {
    1000
}
fn default_corrector_steps() -> usize {
    1
}
fn default_snr() -> f64 {
    0.16
}
fn default_eps() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSection {
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default = "default_metric_steps")]
    pub disc_steps: usize,
    #[serde(default = "default_metric_steps")]
    pub pred_steps: usize,
    #[serde(default = "default_n_generate")]
    pub n_generate: usize,
    #[serde(default = "default_tsne_max")]
    pub tsne_max: usize,
}

fn default_n_runs() -> usize {
    10
}
fn default_metric_steps() -> usize {
    2000
}
fn default_n_generate() -> usize {
    256
}
fn default_tsne_max() -> usize {
    300
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub sde: SdeSection,
    pub codec: CodecSection,
    pub score: ScoreSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rate) = self.data.missing_rate {
            if !(0.0..=0.9).contains(&rate) {
                return Err(Error::Config(format!("missing_rate {rate} outside [0, 0.9]")));
            }
        }
        if self.data.length < 2 {
            return Err(Error::Config("window length must be >= 2".into()));
        }
        self.sde_spec()?;
        Ok(())
    }

    /// Hex digest identifying this exact configuration; recorded in every
    /// artifact the pipeline writes.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn sde_spec(&self) -> Result<SdeSpec> {
        SdeSpec::new(
            self.sde.kind,
            self.sde.beta_min,
            self.sde.beta_max,
            self.sde.sigma_min,
            self.sde.sigma_max,
        )
    }

    pub fn input_dim(&self) -> usize {
        match &self.data.source {
            SourceSpec::Sines { dim, .. } => *dim,
            SourceSpec::Csv { columns, .. } => columns.len(),
        }
    }

    pub fn codec_config(&self, input_dim: usize) -> CodecConfig {
        let decoder_hidden = self.codec.decoder_hidden.unwrap_or(2 * self.codec.latent_dim);
        CodecConfig {
            arch: self.codec.arch,
            input_dim,
            latent_dim: self.codec.latent_dim,
            decoder_hidden,
            ode_substeps: self.codec.ode_substeps,
        }
    }

    pub fn score_config(&self) -> ScoreNetConfig {
        ScoreNetConfig {
            latent_dim: self.codec.latent_dim,
            depth: self.score.depth,
            base_channels: self.score.base_channels,
            time_embed_dim: self.score.time_embed_dim,
            cond_mode: CondMode::ChannelConcat,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            iter_pre: self.train.iter_pre,
            iter_main: self.train.iter_main,
            use_alt: self.train.use_alt,
            alt_period: self.train.alt_period,
            batch_size: self.train.batch_size,
            lr_codec: self.train.lr_codec,
            lr_score: self.train.lr_score,
            seed: seqdiff_core::rng::derive_seed(self.experiment.seed, "train"),
            sde: self.sde_spec()?,
        })
    }

    pub fn regime_tag(&self) -> String {
        match self.data.missing_rate {
            None => "regular".into(),
            Some(r) => format!("missing-{}", (r * 100.0).round() as u64),
        }
    }
}

/// Resolve "preset:NAME" or a file path.
pub fn resolve_config(arg: &str) -> Result<ExperimentConfig> {
    if let Some(name) = arg.strip_prefix("preset:") {
        preset(name)
    } else {
        ExperimentConfig::load(Path::new(arg))
    }
}

struct DatasetPreset {
    name: &'static str,
    /// Published feature dimension of the dataset.
    dimension: usize,
    latent_dim: usize,
    use_alt: bool,
    iter_pre_regular: usize,
    decoder_hidden: usize,
}

const DATASETS: &[DatasetPreset] = &[
    DatasetPreset { name: "stocks", dimension: 6, latent_dim: 24, use_alt: true, iter_pre_regular: 50_000, decoder_hidden: 48 },
    DatasetPreset { name: "energy", dimension: 28, latent_dim: 56, use_alt: false, iter_pre_regular: 100_000, decoder_hidden: 112 },
    DatasetPreset { name: "air", dimension: 13, latent_dim: 40, use_alt: true, iter_pre_regular: 50_000, decoder_hidden: 40 },
    DatasetPreset { name: "ai4i", dimension: 5, latent_dim: 24, use_alt: true, iter_pre_regular: 50_000, decoder_hidden: 48 },
];

/// Names of every built-in preset.
pub fn preset_names() -> Vec<String> {
    let mut names = vec!["sine-desk".to_string()];
    for d in DATASETS {
        names.push(format!("{}-regular", d.name));
        for rate in [30, 50, 70] {
            names.push(format!("{}-missing-{rate}", d.name));
        }
    }
    names
}

/// Build a named preset. Real-dataset presets carry the published
/// hyperparameters and expect the raw csv under data/<name>.csv.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    if name == "sine-desk" {
        return Ok(sine_desk());
    }
    for d in DATASETS {
        let regular = format!("{}-regular", d.name);
        if name == regular {
            return Ok(dataset_preset(d, None));
        }
        for rate in [30u64, 50, 70] {
            if name == format!("{}-missing-{rate}", d.name) {
                return Ok(dataset_preset(d, Some(rate as f64 / 100.0)));
            }
        }
    }
    Err(Error::Config(format!(
        "unknown preset '{name}'; available: {}",
        preset_names().join(", ")
    )))
}

fn dataset_preset(d: &DatasetPreset, missing_rate: Option<f64>) -> ExperimentConfig {
    let regime = match missing_rate {
        None => "regular".to_string(),
        Some(r) => format!("missing-{}", (r * 100.0) as u64),
    };
    let irregular = missing_rate.is_some();
    ExperimentConfig {
        experiment: ExperimentSection {
            name: format!("{}-{}", d.name, regime),
            out_dir: PathBuf::from(format!("runs/{}-{}", d.name, regime)),
            seed: 42,
        },
        data: DataSection {
            source: SourceSpec::Csv {
                path: PathBuf::from(format!("data/{}.csv", d.name)),
                columns: Vec::new(),
                delimiter: ",".into(),
            },
            length: 24,
            stride: 1,
            missing_rate,
            split: [0.8, 0.1, 0.1],
        },
        sde: SdeSection {
            kind: SdeKind::SubVp,
            beta_min: 0.1,
            beta_max: 20.0,
            sigma_min: 0.01,
            sigma_max: 50.0,
        },
        codec: CodecSection {
            arch: if irregular { CodecArch::Irregular } else { CodecArch::Regular },
            latent_dim: d.latent_dim,
            decoder_hidden: irregular.then_some(d.decoder_hidden),
            ode_substeps: 4,
        },
        score: ScoreSection { depth: 4, base_channels: 32, time_embed_dim: 32 },
        train: TrainSection {
            // irregular presets share the 50k pre-training budget
            iter_pre: if irregular { 50_000 } else { d.iter_pre_regular },
            iter_main: 40_000,
            use_alt: d.use_alt,
            alt_period: 5,
            batch_size: 32,
            lr_codec: 1e-3,
            lr_score: 2e-4,
        },
        sampler: SamplerSection { n_steps: 1000, corrector_steps: 1, snr: 0.16, eps: 1e-3 },
        eval: EvalSection {
            n_runs: 10,
            disc_steps: 2000,
            pred_steps: 2000,
            n_generate: 256,
            tsne_max: 300,
        },
    }
}

/// Desk-scale synthetic fixture: trains end to end in minutes on one core.
fn sine_desk() -> ExperimentConfig {
    ExperimentConfig {
        experiment: ExperimentSection {
            name: "sine-desk".into(),
            out_dir: PathBuf::from("runs/sine-desk"),
            seed: 42,
        },
        data: DataSection {
            source: SourceSpec::Sines { n_samples: 1000, dim: 2 },
            length: 24,
            stride: 1,
            missing_rate: None,
            split: [0.8, 0.1, 0.1],
        },
        sde: SdeSection {
            kind: SdeKind::SubVp,
            beta_min: 0.1,
            beta_max: 20.0,
            sigma_min: 0.01,
            sigma_max: 50.0,
        },
        codec: CodecSection {
            arch: CodecArch::Regular,
            latent_dim: 8,
            decoder_hidden: None,
            ode_substeps: 4,
        },
        score: ScoreSection { depth: 2, base_channels: 16, time_embed_dim: 32 },
        train: TrainSection {
            iter_pre: 2000,
            iter_main: 5000,
            use_alt: false,
            alt_period: 5,
            batch_size: 16,
            lr_codec: 1e-2,
            lr_score: 1e-3,
        },
        sampler: SamplerSection { n_steps: 1000, corrector_steps: 1, snr: 0.16, eps: 1e-3 },
        eval: EvalSection {
            n_runs: 3,
            disc_steps: 2000,
            pred_steps: 2000,
            n_generate: 256,
            tsne_max: 300,
        },
    }
}
