//! Pipeline commands behind the CLI surface. Each command reads its inputs
//! from the experiment's output directory, writes self-describing artifacts
//! (config hash + seed), and names any missing upstream artifact explicitly.

use crate::config::{ExperimentConfig, SourceSpec};
use seqdiff_core::checkpoint;
use seqdiff_core::codec::Codec;
use seqdiff_core::data::{
    self, read_series, write_series, ContainerMeta, NormStats, SeriesBatch,
};
use seqdiff_core::error::{Error, Result};
use seqdiff_core::eval::{
    self, aggregate, discriminative_score, predictive_floor, predictive_score, EvalReport,
    MetricConfig, RunScores, TsneConfig,
};
use seqdiff_core::oracle::{self, OracleSuiteReport};
use seqdiff_core::rng::{derive_seed, substream};
use seqdiff_core::sample::{generate_sequence, SamplerConfig};
use seqdiff_core::score::ScoreNet;
use seqdiff_core::train::{pretrain_codec, train_score};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Layout {
    out: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout { out: cfg.experiment.out_dir.clone() }
    }
    pub fn train_data(&self) -> PathBuf {
        self.out.join("data/train.sqdf")
    }
    pub fn valid_data(&self) -> PathBuf {
        self.out.join("data/valid.sqdf")
    }
    pub fn test_data(&self) -> PathBuf {
        self.out.join("data/test.sqdf")
    }
    pub fn codec_ckpt(&self) -> PathBuf {
        self.out.join("checkpoints/codec.ckpt")
    }
    pub fn score_ckpt(&self) -> PathBuf {
        self.out.join("checkpoints/score.ckpt")
    }
    pub fn codec_curve(&self) -> PathBuf {
        self.out.join("curves/codec_loss.tsv")
    }
    pub fn score_curve(&self) -> PathBuf {
        self.out.join("curves/score_loss.tsv")
    }
    pub fn generated(&self) -> PathBuf {
        self.out.join("generated/generated.sqdf")
    }
    pub fn eval_table(&self) -> PathBuf {
        self.out.join("eval/report.txt")
    }
    pub fn eval_kv(&self) -> PathBuf {
        self.out.join("eval/report.kv")
    }
    pub fn kde_base(&self) -> PathBuf {
        self.out.join("plots/kde")
    }
    pub fn tsne_base(&self) -> PathBuf {
        self.out.join("plots/tsne")
    }
    pub fn oracle_report(&self) -> PathBuf {
        self.out.join("oracle/report.tsv")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Data(format!(
            "missing artifact {}; run `{produced_by}` first",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_curve(path: &Path, cfg_hash: &str, seed: u64, curve: &[f64]) -> Result<()> {
    ensure_parent(path)?;
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "# config_hash={cfg_hash} seed={seed}").map_err(|e| Error::io(path, e))?;
    writeln!(f, "step\tloss").map_err(|e| Error::io(path, e))?;
    for (i, v) in curve.iter().enumerate() {
        writeln!(f, "{i}\t{v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub struct PrepareSummary {
    pub windows: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub observed_per_window: usize,
}

/// Load or synthesize the raw series, window it, split, normalise with
/// training-split statistics, apply the missingness regime to the training
/// split, and write the three containers.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareSummary> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let seed = derive_seed(cfg.experiment.seed, "data");
    let mut rng = substream(cfg.experiment.seed, "data");

    let windows = match &cfg.data.source {
        SourceSpec::Sines { n_samples, dim } => {
            data::synth_sines(*n_samples, *dim, cfg.data.length, &mut rng)
        }
        SourceSpec::Csv { path, columns, delimiter } => {
            let delim = delimiter.as_bytes().first().copied().unwrap_or(b',');
            let table = data::load_csv(path, columns, delim)?;
            data::window(&table, cfg.data.length, cfg.data.stride)?
        }
    };
    let n_windows = windows.n_samples();

    let (train, valid, test) =
        data::split(&windows, (cfg.data.split[0], cfg.data.split[1], cfg.data.split[2]), &mut rng)?;
    let stats = data::minmax_fit(&train)?;
    let train = data::normalize(&train, &stats)?;
    let valid = data::normalize(&valid, &stats)?;
    let test = data::normalize(&test, &stats)?;

    let train = match cfg.data.missing_rate {
        Some(rate) if rate > 0.0 => data::inject_missing(&train, rate, &mut rng)?,
        _ => train,
    };
    let observed_per_window = train.observed_count(0);

    let meta = ContainerMeta { config_hash: cfg.hash(), seed };
    for (path, batch) in [
        (layout.train_data(), &train),
        (layout.valid_data(), &valid),
        (layout.test_data(), &test),
    ] {
        ensure_parent(&path)?;
        write_series(&path, batch, Some(&stats), &meta)?;
    }

    Ok(PrepareSummary {
        windows: n_windows,
        train: train.n_samples(),
        valid: valid.n_samples(),
        test: test.n_samples(),
        observed_per_window,
    })
}

/// Pre-train the autoencoder on the prepared training split.
pub fn cmd_train_codec(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let layout = Layout::new(cfg);
    require(&layout.train_data(), "seqdiff prepare")?;
    let (train, _, meta_in) = read_series(&layout.train_data())?;
    let mut codec = Codec::new(
        cfg.codec_config(train.dim()),
        derive_seed(cfg.experiment.seed, "codec-init"),
    );
    let train_cfg = cfg.train_config()?;
    let curve = pretrain_codec(&mut codec, &train, &train_cfg)?;
    write_curve(&layout.codec_curve(), &cfg.hash(), train_cfg.seed, &curve)?;
    let path = layout.codec_ckpt();
    ensure_parent(&path)?;
    checkpoint::save_codec(&path, &codec, &ContainerMeta { config_hash: cfg.hash(), seed: meta_in.seed })?;
    Ok(path)
}

/// Train the conditional score network against the frozen (or alternating)
/// codec.
pub fn cmd_train_score(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let layout = Layout::new(cfg);
    require(&layout.train_data(), "seqdiff prepare")?;
    require(&layout.codec_ckpt(), "seqdiff train-codec")?;
    let (train, _, _) = read_series(&layout.train_data())?;
    let (mut codec, _) = checkpoint::load_codec(&layout.codec_ckpt())?;
    let mut score = ScoreNet::new(
        cfg.score_config(),
        derive_seed(cfg.experiment.seed, "score-init"),
    )?;
    let train_cfg = cfg.train_config()?;
    let curve = train_score(&mut score, &mut codec, &train, &train_cfg)?;
    write_curve(&layout.score_curve(), &cfg.hash(), train_cfg.seed, &curve)?;
    let path = layout.score_ckpt();
    ensure_parent(&path)?;
    let meta = ContainerMeta { config_hash: cfg.hash(), seed: train_cfg.seed };
    checkpoint::save_score(&path, &score, &meta)?;
    if train_cfg.use_alt {
        // the codec moved during alternation; refresh its checkpoint
        checkpoint::save_codec(&layout.codec_ckpt(), &codec, &meta)?;
    }
    Ok(path)
}

/// Generate a batch of complete windows with the trained model.
pub fn cmd_generate(cfg: &ExperimentConfig, steps_override: Option<usize>) -> Result<PathBuf> {
    let layout = Layout::new(cfg);
    require(&layout.codec_ckpt(), "seqdiff train-codec")?;
    require(&layout.score_ckpt(), "seqdiff train-score")?;
    require(&layout.train_data(), "seqdiff prepare")?;
    let (codec, _) = checkpoint::load_codec(&layout.codec_ckpt())?;
    let (score, _) = checkpoint::load_score(&layout.score_ckpt())?;
    let (_, stats, _) = read_series(&layout.train_data())?;
    let sde = cfg.sde_spec()?;
    let sampler = SamplerConfig {
        n_steps: steps_override.unwrap_or(cfg.sampler.n_steps),
        corrector_steps: cfg.sampler.corrector_steps,
        snr: cfg.sampler.snr,
        eps: cfg.sampler.eps,
        eta_floor: 1e-6,
        seed: derive_seed(cfg.experiment.seed, "sample"),
    };
    let batch = generate_sequence(
        &sde,
        &score,
        &codec,
        &sampler,
        cfg.eval.n_generate,
        cfg.data.length,
    )?;
    let path = layout.generated();
    ensure_parent(&path)?;
    write_series(
        &path,
        &batch,
        stats.as_ref(),
        &ContainerMeta { config_hash: cfg.hash(), seed: sampler.seed },
    )?;
    Ok(path)
}

/// Evaluate generated windows against held-out real windows over n_runs
/// metric seeds; writes the aggregated table and key-value report.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    real_path: Option<&Path>,
    synth_path: Option<&Path>,
) -> Result<EvalReport> {
    let layout = Layout::new(cfg);
    let real_path = real_path.map(Path::to_path_buf).unwrap_or_else(|| layout.test_data());
    let synth_path = synth_path.map(Path::to_path_buf).unwrap_or_else(|| layout.generated());
    require(&real_path, "seqdiff prepare")?;
    require(&synth_path, "seqdiff generate")?;
    let (real, _, _) = read_series(&real_path)?;
    let (synth, _, _) = read_series(&synth_path)?;

    let metric_cfg = MetricConfig {
        disc_steps: cfg.eval.disc_steps,
        pred_steps: cfg.eval.pred_steps,
        ..Default::default()
    };
    let eval_seed = derive_seed(cfg.experiment.seed, "eval");
    let mut runs = Vec::with_capacity(cfg.eval.n_runs);
    for i in 0..cfg.eval.n_runs {
        let run_seed = derive_seed(eval_seed, &format!("run-{i}"));
        runs.push(RunScores {
            disc: discriminative_score(&real, &synth, &metric_cfg, run_seed)?,
            pred: predictive_score(&real, &synth, &metric_cfg, run_seed)?,
            pred_floor: Some(predictive_floor(&real, &metric_cfg, run_seed)?),
            dataset: cfg.experiment.name.clone(),
            regime: cfg.regime_tag(),
        });
    }
    let mut report = aggregate(&runs)?;

    let header = format!(
        "# config_hash={} seed={} n_runs={}\n",
        cfg.hash(),
        cfg.experiment.seed,
        cfg.eval.n_runs
    );
    write_text(&layout.eval_table(), &format!("{header}{}", report.table_text()))?;
    write_text(&layout.eval_kv(), &format!("{header}{}", report.kv_text()))?;
    report.plot_paths = vec![layout.eval_table(), layout.eval_kv()];
    Ok(report)
}

/// KDE and t-SNE artifacts comparing real and generated windows.
pub fn cmd_plot(cfg: &ExperimentConfig) -> Result<(eval::KdeArtifact, eval::TsneArtifact)> {
    let layout = Layout::new(cfg);
    require(&layout.test_data(), "seqdiff prepare")?;
    require(&layout.generated(), "seqdiff generate")?;
    let (real, _, _) = read_series(&layout.test_data())?;
    let (synth, _, _) = read_series(&layout.generated())?;

    let kde = eval::kde_plot(&real, &synth, &layout.kde_base())?;

    let cap = cfg.eval.tsne_max;
    let rs = data::subsample(&real, cap, &mut substream(cfg.experiment.seed, "plot-real"));
    let ss = data::subsample(&synth, cap, &mut substream(cfg.experiment.seed, "plot-synth"));
    let tsne = eval::tsne_plot(
        &rs,
        &ss,
        &layout.tsne_base(),
        derive_seed(cfg.experiment.seed, "plot"),
        &TsneConfig::default(),
    )?;
    Ok((kde, tsne))
}

/// Run the analytic oracle suite and write the pass/fail report.
pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<OracleSuiteReport> {
    let layout = Layout::new(cfg);
    let report = oracle::run_suite(derive_seed(cfg.experiment.seed, "oracle"))?;
    let header = format!("# config_hash={} seed={}\n", cfg.hash(), cfg.experiment.seed);
    write_text(&layout.oracle_report(), &format!("{header}{}", report.render()))?;
    Ok(report)
}

/// Export normalised or denormalised values of a container as csv, mostly
/// for downstream inspection.
pub fn denormalized_view(path: &Path) -> Result<SeriesBatch> {
    let (batch, stats, _) = read_series(path)?;
    match stats {
        Some(stats) => data::denormalize(&batch, &stats),
        None => Err(Error::Data(format!(
            "{} carries no normalization stats",
            path.display()
        ))),
    }
}

/// Convenience accessor for a container's stats, used by tests.
pub fn container_stats(path: &Path) -> Result<Option<NormStats>> {
    let (_, stats, _) = read_series(path)?;
    Ok(stats)
}
