//! Evaluation protocol: discriminative and predictive scores with multi-seed
//! aggregation, plus KDE and t-SNE artifacts.
//!
//! Both metrics follow the time-series synthesis evaluation line: a 2-layer
//! LSTM classifier separating real from synthetic windows (score is
//! |test accuracy - 1/2|), and an LSTM forecaster trained on synthetic data
//! and tested on real data with one-step-ahead mean absolute error over the
//! whole sequence. Metrics consume plain value arrays only.

pub mod kde;
pub mod plot;
pub mod tsne;

pub use kde::{kde_plot, KdeArtifact};
pub use tsne::{tsne_plot, TsneArtifact, TsneConfig};

use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::nn::layers::{Linear, LstmCell};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{Arr, NodeId, ParamStore, Tape};
use crate::rng::{substream, Prng};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricConfig {
    pub disc_steps: usize,
    pub pred_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_frac: f64,
    /// Metric nets use hidden width max(dim, this floor).
    pub hidden_min: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            disc_steps: 2000,
            pred_steps: 2000,
            batch_size: 128,
            lr: 1e-3,
            train_frac: 0.8,
            hidden_min: 8,
        }
    }
}

fn order_node(t: &mut Tape, values: &Array3<f64>, idx: &[usize], n: usize) -> NodeId {
    let d = values.shape()[2];
    let x = Arr::from_shape_fn((idx.len(), d), |(r, j)| values[[idx[r], n, j]]);
    t.input(x)
}

struct DiscNet {
    store: ParamStore,
    l1: LstmCell,
    l2: LstmCell,
    head: Linear,
    hidden: usize,
}

impl DiscNet {
    fn new(dim: usize, hidden: usize, rng: &mut Prng) -> Self {
        let mut store = ParamStore::new();
        let l1 = LstmCell::new(&mut store, rng, "l1", dim, hidden);
        let l2 = LstmCell::new(&mut store, rng, "l2", hidden, hidden);
        let head = Linear::new(&mut store, rng, "head", hidden, 1);
        DiscNet { store, l1, l2, head, hidden }
    }

    /// Logits for the selected windows.
    fn forward(&self, t: &mut Tape, values: &Array3<f64>, idx: &[usize]) -> NodeId {
        let b = idx.len();
        let n = values.shape()[1];
        let mut h1 = t.input(Arr::zeros((b, self.hidden)));
        let mut c1 = t.input(Arr::zeros((b, self.hidden)));
        let mut h2 = t.input(Arr::zeros((b, self.hidden)));
        let mut c2 = t.input(Arr::zeros((b, self.hidden)));
        for k in 0..n {
            let x = order_node(t, values, idx, k);
            let (nh1, nc1) = self.l1.forward(t, &self.store, x, h1, c1);
            h1 = nh1;
            c1 = nc1;
            let (nh2, nc2) = self.l2.forward(t, &self.store, h1, h2, c2);
            h2 = nh2;
            c2 = nc2;
        }
        self.head.forward(t, &self.store, h2)
    }
}

/// Trained classifier together with its held-out split, so callers can probe
/// accuracy under either label orientation.
pub struct DiscFit {
    net: DiscNet,
    values: Array3<f64>,
    labels: Vec<f64>,
    pub test_idx: Vec<usize>,
}

impl DiscFit {
    /// Test accuracy; with `flip_labels` the real/synthetic assignment is
    /// inverted, which maps accuracy a to 1-a.
    pub fn test_accuracy(&self, flip_labels: bool) -> f64 {
        let mut t = Tape::new();
        let logits = self.net.forward(&mut t, &self.values, &self.test_idx);
        let lv = t.value(logits);
        let mut correct = 0usize;
        for (r, &i) in self.test_idx.iter().enumerate() {
            let pred = if lv[[r, 0]] > 0.0 { 1.0 } else { 0.0 };
            let label = if flip_labels { 1.0 - self.labels[i] } else { self.labels[i] };
            if pred == label {
                correct += 1;
            }
        }
        correct as f64 / self.test_idx.len() as f64
    }
}

/// Train the 2-layer recurrent classifier on a real/synthetic mixture.
pub fn disc_fit(
    real: &SeriesBatch,
    synth: &SeriesBatch,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<DiscFit> {
    if real.dim() != synth.dim() || real.len() != synth.len() {
        return Err(Error::Shape(
            "discriminative score expects same-shape real and synthetic windows".into(),
        ));
    }
    let m = real.n_samples().min(synth.n_samples());
    if m < 5 {
        return Err(Error::Data(format!("need at least 5 windows per class, got {m}")));
    }
    let (n, d) = (real.len(), real.dim());
    let mut values = Array3::zeros((2 * m, n, d));
    let mut labels = vec![0.0; 2 * m];
    for i in 0..m {
        for k in 0..n {
            for j in 0..d {
                values[[i, k, j]] = real.values[[i, k, j]];
                values[[m + i, k, j]] = synth.values[[i, k, j]];
            }
        }
        labels[i] = 1.0;
    }

    let mut rng = substream(seed, "disc");
    let split_at = ((m as f64) * cfg.train_frac).round() as usize;
    let mut real_idx: Vec<usize> = (0..m).collect();
    let mut synth_idx: Vec<usize> = (m..2 * m).collect();
    real_idx.shuffle(&mut rng);
    synth_idx.shuffle(&mut rng);
    let mut train_idx: Vec<usize> = real_idx[..split_at].to_vec();
    train_idx.extend_from_slice(&synth_idx[..split_at]);
    let mut test_idx: Vec<usize> = real_idx[split_at..].to_vec();
    test_idx.extend_from_slice(&synth_idx[split_at..]);
    if split_at == m || test_idx.is_empty() {
        return Err(Error::Data(
            "degenerate split: one class has no test windows".into(),
        ));
    }

    let hidden = d.max(cfg.hidden_min);
    let net = DiscNet::new(d, hidden, &mut rng);
    let mut fit = DiscFit { net, values, labels, test_idx };
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &fit.net.store);
    for _ in 0..cfg.disc_steps {
        let batch: Vec<usize> = (0..cfg.batch_size.min(train_idx.len()))
            .map(|_| train_idx[rng.random_range(0..train_idx.len())])
            .collect();
        let mut t = Tape::new();
        let logits = fit.net.forward(&mut t, &fit.values, &batch);
        let y = Arr::from_shape_fn((batch.len(), 1), |(r, _)| fit.labels[batch[r]]);
        let yn = t.input(y);
        let loss = t.bce_mean(logits, yn);
        let grads = t.backward(loss, fit.net.store.len())?;
        opt.step(&mut fit.net.store, &grads);
    }
    Ok(fit)
}

/// Discriminative score |test accuracy - 1/2|; 0 means indistinguishable.
pub fn discriminative_score(
    real: &SeriesBatch,
    synth: &SeriesBatch,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<f64> {
    let fit = disc_fit(real, synth, cfg, seed)?;
    Ok((fit.test_accuracy(false) - 0.5).abs())
}

struct ForecastNet {
    store: ParamStore,
    cell: LstmCell,
    head: Linear,
    hidden: usize,
}

impl ForecastNet {
    fn new(dim: usize, hidden: usize, rng: &mut Prng) -> Self {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, rng, "cell", dim, hidden);
        let head = Linear::new(&mut store, rng, "head", hidden, dim);
        ForecastNet { store, cell, head, hidden }
    }

    /// One-step-ahead predictions for orders 2..N given orders 1..N-1.
    fn forward(&self, t: &mut Tape, values: &Array3<f64>, idx: &[usize]) -> Vec<NodeId> {
        let b = idx.len();
        let n = values.shape()[1];
        let mut h = t.input(Arr::zeros((b, self.hidden)));
        let mut c = t.input(Arr::zeros((b, self.hidden)));
        let mut preds = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let x = order_node(t, values, idx, k);
            let (nh, nc) = self.cell.forward(t, &self.store, x, h, c);
            h = nh;
            c = nc;
            let y = self.head.forward(t, &self.store, h);
            preds.push(t.sigmoid(y));
        }
        preds
    }

    fn mae_loss(&self, t: &mut Tape, values: &Array3<f64>, idx: &[usize]) -> NodeId {
        let preds = self.forward(t, values, idx);
        let n = values.shape()[1];
        let mut per_step = Vec::with_capacity(n - 1);
        for (k, &p) in preds.iter().enumerate() {
            let target = order_node(t, values, idx, k + 1);
            per_step.push(t.mae_mean(p, target));
        }
        // mean over steps
        let mut acc = per_step[0];
        for &s in &per_step[1..] {
            acc = t.add(acc, s);
        }
        t.scale(acc, 1.0 / per_step.len() as f64)
    }
}

fn pred_split(real: &SeriesBatch, cfg: &MetricConfig, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = substream(seed, "pred-split");
    let m = real.n_samples();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng);
    let split_at = ((m as f64) * cfg.train_frac).round() as usize;
    (idx[..split_at].to_vec(), idx[split_at..].to_vec())
}

fn train_forecaster(
    train_values: &Array3<f64>,
    cfg: &MetricConfig,
    rng: &mut Prng,
) -> Result<ForecastNet> {
    let d = train_values.shape()[2];
    let hidden = d.max(cfg.hidden_min);
    let net = ForecastNet::new(d, hidden, rng);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() }, &net.store);
    let m = train_values.shape()[0];
    let mut net = net;
    for _ in 0..cfg.pred_steps {
        let batch: Vec<usize> = (0..cfg.batch_size.min(m))
            .map(|_| rng.random_range(0..m))
            .collect();
        let mut t = Tape::new();
        let loss = net.mae_loss(&mut t, train_values, &batch);
        let grads = t.backward(loss, net.store.len())?;
        opt.step(&mut net.store, &grads);
    }
    Ok(net)
}

fn forecaster_test_mae(net: &ForecastNet, values: &Array3<f64>, idx: &[usize]) -> f64 {
    let mut t = Tape::new();
    let preds = net.forward(&mut t, values, idx);
    let n = values.shape()[1];
    let d = values.shape()[2];
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for (k, &p) in preds.iter().enumerate() {
        let pv = t.value(p);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..d {
                acc += (pv[[r, j]] - values[[i, k + 1, j]]).abs();
                cnt += 1;
            }
        }
        let _ = n;
    }
    acc / cnt as f64
}

/// Train-on-synthetic, test-on-real one-step-ahead MAE over the sequence.
pub fn predictive_score(
    real: &SeriesBatch,
    synth: &SeriesBatch,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<f64> {
    if real.dim() != synth.dim() || real.len() != synth.len() {
        return Err(Error::Shape(
            "predictive score expects same-shape real and synthetic windows".into(),
        ));
    }
    let (_, test_idx) = pred_split(real, cfg, seed);
    if test_idx.is_empty() {
        return Err(Error::Data("degenerate split: no real test windows".into()));
    }
    let mut rng = substream(seed, "pred");
    let net = train_forecaster(&synth.values, cfg, &mut rng)?;
    Ok(forecaster_test_mae(&net, &real.values, &test_idx))
}

/// The "Original" row: train the forecaster on the real training split and
/// test on the same held-out real windows the synthetic run uses.
pub fn predictive_floor(real: &SeriesBatch, cfg: &MetricConfig, seed: u64) -> Result<f64> {
    let (train_idx, test_idx) = pred_split(real, cfg, seed);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Data("degenerate split for the original row".into()));
    }
    let train = real.select(&train_idx);
    let mut rng = substream(seed, "pred");
    let net = train_forecaster(&train.values, cfg, &mut rng)?;
    Ok(forecaster_test_mae(&net, &real.values, &test_idx))
}

/// Scores of one evaluation run (one seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunScores {
    pub disc: f64,
    pub pred: f64,
    pub pred_floor: Option<f64>,
    pub dataset: String,
    pub regime: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricStat { mean, std: var.sqrt() }
}

/// Aggregated multi-seed report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub disc: MetricStat,
    pub pred: MetricStat,
    pub pred_floor: Option<MetricStat>,
    pub n_runs: usize,
    pub dataset: String,
    pub regime: String,
    pub plot_paths: Vec<PathBuf>,
}

/// Mean and population standard deviation per metric across runs.
pub fn aggregate(runs: &[RunScores]) -> Result<EvalReport> {
    if runs.len() < 2 {
        return Err(Error::Data(format!("aggregate needs >= 2 runs, got {}", runs.len())));
    }
    let first = &runs[0];
    for r in runs {
        if r.regime != first.regime || r.dataset != first.dataset {
            return Err(Error::Data(format!(
                "mismatched runs in aggregate: {}/{} vs {}/{}",
                r.dataset, r.regime, first.dataset, first.regime
            )));
        }
    }
    let disc = stat(&runs.iter().map(|r| r.disc).collect::<Vec<_>>());
    let pred = stat(&runs.iter().map(|r| r.pred).collect::<Vec<_>>());
    let floors: Vec<f64> = runs.iter().filter_map(|r| r.pred_floor).collect();
    let pred_floor = (floors.len() == runs.len()).then(|| stat(&floors));
    Ok(EvalReport {
        disc,
        pred,
        pred_floor,
        n_runs: runs.len(),
        dataset: first.dataset.clone(),
        regime: first.regime.clone(),
        plot_paths: Vec::new(),
    })
}

/// Table-style ".021±.008" rendering: three decimals, no leading zero.
pub fn format_score(stat: &MetricStat) -> String {
    let fmt = |v: f64| -> String {
        let s = format!("{:.3}", v);
        if let Some(stripped) = s.strip_prefix("0.") {
            format!(".{stripped}")
        } else if let Some(stripped) = s.strip_prefix("-0.") {
            format!("-.{stripped}")
        } else {
            s
        }
    };
    format!("{}±{}", fmt(stat.mean), fmt(stat.std))
}

impl EvalReport {
    /// Human-readable table mirroring the published layout: a discriminative
    /// block and a predictive block with an Original floor row.
    pub fn table_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "dataset={} regime={} n_runs={}\n",
            self.dataset, self.regime, self.n_runs
        ));
        out.push_str("metric\tmethod\tscore\n");
        out.push_str(&format!("disc\tmodel\t{}\n", format_score(&self.disc)));
        out.push_str(&format!("pred\tmodel\t{}\n", format_score(&self.pred)));
        if let Some(floor) = &self.pred_floor {
            out.push_str(&format!("pred\toriginal\t{}\n", format_score(floor)));
        }
        out
    }

    /// Machine-readable key=value lines.
    pub fn kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("dataset={}\n", self.dataset));
        out.push_str(&format!("regime={}\n", self.regime));
        out.push_str(&format!("n_runs={}\n", self.n_runs));
        out.push_str(&format!("disc.mean={}\n", self.disc.mean));
        out.push_str(&format!("disc.std={}\n", self.disc.std));
        out.push_str(&format!("pred.mean={}\n", self.pred.mean));
        out.push_str(&format!("pred.std={}\n", self.pred.std));
        if let Some(floor) = &self.pred_floor {
            out.push_str(&format!("pred_floor.mean={}\n", floor.mean));
            out.push_str(&format!("pred_floor.std={}\n", floor.std));
        }
        for p in &self.plot_paths {
            out.push_str(&format!("plot={}\n", p.display()));
        }
        out
    }
}
