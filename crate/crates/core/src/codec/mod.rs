//! Autoencoders between series and latent sequences.
//!
//! Regular series use a single-layer GRU encoder and a GRU + readout
//! decoder. Irregular series use a natural-cubic-spline control path driving
//! a neural controlled differential equation as the encoder and a GRU-ODE
//! (continuous evolution between stamps, GRU jump at each stamp) as the
//! decoder. Either way the codec emits one latent per sequential order over
//! the full target grid, and the decoder always produces a complete
//! regular-grid series.

pub mod spline;

use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::nn::layers::{GruCell, Linear};
use crate::nn::{Arr, NodeId, ParamStore, Tape};
use crate::rng::substream;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use spline::{build_control_path, ControlPath};

/// Encoder outputs aligned to a series batch: one latent per order.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub h: Array3<f64>,
    pub times: Array2<f64>,
}

impl LatentSequence {
    pub fn n_samples(&self) -> usize {
        self.h.shape()[0]
    }
    pub fn len(&self) -> usize {
        self.h.shape()[1]
    }
    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
    pub fn latent_dim(&self) -> usize {
        self.h.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecArch {
    Regular,
    Irregular,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecConfig {
    pub arch: CodecArch,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Hidden width of the GRU-ODE decoder state (irregular only).
    pub decoder_hidden: usize,
    /// Fixed RK4 substeps per inter-stamp interval.
    pub ode_substeps: usize,
}

impl CodecConfig {
    pub fn regular(input_dim: usize, latent_dim: usize) -> Self {
        CodecConfig {
            arch: CodecArch::Regular,
            input_dim,
            latent_dim,
            decoder_hidden: latent_dim,
            ode_substeps: 4,
        }
    }

    pub fn irregular(input_dim: usize, latent_dim: usize, decoder_hidden: usize) -> Self {
        CodecConfig {
            arch: CodecArch::Irregular,
            input_dim,
            latent_dim,
            decoder_hidden,
            ode_substeps: 4,
        }
    }
}

struct RegularNets {
    enc: GruCell,
    dec: GruCell,
    head: Linear,
}

struct IrregularNets {
    init: Linear,
    /// NCDE vector field: latent -> latent x (input+time) matrix, through
    /// three ReLU layers of width 4*dim(x) and a Tanh output layer.
    f_layers: Vec<Linear>,
    g_reset: Linear,
    g_update: Linear,
    g_cand: Linear,
    jump: GruCell,
    head: Linear,
}

enum Nets {
    Regular(RegularNets),
    Irregular(IrregularNets),
}

/// Trainable autoencoder state: parameters plus the architecture descriptor.
pub struct Codec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    nets: Nets,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Codec {
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "codec-init");
        let dx = cfg.input_dim;
        let dh = cfg.latent_dim;
        let nets = match cfg.arch {
            CodecArch::Regular => Nets::Regular(RegularNets {
                enc: GruCell::new(&mut store, &mut rng, "enc", dx, dh),
                dec: GruCell::new(&mut store, &mut rng, "dec", dh, dh),
                head: Linear::new(&mut store, &mut rng, "head", dh, dx),
            }),
            CodecArch::Irregular => {
                let width = 4 * dx;
                let f_layers = vec![
                    Linear::new(&mut store, &mut rng, "f0", dh, width),
                    Linear::new(&mut store, &mut rng, "f1", width, width),
                    Linear::new(&mut store, &mut rng, "f2", width, width),
                    Linear::new(&mut store, &mut rng, "f3", width, dh * (dx + 1)),
                ];
                let dd = cfg.decoder_hidden;
                Nets::Irregular(IrregularNets {
                    init: Linear::new(&mut store, &mut rng, "init", dx + 1, dh),
                    f_layers,
                    g_reset: Linear::new(&mut store, &mut rng, "g_reset", dd, dd),
                    g_update: Linear::new(&mut store, &mut rng, "g_update", dd, dd),
                    g_cand: Linear::new(&mut store, &mut rng, "g_cand", dd, dd),
                    jump: GruCell::new(&mut store, &mut rng, "jump", dh, dd),
                    head: Linear::new(&mut store, &mut rng, "head", dd, dx),
                })
            }
        };
        Codec { cfg, store, nets }
    }

    /// Shared per-window stamps; errors if samples disagree.
    pub fn shared_times(batch_times: &Array2<f64>) -> Result<Vec<f64>> {
        let n = batch_times.ncols();
        let first: Vec<f64> = (0..n).map(|k| batch_times[[0, k]]).collect();
        for b in 1..batch_times.nrows() {
            for k in 0..n {
                if (batch_times[[b, k]] - first[k]).abs() > 1e-12 {
                    return Err(Error::Data(
                        "codec expects all samples on a shared stamp grid".into(),
                    ));
                }
            }
        }
        for k in 1..n {
            if first[k] <= first[k - 1] {
                return Err(Error::Data("stamps must be strictly increasing".into()));
            }
        }
        Ok(first)
    }

    /// Encode onto the tape, one latent node [batch, dim(h)] per order.
    pub fn encode_taped(&self, t: &mut Tape, batch: &SeriesBatch) -> Result<Vec<NodeId>> {
        match &self.nets {
            Nets::Regular(nets) => {
                if !batch.regular {
                    return Err(Error::Data(
                        "regular codec cannot encode an irregular batch".into(),
                    ));
                }
                let b = batch.n_samples();
                let mut h = t.input(Arr::zeros((b, self.cfg.latent_dim)));
                let mut out = Vec::with_capacity(batch.len());
                for n in 0..batch.len() {
                    let x = t.input(order_slice(batch, n));
                    h = nets.enc.forward(t, &self.store, x, h);
                    out.push(h);
                }
                Ok(out)
            }
            Nets::Irregular(nets) => {
                let times = Self::shared_times(&batch.times)?;
                let path = build_control_path(batch)?;
                self.ncde_encode_taped(t, nets, &path, &times)
            }
        }
    }

    fn field_f(&self, t: &mut Tape, nets: &IrregularNets, h: NodeId) -> NodeId {
        let mut z = h;
        for (i, layer) in nets.f_layers.iter().enumerate() {
            z = layer.forward(t, &self.store, z);
            z = if i + 1 < nets.f_layers.len() { t.relu(z) } else { t.tanh(z) };
        }
        z
    }

    fn ncde_encode_taped(
        &self,
        t: &mut Tape,
        nets: &IrregularNets,
        path: &ControlPath,
        times: &[f64],
    ) -> Result<Vec<NodeId>> {
        let dh = self.cfg.latent_dim;
        let c = self.cfg.input_dim + 1;
        let x0 = t.input(path.values_at(times[0]));
        let mut h = nets.init.forward(t, &self.store, x0);
        let mut out = Vec::with_capacity(times.len());
        out.push(h);
        for n in 1..times.len() {
            let (t0, t1) = (times[n - 1], times[n]);
            let sub = self.cfg.ode_substeps.max(1);
            let dt = (t1 - t0) / sub as f64;
            for m in 0..sub {
                let tau = t0 + m as f64 * dt;
                let xp_a = t.input(path.derivs_at(tau));
                let xp_m = t.input(path.derivs_at(tau + 0.5 * dt));
                let xp_b = t.input(path.derivs_at(tau + dt));

                let f1 = self.field_f(t, nets, h);
                let k1 = t.block_mul_sum(f1, xp_a, dh, c);
                let k1h = t.scale(k1, 0.5 * dt);
                let h2in = t.add(h, k1h);
                let f2 = self.field_f(t, nets, h2in);
                let k2 = t.block_mul_sum(f2, xp_m, dh, c);
                let k2h = t.scale(k2, 0.5 * dt);
                let h3in = t.add(h, k2h);
                let f3 = self.field_f(t, nets, h3in);
                let k3 = t.block_mul_sum(f3, xp_m, dh, c);
                let k3h = t.scale(k3, dt);
                let h4in = t.add(h, k3h);
                let f4 = self.field_f(t, nets, h4in);
                let k4 = t.block_mul_sum(f4, xp_b, dh, c);

                let k22 = t.scale(k2, 2.0);
                let k32 = t.scale(k3, 2.0);
                let sum = t.add(k1, k22);
                let sum = t.add(sum, k32);
                let sum = t.add(sum, k4);
                let step = t.scale(sum, dt / 6.0);
                h = t.add(h, step);
            }
            if t.value(h).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "encoder ode state is non-finite after stamp {n}"
                )));
            }
            out.push(h);
        }
        Ok(out)
    }

    fn field_g(&self, t: &mut Tape, nets: &IrregularNets, d: NodeId) -> NodeId {
        let r_pre = nets.g_reset.forward(t, &self.store, d);
        let r = t.relu(r_pre);
        let z_pre = nets.g_update.forward(t, &self.store, d);
        let z = t.relu(z_pre);
        let rd = t.mul(r, d);
        let u_pre = nets.g_cand.forward(t, &self.store, rd);
        let u = t.tanh(u_pre);
        let zc = t.one_minus(z);
        let ud = t.sub(u, d);
        t.mul(zc, ud)
    }

    /// Decode latent nodes (one per order) into per-order reconstruction
    /// nodes [batch, dim(x)] over the shared stamp grid.
    pub fn decode_taped(
        &self,
        t: &mut Tape,
        latents: &[NodeId],
        times: &[f64],
    ) -> Result<Vec<NodeId>> {
        if latents.len() != times.len() {
            return Err(Error::Shape(format!(
                "{} latents vs {} stamps",
                latents.len(),
                times.len()
            )));
        }
        let batch = t.value(latents[0]).nrows();
        match &self.nets {
            Nets::Regular(nets) => {
                let mut d = t.input(Arr::zeros((batch, self.cfg.latent_dim)));
                let mut out = Vec::with_capacity(latents.len());
                for &h in latents {
                    d = nets.dec.forward(t, &self.store, h, d);
                    let y = nets.head.forward(t, &self.store, d);
                    out.push(t.sigmoid(y));
                }
                Ok(out)
            }
            Nets::Irregular(nets) => {
                let mut d = t.input(Arr::zeros((batch, self.cfg.decoder_hidden)));
                let mut out = Vec::with_capacity(latents.len());
                for (n, &h) in latents.iter().enumerate() {
                    if n > 0 {
                        let (t0, t1) = (times[n - 1], times[n]);
                        let sub = self.cfg.ode_substeps.max(1);
                        let dt = (t1 - t0) / sub as f64;
                        for _ in 0..sub {
                            let k1 = self.field_g(t, nets, d);
                            let k1h = t.scale(k1, 0.5 * dt);
                            let d2 = t.add(d, k1h);
                            let k2 = self.field_g(t, nets, d2);
                            let k2h = t.scale(k2, 0.5 * dt);
                            let d3 = t.add(d, k2h);
                            let k3 = self.field_g(t, nets, d3);
                            let k3h = t.scale(k3, dt);
                            let d4 = t.add(d, k3h);
                            let k4 = self.field_g(t, nets, d4);
                            let k22 = t.scale(k2, 2.0);
                            let k32 = t.scale(k3, 2.0);
                            let sum = t.add(k1, k22);
                            let sum = t.add(sum, k32);
                            let sum = t.add(sum, k4);
                            let step = t.scale(sum, dt / 6.0);
                            d = t.add(d, step);
                        }
                        if t.value(d).iter().any(|v| !v.is_finite()) {
                            return Err(Error::Numeric(format!(
                                "decoder ode state is non-finite before stamp {n}"
                            )));
                        }
                    }
                    d = nets.jump.forward(t, &self.store, h, d);
                    let y = nets.head.forward(t, &self.store, d);
                    out.push(t.sigmoid(y));
                }
                Ok(out)
            }
        }
    }

    /// Encode without keeping gradients, as a plain latent sequence.
    pub fn encode(&self, batch: &SeriesBatch) -> Result<LatentSequence> {
        let mut t = Tape::new();
        let nodes = self.encode_taped(&mut t, batch)?;
        let (b, n, dh) = (batch.n_samples(), batch.len(), self.cfg.latent_dim);
        let mut h = Array3::zeros((b, n, dh));
        for (k, node) in nodes.iter().enumerate() {
            let v = t.value(*node);
            for row in 0..b {
                for j in 0..dh {
                    h[[row, k, j]] = v[[row, j]];
                }
            }
        }
        Ok(LatentSequence { h, times: batch.times.clone() })
    }

    /// Decode a latent sequence into a complete regular-grid batch.
    pub fn decode(&self, latents: &LatentSequence) -> Result<SeriesBatch> {
        let mut t = Tape::new();
        let times = Self::shared_times(&latents.times)?;
        let nodes: Vec<NodeId> = (0..latents.len())
            .map(|n| {
                let mut x = Arr::zeros((latents.n_samples(), latents.latent_dim()));
                for b in 0..latents.n_samples() {
                    for j in 0..latents.latent_dim() {
                        x[[b, j]] = latents.h[[b, n, j]];
                    }
                }
                t.input(x)
            })
            .collect();
        let recon = self.decode_taped(&mut t, &nodes, &times)?;
        let (b, n, dx) = (latents.n_samples(), latents.len(), self.cfg.input_dim);
        let mut values = Array3::zeros((b, n, dx));
        for (k, node) in recon.iter().enumerate() {
            let v = t.value(*node);
            for row in 0..b {
                for j in 0..dx {
                    values[[row, k, j]] = v[[row, j]];
                }
            }
        }
        Ok(SeriesBatch::regular_from_values(values))
    }

    /// Reconstruction loss node: mean squared error over observed entries.
    pub fn recon_loss_taped(
        &self,
        t: &mut Tape,
        recon: &[NodeId],
        batch: &SeriesBatch,
    ) -> Result<NodeId> {
        let observed: usize = (0..batch.n_samples()).map(|b| batch.observed_count(b)).sum();
        if observed == 0 {
            return Err(Error::Data("recon loss over an all-masked batch".into()));
        }
        let b = batch.n_samples();
        let mut acc = t.input(Arr::zeros((b, 1)));
        for (n, &pred) in recon.iter().enumerate() {
            let target = t.input(order_slice(batch, n));
            let diff = t.sub(pred, target);
            let sq = t.square(diff);
            let rows = t.sum_rows(sq);
            let mask_col = Arr::from_shape_fn((b, 1), |(i, _)| {
                if batch.mask[[i, n]] {
                    1.0
                } else {
                    0.0
                }
            });
            let m = t.input(mask_col);
            let masked = t.mul_col(rows, m);
            acc = t.add(acc, masked);
        }
        let mean = t.mean_all(acc); // sums over batch rows, divides by b
        let scale = b as f64 / (observed as f64 * self.cfg.input_dim as f64);
        Ok(t.scale(mean, scale))
    }

    /// Plain reconstruction loss between a batch and its reconstruction.
    pub fn recon_loss(batch: &SeriesBatch, recon: &SeriesBatch) -> Result<f64> {
        if batch.values.dim() != recon.values.dim() {
            return Err(Error::Shape(format!(
                "recon {:?} vs batch {:?}",
                recon.values.shape(),
                batch.values.shape()
            )));
        }
        let mut num = 0.0;
        let mut cnt = 0usize;
        for b in 0..batch.n_samples() {
            for k in 0..batch.len() {
                if !batch.mask[[b, k]] {
                    continue;
                }
                for j in 0..batch.dim() {
                    let d = recon.values[[b, k, j]] - batch.values[[b, k, j]];
                    num += d * d;
                    cnt += 1;
                }
            }
        }
        if cnt == 0 {
            return Err(Error::Data("recon loss over an all-masked batch".into()));
        }
        Ok(num / cnt as f64)
    }
}

/// Values at one order as a [batch, dim] matrix.
pub(crate) fn order_slice(batch: &SeriesBatch, n: usize) -> Arr {
    let (b, _, d) = batch.values.dim();
    Arr::from_shape_fn((b, d), |(i, j)| batch.values[[i, n, j]])
}
