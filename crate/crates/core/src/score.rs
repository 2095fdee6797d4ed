//! Conditional score network: a 1-D convolutional U-net over the latent
//! feature axis. The diffused latent and the previous clean latent enter as
//! two channels of a length-dim(h) signal; a sinusoidal embedding of the
//! diffusion time is injected as a per-channel bias at every resolution.

use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::optim::Ema;
use crate::nn::{Arr, NodeId, ParamStore, Tape};
use crate::rng::substream;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    ChannelConcat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub latent_dim: usize,
    /// Number of resolution levels (downsampling happens depth-1 times).
    pub depth: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub cond_mode: CondMode,
}

impl ScoreNetConfig {
    pub fn new(latent_dim: usize) -> Self {
        ScoreNetConfig {
            latent_dim,
            depth: 4,
            base_channels: 32,
            time_embed_dim: 32,
            cond_mode: CondMode::ChannelConcat,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    /// Signal length after padding to a multiple of 2^(depth-1).
    pub fn padded_len(&self) -> usize {
        let unit = 1usize << (self.depth - 1);
        self.latent_dim.div_ceil(unit) * unit
    }

    fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("unet depth must be >= 2, got {}", self.depth)));
        }
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config("latent_dim and base_channels must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and >= 2".into()));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of diffusion times, one row per batch element.
/// Frequencies are geometric between 1 and 50, low enough that the embedding
/// is smooth in s while the unit-frequency pair keeps it injective on [0,1].
pub fn time_embed(s: &[f64], dim: usize) -> Arr {
    let pairs = dim / 2;
    let mut out = Arr::zeros((s.len(), dim));
    for (row, &sv) in s.iter().enumerate() {
        for i in 0..pairs {
            let expo = if pairs > 1 { i as f64 / (pairs - 1) as f64 } else { 0.0 };
            let omega = 50f64.powf(expo);
            out[[row, 2 * i]] = (omega * sv).sin();
            out[[row, 2 * i + 1]] = (omega * sv).cos();
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    b: usize,
    c_in: usize,
    c_out: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let bound = (6.0 / (c_in * 3 + c_out) as f64).sqrt();
        let w = store.add(
            format!("{name}.w"),
            crate::rng::rand_uniform(rng, c_in * 3, c_out, -bound, bound),
        );
        let b = store.add(format!("{name}.b"), Arr::zeros((1, c_out)));
        Conv { w, b, c_in, c_out }
    }

    fn new_zeroed(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Arr::zeros((c_in * 3, c_out)));
        let b = store.add(format!("{name}.b"), Arr::zeros((1, c_out)));
        Conv { w, b, c_in, c_out }
    }

    fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        len: usize,
        ones: NodeId,
    ) -> NodeId {
        let w = t.param(store, self.w);
        let y = t.conv1d(x, w, self.c_in, self.c_out, len);
        let b = t.param(store, self.b);
        let brow = t.matmul(ones, b);
        t.add_chan_bias(y, brow, self.c_out, len)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    temb: Linear,
    conv2: Conv,
}

impl Block {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
    ) -> Self {
        Block {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), c_in, c_out),
            temb: Linear::new(store, rng, &format!("{name}.temb"), temb_dim, c_out),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out),
        }
    }

    fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        temb: NodeId,
        len: usize,
        ones: NodeId,
    ) -> NodeId {
        let h = self.conv1.forward(t, store, x, len, ones);
        let tb = self.temb.forward(t, store, temb);
        let h = t.add_chan_bias(h, tb, self.conv1.c_out, len);
        let h = t.silu(h);
        let h = self.conv2.forward(t, store, h, len, ones);
        t.silu(h)
    }
}

/// Score network parameters plus the EMA shadow used at sampling time.
pub struct ScoreNet {
    pub cfg: ScoreNetConfig,
    pub store: ParamStore,
    pub ema: Ema,
    temb_proj: Linear,
    stem: Conv,
    down: Vec<Block>,
    up: Vec<Block>,
    head: Conv,
}

impl ScoreNet {
    pub fn new(cfg: ScoreNetConfig, seed: u64) -> Result<ScoreNet> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "score-init");
        let temb_proj = Linear::new(&mut store, &mut rng, "temb", cfg.time_embed_dim, cfg.time_embed_dim);
        let stem = Conv::new(&mut store, &mut rng, "stem", 2, cfg.base_channels);
        let channels: Vec<usize> = (0..cfg.depth).map(|i| cfg.base_channels << i).collect();
        let mut down = Vec::new();
        for i in 0..cfg.depth {
            let c_in = if i == 0 { cfg.base_channels } else { channels[i - 1] };
            down.push(Block::new(&mut store, &mut rng, &format!("down{i}"), c_in, channels[i], cfg.time_embed_dim));
        }
        let mut up = Vec::new();
        for i in (0..cfg.depth - 1).rev() {
            let c_in = channels[i + 1] + channels[i];
            up.push(Block::new(&mut store, &mut rng, &format!("up{i}"), c_in, channels[i], cfg.time_embed_dim));
        }
        let head = Conv::new_zeroed(&mut store, "head", cfg.base_channels, 1);
        let ema = Ema::new(0.999, &store);
        Ok(ScoreNet { cfg, store, ema, temb_proj, stem, down, up, head })
    }

    /// Build the forward pass on a tape. `h_s` and `h_prev` are
    /// [batch, latent_dim]; the result has the same shape.
    pub fn forward_taped(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        temb_raw: NodeId,
        h_s: NodeId,
        h_prev: NodeId,
    ) -> NodeId {
        let batch = t.value(h_s).nrows();
        let dh = self.cfg.latent_dim;
        let pad = self.cfg.padded_len();
        let ones = t.input(Arr::from_elem((batch, 1), 1.0));

        let temb = self.temb_proj.forward(t, store, temb_raw);
        let temb = t.silu(temb);

        let pad_signal = |t: &mut Tape, x: NodeId| -> NodeId {
            if pad == dh {
                x
            } else {
                let zeros = t.input(Arr::zeros((batch, pad - dh)));
                t.concat_cols(x, zeros)
            }
        };
        let a = pad_signal(t, h_s);
        let b = pad_signal(t, h_prev);
        // channel-major concat: [h_s | h_prev] as 2 channels of length pad
        let x = t.concat_cols(a, b);

        let mut len = pad;
        let mut h = self.stem.forward(t, store, x, len, ones);
        let mut skips = Vec::new();
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(t, store, h, temb, len, ones);
            if i + 1 < self.down.len() {
                skips.push((h, len));
                h = t.avg_pool2(h, block.conv2.c_out, len);
                len /= 2;
            }
        }
        let channels: Vec<usize> = (0..self.cfg.depth).map(|i| self.cfg.base_channels << i).collect();
        for (bi, block) in self.up.iter().enumerate() {
            let level = self.cfg.depth - 2 - bi;
            let (skip, skip_len) = skips.pop().expect("skip per up block");
            h = t.upsample2(h, channels[level + 1], len);
            len *= 2;
            debug_assert_eq!(skip_len, len);
            h = t.concat_cols(h, skip);
            h = block.forward(t, store, h, temb, len, ones);
        }
        let out = self.head.forward(t, store, h, len, ones);
        if pad == dh {
            out
        } else {
            t.slice_cols(out, 0, dh)
        }
    }

    /// Inference entry point. Validates domains and finiteness, runs the
    /// forward pass with either the live or the EMA parameters.
    pub fn score(&self, s: &[f64], h_s: &Arr, h_prev: &Arr, use_ema: bool) -> Result<Arr> {
        if h_s.raw_dim() != h_prev.raw_dim()
            || h_s.nrows() != s.len()
            || h_s.ncols() != self.cfg.latent_dim
        {
            return Err(Error::Shape(format!(
                "score_forward: s has {} rows, h_s {:?}, h_prev {:?}, latent_dim {}",
                s.len(),
                h_s.shape(),
                h_prev.shape(),
                self.cfg.latent_dim
            )));
        }
        for &sv in s {
            if !(sv > 0.0 && sv <= 1.0) {
                return Err(Error::Domain(format!("diffusion time {sv} outside (0,1]")));
            }
        }
        if h_s.iter().chain(h_prev.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input to score network".into()));
        }
        let shadow;
        let store = if use_ema {
            shadow = self.ema.as_store(&self.store);
            &shadow
        } else {
            &self.store
        };
        let mut t = Tape::new();
        let temb = t.input(time_embed(s, self.cfg.time_embed_dim));
        let hs = t.input(h_s.clone());
        let hp = t.input(h_prev.clone());
        let out = self.forward_taped(&mut t, store, temb, hs, hp);
        Ok(t.value(out).clone())
    }
}
