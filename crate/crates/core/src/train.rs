//! Two-phase training: autoencoder pre-training on the reconstruction loss,
//! then conditional denoising score matching in latent space, optionally
//! alternating score and codec steps.

use crate::codec::Codec;
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{Arr, NodeId, Tape};
use crate::rng::{randn, substream, Prng};
use crate::score::{time_embed, ScoreNet};
use crate::sde::{SdeSpec, TRAIN_EPS};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iter_pre: usize,
    pub iter_main: usize,
    pub use_alt: bool,
    /// One codec step per this many score steps when `use_alt` is set.
    pub alt_period: usize,
    pub batch_size: usize,
    pub lr_codec: f64,
    pub lr_score: f64,
    pub seed: u64,
    pub sde: SdeSpec,
}

impl TrainConfig {
    pub fn new(sde: SdeSpec, seed: u64) -> Self {
        TrainConfig {
            iter_pre: 50_000,
            iter_main: 40_000,
            use_alt: true,
            alt_period: 5,
            batch_size: 32,
            lr_codec: 1e-3,
            lr_score: 2e-4,
            seed,
            sde,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iter_pre == 0 || self.iter_main == 0 {
            return Err(Error::Config("iter_pre and iter_main must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draw a training mini-batch (without replacement within the batch).
pub fn sample_batch(data: &SeriesBatch, batch_size: usize, rng: &mut Prng) -> SeriesBatch {
    let n = data.n_samples();
    if batch_size >= n {
        return data.clone();
    }
    let idx = rand::seq::index::sample(rng, n, batch_size).into_vec();
    data.select(&idx)
}

/// Resumable codec pre-training state.
pub struct CodecTrainState {
    pub step: usize,
    pub opt: Adam,
    pub rng: Prng,
    pub curve: Vec<f64>,
}

pub fn init_codec_training(codec: &Codec, cfg: &TrainConfig) -> CodecTrainState {
    CodecTrainState {
        step: 0,
        opt: Adam::new(
            AdamConfig { lr: cfg.lr_codec, ..Default::default() },
            &codec.store,
        ),
        rng: substream(cfg.seed, "pretrain"),
        curve: Vec::new(),
    }
}

pub fn codec_training_steps(
    state: &mut CodecTrainState,
    codec: &mut Codec,
    data: &SeriesBatch,
    cfg: &TrainConfig,
    n_steps: usize,
) -> Result<()> {
    for _ in 0..n_steps {
        let batch = sample_batch(data, cfg.batch_size, &mut state.rng);
        let mut t = Tape::new();
        let latents = codec.encode_taped(&mut t, &batch)?;
        let times = Codec::shared_times(&batch.times)?;
        let recon = codec.decode_taped(&mut t, &latents, &times)?;
        let loss = codec.recon_loss_taped(&mut t, &recon, &batch)?;
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "codec loss became {value} at step {}",
                state.step
            )));
        }
        let grads = t.backward(loss, codec.store.len())?;
        state.opt.step(&mut codec.store, &grads);
        state.curve.push(value);
        state.step += 1;
    }
    Ok(())
}

/// Pre-train the encoder/decoder pair on the reconstruction loss. Returns the
/// per-step loss curve.
pub fn pretrain_codec(
    codec: &mut Codec,
    data: &SeriesBatch,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut state = init_codec_training(codec, cfg);
    codec_training_steps(&mut state, codec, data, cfg, cfg.iter_pre)?;
    Ok(state.curve)
}

/// One mini-batch of denoising score-matching inputs, flattened over
/// (sample, order) pairs. Kept public for instrumentation: `h_prev` is the
/// teacher-forcing condition and must always be the encoder's clean latents
/// shifted by one order.
pub struct DsmInputs {
    pub s: Vec<f64>,
    pub lambda: Vec<f64>,
    pub h0: Arr,
    pub h_prev: Arr,
    pub h_s: Arr,
    pub target: Arr,
}

/// Encode a batch (no gradients) and assemble perturbed latents, kernel-score
/// targets, and loss weights. One diffusion time per (sample, order) pair.
pub fn build_dsm_inputs(
    codec: &Codec,
    batch: &SeriesBatch,
    sde: &SdeSpec,
    rng: &mut Prng,
) -> Result<DsmInputs> {
    let lat = codec.encode(batch)?;
    let (b, n, dh) = (lat.n_samples(), lat.len(), lat.latent_dim());
    let rows = b * n;
    let mut s = Vec::with_capacity(rows);
    let mut lambda = Vec::with_capacity(rows);
    let mut h0 = Arr::zeros((rows, dh));
    let mut h_prev = Arr::zeros((rows, dh));
    for bi in 0..b {
        for ni in 0..n {
            let row = bi * n + ni;
            let sv: f64 = rng.random_range(TRAIN_EPS..=1.0);
            s.push(sv);
            lambda.push(sde.lambda_weight(sv)?);
            for j in 0..dh {
                h0[[row, j]] = lat.h[[bi, ni, j]];
                // h_prev stays zero for the first order
                if ni > 0 {
                    h_prev[[row, j]] = lat.h[[bi, ni - 1, j]];
                }
            }
        }
    }
    let noise = randn(rng, rows, dh);
    let mut h_s = Arr::zeros((rows, dh));
    let mut target = Arr::zeros((rows, dh));
    for row in 0..rows {
        let m = sde.transition(s[row])?;
        for j in 0..dh {
            h_s[[row, j]] = m.mean_coeff * h0[[row, j]] + m.std * noise[[row, j]];
            target[[row, j]] = -(h_s[[row, j]] - m.mean_coeff * h0[[row, j]]) / (m.std * m.std);
        }
    }
    Ok(DsmInputs { s, lambda, h0, h_prev, h_s, target })
}

/// λ(s)-weighted mean squared residual between a score estimate and its
/// target, as a tape node.
pub fn dsm_objective(t: &mut Tape, estimate: NodeId, target: NodeId, lambda: &[f64]) -> NodeId {
    let resid = t.sub(estimate, target);
    let sq = t.square(resid);
    let rows = t.sum_rows(sq);
    let lam = t.input(Arr::from_shape_fn((lambda.len(), 1), |(i, _)| lambda[i]));
    let weighted = t.mul_col(rows, lam);
    t.mean_all(weighted)
}

/// Build the full DSM loss for one mini-batch on a tape. Returns the loss
/// node; gradients flow into the score parameters only.
pub fn dsm_loss_taped(t: &mut Tape, score: &ScoreNet, inputs: &DsmInputs) -> NodeId {
    let temb = t.input(time_embed(&inputs.s, score.cfg.time_embed_dim));
    let h_s = t.input(inputs.h_s.clone());
    let h_prev = t.input(inputs.h_prev.clone());
    let target = t.input(inputs.target.clone());
    let m = score.forward_taped(t, &score.store, temb, h_s, h_prev);
    dsm_objective(t, m, target, &inputs.lambda)
}

/// Scalar DSM loss of one sampled mini-batch.
pub fn dsm_loss(
    score: &ScoreNet,
    codec: &Codec,
    batch: &SeriesBatch,
    sde: &SdeSpec,
    rng: &mut Prng,
) -> Result<f64> {
    let inputs = build_dsm_inputs(codec, batch, sde, rng)?;
    let mut t = Tape::new();
    let loss = dsm_loss_taped(&mut t, score, &inputs);
    let v = t.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("dsm loss is {v}")));
    }
    Ok(v)
}

/// Resumable score-training state.
pub struct ScoreTrainState {
    pub step: usize,
    pub opt_score: Adam,
    pub opt_codec: Option<Adam>,
    pub rng: Prng,
    pub rng_alt: Prng,
    pub curve: Vec<f64>,
    pub min_smoothed: f64,
}

pub fn init_score_training(score: &ScoreNet, codec: &Codec, cfg: &TrainConfig) -> ScoreTrainState {
    ScoreTrainState {
        step: 0,
        opt_score: Adam::new(
            AdamConfig { lr: cfg.lr_score, ..Default::default() },
            &score.store,
        ),
        opt_codec: cfg.use_alt.then(|| {
            Adam::new(AdamConfig { lr: cfg.lr_codec, ..Default::default() }, &codec.store)
        }),
        rng: substream(cfg.seed, "train-score"),
        rng_alt: substream(cfg.seed, "train-codec"),
        curve: Vec::new(),
        min_smoothed: f64::INFINITY,
    }
}

fn smoothed_tail(curve: &[f64], window: usize) -> f64 {
    let take = curve.len().min(window);
    curve[curve.len() - take..].iter().sum::<f64>() / take as f64
}

pub fn score_training_steps(
    state: &mut ScoreTrainState,
    score: &mut ScoreNet,
    codec: &mut Codec,
    data: &SeriesBatch,
    cfg: &TrainConfig,
    n_steps: usize,
) -> Result<()> {
    for _ in 0..n_steps {
        let batch = sample_batch(data, cfg.batch_size, &mut state.rng);
        let inputs = build_dsm_inputs(codec, &batch, &cfg.sde, &mut state.rng)?;
        let mut t = Tape::new();
        let loss = dsm_loss_taped(&mut t, score, &inputs);
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "score loss became {value} at step {}",
                state.step
            )));
        }
        let grads = t.backward(loss, score.store.len())?;
        state.opt_score.step(&mut score.store, &grads);
        score.ema.update(&score.store);
        state.curve.push(value);
        state.step += 1;

        if state.curve.len() >= 100 {
            let sm = smoothed_tail(&state.curve, 100);
            state.min_smoothed = state.min_smoothed.min(sm);
            if sm > 10.0 * state.min_smoothed {
                return Err(Error::Numeric(format!(
                    "divergence guard tripped at step {}: smoothed loss {sm} vs minimum {}",
                    state.step, state.min_smoothed
                )));
            }
        }

        if cfg.use_alt && state.step % cfg.alt_period == 0 {
            let opt = state.opt_codec.as_mut().expect("alt optimizer present");
            let batch = sample_batch(data, cfg.batch_size, &mut state.rng_alt);
            let mut t = Tape::new();
            let latents = codec.encode_taped(&mut t, &batch)?;
            let times = Codec::shared_times(&batch.times)?;
            let recon = codec.decode_taped(&mut t, &latents, &times)?;
            let loss = codec.recon_loss_taped(&mut t, &recon, &batch)?;
            let grads = t.backward(loss, codec.store.len())?;
            opt.step(&mut codec.store, &grads);
        }
    }
    Ok(())
}

/// Main-phase training of the conditional score network. With `use_alt` the
/// codec keeps taking reconstruction steps at the configured period;
/// otherwise it stays frozen. Returns the per-step DSM loss curve.
pub fn train_score(
    score: &mut ScoreNet,
    codec: &mut Codec,
    data: &SeriesBatch,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut state = init_score_training(score, codec, cfg);
    score_training_steps(&mut state, score, codec, data, cfg, cfg.iter_main)?;
    Ok(state.curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::data::synth_sines;
    use crate::score::ScoreNetConfig;

    fn toy_setup(seed: u64) -> (ScoreNet, Codec, SeriesBatch, TrainConfig) {
        let data = synth_sines(32, 2, 8, &mut substream(seed, "toy-data"));
        let codec = Codec::new(CodecConfig::regular(2, 4), seed);
        let score = ScoreNet::new(
            ScoreNetConfig::new(4).with_depth(2).with_base_channels(8),
            seed,
        )
        .unwrap();
        let mut cfg = TrainConfig::new(SdeSpec::vp_default(), seed);
        cfg.batch_size = 8;
        cfg.use_alt = false;
        (score, codec, data, cfg)
    }

    #[test]
    fn teacher_forcing_condition_is_clean_shifted_latents() {
        let (_, codec, data, cfg) = toy_setup(21);
        let mut rng = substream(1, "tf");
        let batch = sample_batch(&data, 4, &mut rng);
        let inputs = build_dsm_inputs(&codec, &batch, &cfg.sde, &mut rng).unwrap();
        let lat = codec.encode(&batch).unwrap();
        let n = batch.len();
        for bi in 0..batch.n_samples() {
            for ni in 0..n {
                for j in 0..4 {
                    let expect = if ni == 0 { 0.0 } else { lat.h[[bi, ni - 1, j]] };
                    assert_eq!(inputs.h_prev[[bi * n + ni, j]], expect);
                    assert_eq!(inputs.h0[[bi * n + ni, j]], lat.h[[bi, ni, j]]);
                }
            }
        }
    }

    #[test]
    fn perfect_estimate_has_zero_loss_and_zero_net_matches_weighted_norm() {
        let (score, codec, data, cfg) = toy_setup(22);
        let mut rng = substream(2, "dsm0");
        let batch = sample_batch(&data, 4, &mut rng);
        let inputs = build_dsm_inputs(&codec, &batch, &cfg.sde, &mut rng).unwrap();

        let mut t = Tape::new();
        let target = t.input(inputs.target.clone());
        let perfect = t.input(inputs.target.clone());
        let zero_loss = dsm_objective(&mut t, perfect, target, &inputs.lambda);
        assert_eq!(t.scalar(zero_loss), 0.0);

        // freshly initialised network has a zeroed head, so M == 0 and the
        // loss is the mean weighted squared target norm
        let mut t = Tape::new();
        let loss = dsm_loss_taped(&mut t, &score, &inputs);
        let expect: f64 = inputs
            .lambda
            .iter()
            .enumerate()
            .map(|(r, lam)| {
                lam * (0..4).map(|j| inputs.target[[r, j]].powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / inputs.lambda.len() as f64;
        assert!((t.scalar(loss) - expect).abs() < 1e-10);
        assert!(expect > 0.0);
    }

    #[test]
    fn dsm_gradients_match_finite_differences_on_probe_subset() {
        let (mut score, codec, data, cfg) = toy_setup(23);
        // non-degenerate head so head gradients are informative
        let mut rng = substream(3, "probe");
        let head_w = score
            .store
            .iter()
            .position(|(name, _)| name == "head.w")
            .unwrap();
        *score.store.value_mut(head_w) =
            randn(&mut rng, score.store.value(head_w).nrows(), 1) * 0.1;

        let batch = sample_batch(&data, 4, &mut rng);
        let inputs = build_dsm_inputs(&codec, &batch, &cfg.sde, &mut rng).unwrap();

        let mut t = Tape::new();
        let loss = dsm_loss_taped(&mut t, &score, &inputs);
        let grads = t.backward(loss, score.store.len()).unwrap();

        // 10-parameter probe spread over distinct tensors
        let mut checked = 0;
        'outer: for pid in 0..score.store.len() {
            let Some(g) = grads[pid].as_ref() else { continue };
            for (r, c) in [(0usize, 0usize), (g.nrows() - 1, g.ncols() - 1)] {
                let orig = score.store.value(pid)[[r, c]];
                let h = 1e-5;
                score.store.value_mut(pid)[[r, c]] = orig + h;
                let mut tp = Tape::new();
                let lp = dsm_loss_taped(&mut tp, &score, &inputs);
                let fp = tp.scalar(lp);
                score.store.value_mut(pid)[[r, c]] = orig - h;
                let mut tm = Tape::new();
                let lm = dsm_loss_taped(&mut tm, &score, &inputs);
                let fm = tm.scalar(lm);
                score.store.value_mut(pid)[[r, c]] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let a = g[[r, c]];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < 1e-3,
                    "param {pid} ({r},{c}): analytic {a} vs fd {fd}"
                );
                checked += 1;
                if checked >= 10 {
                    break 'outer;
                }
            }
        }
        assert!(checked >= 10, "probe subset too small: {checked}");
    }

    #[test]
    fn one_step_descent_on_fixed_minibatch() {
        let (score, codec, data, cfg) = toy_setup(24);
        let mut rng = substream(4, "descent");
        let batch = sample_batch(&data, 8, &mut rng);
        let mut decreases = 0;
        let mut mean_delta = 0.0;
        for trial in 0..50 {
            let mut trial_rng = substream(trial, "descent-trial");
            let inputs = build_dsm_inputs(&codec, &batch, &cfg.sde, &mut trial_rng).unwrap();
            let mut net = ScoreNet::new(score.cfg.clone(), 1000 + trial).unwrap();
            let mut t = Tape::new();
            let loss = dsm_loss_taped(&mut t, &net, &inputs);
            let before = t.scalar(loss);
            let grads = t.backward(loss, net.store.len()).unwrap();
            let lr = 1e-4;
            for pid in 0..net.store.len() {
                if let Some(g) = &grads[pid] {
                    let p = net.store.value_mut(pid);
                    *p -= &(g * lr);
                }
            }
            let mut t2 = Tape::new();
            let loss2 = dsm_loss_taped(&mut t2, &net, &inputs);
            let after = t2.scalar(loss2);
            if after < before {
                decreases += 1;
            }
            mean_delta += after - before;
        }
        mean_delta /= 50.0;
        assert!(decreases >= 45, "only {decreases}/50 trials decreased");
        assert!(mean_delta < 0.0, "mean loss change {mean_delta}");
    }

    #[test]
    fn frozen_codec_stays_bit_identical_without_alt() {
        let (mut score, mut codec, data, mut cfg) = toy_setup(25);
        cfg.use_alt = false;
        cfg.iter_main = 5;
        let before: Vec<Arr> = (0..codec.store.len())
            .map(|i| codec.store.value(i).clone())
            .collect();
        train_score(&mut score, &mut codec, &data, &cfg).unwrap();
        for (i, b) in before.iter().enumerate() {
            assert_eq!(codec.store.value(i), b, "codec tensor {i} moved");
        }
    }

    #[test]
    fn alternating_mode_moves_the_codec() {
        let (mut score, mut codec, data, mut cfg) = toy_setup(26);
        cfg.use_alt = true;
        cfg.alt_period = 2;
        cfg.iter_main = 6;
        let before = codec.store.value(0).clone();
        train_score(&mut score, &mut codec, &data, &cfg).unwrap();
        assert_ne!(codec.store.value(0), &before);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = || {
            let (mut score, mut codec, data, mut cfg) = toy_setup(27);
            cfg.iter_main = 8;
            let curve = train_score(&mut score, &mut codec, &data, &cfg).unwrap();
            *curve.last().unwrap()
        };
        let a = run();
        let b = run();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn pretrain_reduces_loss_on_toy_data() {
        let (_, mut codec, data, mut cfg) = toy_setup(28);
        cfg.iter_pre = 60;
        let curve = pretrain_codec(&mut codec, &data, &cfg).unwrap();
        let head = curve[..10].iter().sum::<f64>() / 10.0;
        let tail = curve[curve.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }
}
