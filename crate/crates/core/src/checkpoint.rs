//! Versioned checkpoints: codec and score-network parameters, and full
//! training state (optimizers plus rng positions) for exact resume. Uses the
//! same binary envelope as the dataset containers.

use crate::codec::{Codec, CodecConfig};
use crate::data::ContainerMeta;
use crate::error::{Error, Result};
use crate::nn::optim::Adam;
use crate::nn::{Arr, ParamStore};
use crate::score::{ScoreNet, ScoreNetConfig};
use crate::train::{CodecTrainState, ScoreTrainState, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::container::{read_envelope, read_f64s, write_envelope, write_f64s};

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

struct TensorList {
    metas: Vec<TensorMeta>,
    data: Vec<f64>,
}

fn store_tensors(prefix: &str, store: &ParamStore) -> TensorList {
    let mut metas = Vec::with_capacity(store.len());
    let mut data = Vec::new();
    for (name, arr) in store.iter() {
        metas.push(TensorMeta {
            name: format!("{prefix}.{name}"),
            rows: arr.nrows(),
            cols: arr.ncols(),
        });
        data.extend(arr.iter().copied());
    }
    TensorList { metas, data }
}

fn arrs_tensors(prefix: &str, arrs: &[Arr]) -> TensorList {
    let mut metas = Vec::with_capacity(arrs.len());
    let mut data = Vec::new();
    for (i, arr) in arrs.iter().enumerate() {
        metas.push(TensorMeta { name: format!("{prefix}.{i}"), rows: arr.nrows(), cols: arr.ncols() });
        data.extend(arr.iter().copied());
    }
    TensorList { metas, data }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMeta {
    step_count: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
}

fn adam_meta(a: &Adam) -> AdamMeta {
    AdamMeta {
        step_count: a.step_count,
        lr: a.cfg.lr,
        beta1: a.cfg.beta1,
        beta2: a.cfg.beta2,
        eps: a.cfg.eps,
        clip_norm: a.cfg.clip_norm,
    }
}

fn restore_adam(meta: &AdamMeta, m: Vec<Arr>, v: Vec<Arr>) -> Adam {
    Adam {
        cfg: crate::nn::optim::AdamConfig {
            lr: meta.lr,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            clip_norm: meta.clip_norm,
        },
        step_count: meta.step_count,
        m,
        v,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CodecHeader {
    kind: String,
    meta: ContainerMeta,
    cfg: CodecConfig,
    tensors: Vec<TensorMeta>,
}

pub fn save_codec(path: &Path, codec: &Codec, meta: &ContainerMeta) -> Result<()> {
    let list = store_tensors("p", &codec.store);
    let header = CodecHeader {
        kind: "codec-checkpoint".into(),
        meta: meta.clone(),
        cfg: codec.cfg.clone(),
        tensors: list.metas,
    };
    write_envelope(path, &header, |w| write_f64s(w, &list.data))
}

fn fill_store(
    store: &mut ParamStore,
    prefix: &str,
    metas: &[TensorMeta],
    data: &mut impl Iterator<Item = f64>,
) -> Result<()> {
    if metas.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, architecture expects {}",
            metas.len(),
            store.len()
        )));
    }
    for (i, tm) in metas.iter().enumerate() {
        let expect = format!("{prefix}.{}", store.name(i));
        if tm.name != expect {
            return Err(Error::Format(format!(
                "tensor {i} is '{}', expected '{expect}'",
                tm.name
            )));
        }
        let arr = store.value_mut(i);
        if (arr.nrows(), arr.ncols()) != (tm.rows, tm.cols) {
            return Err(Error::Format(format!(
                "tensor '{}' has shape {}x{}, expected {}x{}",
                tm.name,
                tm.rows,
                tm.cols,
                arr.nrows(),
                arr.ncols()
            )));
        }
        for r in 0..tm.rows {
            for c in 0..tm.cols {
                arr[[r, c]] = data
                    .next()
                    .ok_or_else(|| Error::Format("checkpoint payload truncated".into()))?;
            }
        }
    }
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<(Codec, ContainerMeta)> {
    let (header, mut file): (CodecHeader, _) = read_envelope(path)?;
    if header.kind != "codec-checkpoint" {
        return Err(Error::Format(format!(
            "{}: expected a codec checkpoint, found '{}'",
            path.display(),
            header.kind
        )));
    }
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let data = read_f64s(&mut file, total).map_err(|e| Error::io(path, e))?;
    let mut codec = Codec::new(header.cfg.clone(), 0);
    let mut it = data.into_iter();
    fill_store(&mut codec.store, "p", &header.tensors, &mut it)?;
    Ok((codec, header.meta))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreHeader {
    kind: String,
    meta: ContainerMeta,
    cfg: ScoreNetConfig,
    ema_decay: f64,
    ema_updates: u64,
    tensors: Vec<TensorMeta>,
}

pub fn save_score(path: &Path, net: &ScoreNet, meta: &ContainerMeta) -> Result<()> {
    let params = store_tensors("p", &net.store);
    let ema = arrs_tensors("ema", &net.ema.shadow);
    let mut tensors = params.metas;
    tensors.extend(ema.metas);
    let header = ScoreHeader {
        kind: "score-checkpoint".into(),
        meta: meta.clone(),
        cfg: net.cfg.clone(),
        ema_decay: net.ema.decay,
        ema_updates: net.ema.updates,
        tensors,
    };
    write_envelope(path, &header, |w| {
        write_f64s(w, &params.data)?;
        write_f64s(w, &ema.data)
    })
}

pub fn load_score(path: &Path) -> Result<(ScoreNet, ContainerMeta)> {
    let (header, mut file): (ScoreHeader, _) = read_envelope(path)?;
    if header.kind != "score-checkpoint" {
        return Err(Error::Format(format!(
            "{}: expected a score checkpoint, found '{}'",
            path.display(),
            header.kind
        )));
    }
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let data = read_f64s(&mut file, total).map_err(|e| Error::io(path, e))?;
    let mut net = ScoreNet::new(header.cfg.clone(), 0)?;
    net.ema.decay = header.ema_decay;
    net.ema.updates = header.ema_updates;
    let n = net.store.len();
    let (param_metas, ema_metas) = header.tensors.split_at(n);
    let mut it = data.into_iter();
    fill_store(&mut net.store, "p", param_metas, &mut it)?;
    for (i, tm) in ema_metas.iter().enumerate() {
        let arr = &mut net.ema.shadow[i];
        if (arr.nrows(), arr.ncols()) != (tm.rows, tm.cols) {
            return Err(Error::Format(format!("ema tensor {i} shape mismatch")));
        }
        for r in 0..tm.rows {
            for c in 0..tm.cols {
                arr[[r, c]] = it
                    .next()
                    .ok_or_else(|| Error::Format("checkpoint payload truncated".into()))?;
            }
        }
    }
    Ok((net, header.meta))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainHeader {
    kind: String,
    meta: ContainerMeta,
    train_cfg: TrainConfig,
    codec_cfg: CodecConfig,
    score_cfg: ScoreNetConfig,
    ema_decay: f64,
    ema_updates: u64,
    step: usize,
    /// None encodes the initial infinite guard floor (json has no inf)
    min_smoothed: Option<f64>,
    rng_pos: String,
    rng_alt_pos: String,
    opt_score: AdamMeta,
    opt_codec: Option<AdamMeta>,
    curve_len: usize,
    tensors: Vec<TensorMeta>,
}

/// Save a resumable snapshot of main-phase training: models, EMA, both
/// optimizers, rng positions, and the loss curve.
pub fn save_train_state(
    path: &Path,
    codec: &Codec,
    score: &ScoreNet,
    state: &ScoreTrainState,
    cfg: &TrainConfig,
    meta: &ContainerMeta,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let push = |list: TensorList, tensors: &mut Vec<TensorMeta>, payload: &mut Vec<f64>| {
        tensors.extend(list.metas);
        payload.extend(list.data);
    };
    push(store_tensors("codec", &codec.store), &mut tensors, &mut payload);
    push(store_tensors("score", &score.store), &mut tensors, &mut payload);
    push(arrs_tensors("ema", &score.ema.shadow), &mut tensors, &mut payload);
    push(arrs_tensors("opt_score.m", &state.opt_score.m), &mut tensors, &mut payload);
    push(arrs_tensors("opt_score.v", &state.opt_score.v), &mut tensors, &mut payload);
    if let Some(oc) = &state.opt_codec {
        push(arrs_tensors("opt_codec.m", &oc.m), &mut tensors, &mut payload);
        push(arrs_tensors("opt_codec.v", &oc.v), &mut tensors, &mut payload);
    }

    let header = TrainHeader {
        kind: "train-checkpoint".into(),
        meta: meta.clone(),
        train_cfg: cfg.clone(),
        codec_cfg: codec.cfg.clone(),
        score_cfg: score.cfg.clone(),
        ema_decay: score.ema.decay,
        ema_updates: score.ema.updates,
        step: state.step,
        min_smoothed: state.min_smoothed.is_finite().then_some(state.min_smoothed),
        rng_pos: state.rng.get_word_pos().to_string(),
        rng_alt_pos: state.rng_alt.get_word_pos().to_string(),
        opt_score: adam_meta(&state.opt_score),
        opt_codec: state.opt_codec.as_ref().map(adam_meta),
        curve_len: state.curve.len(),
        tensors,
    };
    write_envelope(path, &header, |w| {
        write_f64s(w, &payload)?;
        write_f64s(w, &state.curve)
    })
}

/// Restore a training snapshot saved by [`save_train_state`].
pub fn load_train_state(
    path: &Path,
) -> Result<(Codec, ScoreNet, ScoreTrainState, TrainConfig, ContainerMeta)> {
    let (header, mut file): (TrainHeader, _) = read_envelope(path)?;
    if header.kind != "train-checkpoint" {
        return Err(Error::Format(format!(
            "{}: expected a train checkpoint, found '{}'",
            path.display(),
            header.kind
        )));
    }
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let data = read_f64s(&mut file, total).map_err(|e| Error::io(path, e))?;
    let curve = read_f64s(&mut file, header.curve_len).map_err(|e| Error::io(path, e))?;
    let mut it = data.into_iter();

    let mut codec = Codec::new(header.codec_cfg.clone(), 0);
    let nc = codec.store.len();
    fill_store(&mut codec.store, "codec", &header.tensors[..nc], &mut it)?;

    let mut score = ScoreNet::new(header.score_cfg.clone(), 0)?;
    score.ema.decay = header.ema_decay;
    score.ema.updates = header.ema_updates;
    let ns = score.store.len();
    let mut offset = nc;
    fill_store(&mut score.store, "score", &header.tensors[offset..offset + ns], &mut it)?;
    offset += ns;

    let read_arrs = |count: usize,
                     metas: &[TensorMeta],
                     it: &mut std::vec::IntoIter<f64>|
     -> Result<Vec<Arr>> {
        let mut out = Vec::with_capacity(count);
        for tm in metas.iter().take(count) {
            let mut arr = Arr::zeros((tm.rows, tm.cols));
            for r in 0..tm.rows {
                for c in 0..tm.cols {
                    arr[[r, c]] = it
                        .next()
                        .ok_or_else(|| Error::Format("checkpoint payload truncated".into()))?;
                }
            }
            out.push(arr);
        }
        Ok(out)
    };

    let ema = read_arrs(ns, &header.tensors[offset..], &mut it)?;
    score.ema.shadow = ema;
    offset += ns;
    let m = read_arrs(ns, &header.tensors[offset..], &mut it)?;
    offset += ns;
    let v = read_arrs(ns, &header.tensors[offset..], &mut it)?;
    offset += ns;
    let opt_score = restore_adam(&header.opt_score, m, v);

    let opt_codec = match &header.opt_codec {
        Some(meta) => {
            let m = read_arrs(nc, &header.tensors[offset..], &mut it)?;
            offset += nc;
            let v = read_arrs(nc, &header.tensors[offset..], &mut it)?;
            Some(restore_adam(meta, m, v))
        }
        None => None,
    };

    let parse_pos = |s: &str| -> Result<u128> {
        s.parse().map_err(|_| Error::Format(format!("bad rng position '{s}'")))
    };
    let mut rng = crate::rng::substream(header.train_cfg.seed, "train-score");
    rng.set_word_pos(parse_pos(&header.rng_pos)?);
    let mut rng_alt = crate::rng::substream(header.train_cfg.seed, "train-codec");
    rng_alt.set_word_pos(parse_pos(&header.rng_alt_pos)?);

    let state = ScoreTrainState {
        step: header.step,
        opt_score,
        opt_codec,
        rng,
        rng_alt,
        curve,
        min_smoothed: header.min_smoothed.unwrap_or(f64::INFINITY),
    };
    Ok((codec, score, state, header.train_cfg, header.meta))
}

/// Snapshot of codec pre-training, for completeness of the resume surface.
pub fn save_pretrain_state(
    path: &Path,
    codec: &Codec,
    state: &CodecTrainState,
    cfg: &TrainConfig,
    meta: &ContainerMeta,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let params = store_tensors("codec", &codec.store);
    tensors.extend(params.metas);
    payload.extend(params.data);
    let m = arrs_tensors("opt.m", &state.opt.m);
    tensors.extend(m.metas);
    payload.extend(m.data);
    let v = arrs_tensors("opt.v", &state.opt.v);
    tensors.extend(v.metas);
    payload.extend(v.data);

    let header = PretrainHeader {
        kind: "pretrain-checkpoint".into(),
        meta: meta.clone(),
        train_cfg: cfg.clone(),
        codec_cfg: codec.cfg.clone(),
        step: state.step,
        rng_pos: state.rng.get_word_pos().to_string(),
        opt: adam_meta(&state.opt),
        curve_len: state.curve.len(),
        tensors,
    };
    write_envelope(path, &header, |w| {
        write_f64s(w, &payload)?;
        write_f64s(w, &state.curve)
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PretrainHeader {
    kind: String,
    meta: ContainerMeta,
    train_cfg: TrainConfig,
    codec_cfg: CodecConfig,
    step: usize,
    rng_pos: String,
    opt: AdamMeta,
    curve_len: usize,
    tensors: Vec<TensorMeta>,
}

pub fn load_pretrain_state(
    path: &Path,
) -> Result<(Codec, CodecTrainState, TrainConfig, ContainerMeta)> {
    let (header, mut file): (PretrainHeader, _) = read_envelope(path)?;
    if header.kind != "pretrain-checkpoint" {
        return Err(Error::Format(format!(
            "{}: expected a pretrain checkpoint, found '{}'",
            path.display(),
            header.kind
        )));
    }
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let data = read_f64s(&mut file, total).map_err(|e| Error::io(path, e))?;
    let curve = read_f64s(&mut file, header.curve_len).map_err(|e| Error::io(path, e))?;
    let mut it = data.into_iter();
    let mut codec = Codec::new(header.codec_cfg.clone(), 0);
    let nc = codec.store.len();
    fill_store(&mut codec.store, "codec", &header.tensors[..nc], &mut it)?;
    let mut read_arrs = |count: usize, metas: &[TensorMeta]| -> Result<Vec<Arr>> {
        let mut out = Vec::with_capacity(count);
        for tm in metas.iter().take(count) {
            let mut arr = Arr::zeros((tm.rows, tm.cols));
            for r in 0..tm.rows {
                for c in 0..tm.cols {
                    arr[[r, c]] = it
                        .next()
                        .ok_or_else(|| Error::Format("checkpoint payload truncated".into()))?;
                }
            }
            out.push(arr);
        }
        Ok(out)
    };
    let m = read_arrs(nc, &header.tensors[nc..])?;
    let v = read_arrs(nc, &header.tensors[2 * nc..])?;
    let mut rng = crate::rng::substream(header.train_cfg.seed, "pretrain");
    rng.set_word_pos(
        header
            .rng_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad rng position '{}'", header.rng_pos)))?,
    );
    let state = CodecTrainState { step: header.step, opt: restore_adam(&header.opt, m, v), rng, curve };
    Ok((codec, state, header.train_cfg, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecArch;
    use crate::data::synth_sines;
    use crate::rng::substream;
    use crate::score::ScoreNetConfig;
    use crate::train::{init_score_training, sample_batch, score_training_steps, train_score};
    use crate::sde::SdeSpec;

    #[test]
    fn codec_checkpoint_round_trip() {
        let codec = Codec::new(CodecConfig::irregular(2, 4, 8), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ckpt");
        let meta = ContainerMeta { config_hash: "h".into(), seed: 7 };
        save_codec(&path, &codec, &meta).unwrap();
        let (back, meta2) = load_codec(&path).unwrap();
        assert_eq!(back.cfg.arch, CodecArch::Irregular);
        assert_eq!(meta2.seed, 7);
        for i in 0..codec.store.len() {
            assert_eq!(back.store.value(i), codec.store.value(i));
        }
        // checkpoints survive encode/decode round trips
        let batch = synth_sines(2, 2, 6, &mut substream(1, "ckpt"));
        let missing = crate::data::inject_missing(&batch, 0.3, &mut substream(2, "ckpt")).unwrap();
        let a = codec.encode(&missing).unwrap();
        let b = back.encode(&missing).unwrap();
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn score_checkpoint_round_trip_includes_ema() {
        let mut net =
            ScoreNet::new(ScoreNetConfig::new(4).with_depth(2).with_base_channels(4), 3).unwrap();
        // make ema differ from params
        net.store.value_mut(0)[[0, 0]] += 1.0;
        net.ema.update(&net.store);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("score.ckpt");
        save_score(&path, &net, &ContainerMeta::default()).unwrap();
        let (back, _) = load_score(&path).unwrap();
        for i in 0..net.store.len() {
            assert_eq!(back.store.value(i), net.store.value(i));
            assert_eq!(back.ema.shadow[i], net.ema.shadow[i]);
        }
        assert_ne!(back.ema.shadow[0], *back.store.value(0));
    }

    #[test]
    fn train_resume_is_exact() {
        let data = synth_sines(16, 2, 6, &mut substream(4, "resume"));
        let make = || {
            let codec = Codec::new(CodecConfig::regular(2, 4), 11);
            let score = ScoreNet::new(
                ScoreNetConfig::new(4).with_depth(2).with_base_channels(4),
                11,
            )
            .unwrap();
            let mut cfg = crate::train::TrainConfig::new(SdeSpec::vp_default(), 11);
            cfg.batch_size = 4;
            cfg.use_alt = true;
            cfg.alt_period = 3;
            (codec, score, cfg)
        };

        // straight-through run
        let (mut codec_a, mut score_a, mut cfg_a) = make();
        cfg_a.iter_main = 20;
        train_score(&mut score_a, &mut codec_a, &data, &cfg_a).unwrap();

        // run 10, checkpoint, reload, run 10 more
        let (mut codec_b, mut score_b, cfg_b) = make();
        let mut state = init_score_training(&score_b, &codec_b, &cfg_b);
        score_training_steps(&mut state, &mut score_b, &mut codec_b, &data, &cfg_b, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.ckpt");
        save_train_state(&path, &codec_b, &score_b, &state, &cfg_b, &ContainerMeta::default())
            .unwrap();
        let (mut codec_c, mut score_c, mut state_c, cfg_c, _) = load_train_state(&path).unwrap();
        score_training_steps(&mut state_c, &mut score_c, &mut codec_c, &data, &cfg_c, 10).unwrap();

        for i in 0..score_a.store.len() {
            assert_eq!(score_a.store.value(i), score_c.store.value(i), "score tensor {i}");
            assert_eq!(score_a.ema.shadow[i], score_c.ema.shadow[i], "ema tensor {i}");
        }
        for i in 0..codec_a.store.len() {
            assert_eq!(codec_a.store.value(i), codec_c.store.value(i), "codec tensor {i}");
        }

        // the restored rng continues the stream without panicking
        let _ = sample_batch(&data, 4, &mut state_c.rng);
    }

    #[test]
    fn rejects_wrong_kind() {
        let codec = Codec::new(CodecConfig::regular(2, 4), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_codec(&path, &codec, &ContainerMeta::default()).unwrap();
        assert!(load_score(&path).is_err());
    }
}
