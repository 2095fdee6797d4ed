//! Parameterised building blocks: linear maps, GRU and LSTM cells.

use super::{Arr, NodeId, ParamStore, Tape};
use crate::rng::rand_uniform;
use rand::Rng;

/// Glorot-uniform initialisation.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Arr {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    rand_uniform(rng, rows, cols, -bound, bound)
}

/// Fully-connected layer y = x W + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, in_dim, out_dim));
        let b = store.add(format!("{name}.b"), Arr::zeros((1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    /// Same shape, but with all weights zero. Used for zero-init output heads.
    pub fn new_zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.w"), Arr::zeros((in_dim, out_dim)));
        let b = store.add(format!("{name}.b"), Arr::zeros((1, out_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }
}

/// Gated recurrent unit cell. Gate layout in the fused weight matrices is
/// [reset | update | candidate].
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b: usize,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), xavier(rng, in_dim, 3 * hidden));
        let w_hh = store.add(format!("{name}.w_hh"), xavier(rng, hidden, 3 * hidden));
        let b = store.add(format!("{name}.b"), Arr::zeros((1, 3 * hidden)));
        GruCell { w_ih, w_hh, b, in_dim, hidden }
    }

    /// One step: h' = (1-z)·n + z·h with
    /// r = σ(..), z = σ(..), n = tanh(W_n x + r ⊙ (U_n h)).
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: NodeId, h: NodeId) -> NodeId {
        let w_ih = t.param(store, self.w_ih);
        let w_hh = t.param(store, self.w_hh);
        let b = t.param(store, self.b);
        let gx = t.matmul(x, w_ih);
        let gx = t.add_row(gx, b);
        let gh = t.matmul(h, w_hh);
        let hd = self.hidden;

        let rx = t.slice_cols(gx, 0, hd);
        let zx = t.slice_cols(gx, hd, 2 * hd);
        let nx = t.slice_cols(gx, 2 * hd, 3 * hd);
        let rh = t.slice_cols(gh, 0, hd);
        let zh = t.slice_cols(gh, hd, 2 * hd);
        let nh = t.slice_cols(gh, 2 * hd, 3 * hd);

        let r_pre = t.add(rx, rh);
        let r = t.sigmoid(r_pre);
        let z_pre = t.add(zx, zh);
        let z = t.sigmoid(z_pre);
        let rn = t.mul(r, nh);
        let n_pre = t.add(nx, rn);
        let n = t.tanh(n_pre);

        let zc = t.one_minus(z);
        let a = t.mul(zc, n);
        let bterm = t.mul(z, h);
        t.add(a, bterm)
    }
}

/// LSTM cell; gate layout [input | forget | cell | output].
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b: usize,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), xavier(rng, in_dim, 4 * hidden));
        let w_hh = store.add(format!("{name}.w_hh"), xavier(rng, hidden, 4 * hidden));
        let b = store.add(format!("{name}.b"), Arr::zeros((1, 4 * hidden)));
        LstmCell { w_ih, w_hh, b, in_dim, hidden }
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let w_ih = t.param(store, self.w_ih);
        let w_hh = t.param(store, self.w_hh);
        let b = t.param(store, self.b);
        let gx = t.matmul(x, w_ih);
        let gx = t.add_row(gx, b);
        let gh = t.matmul(h, w_hh);
        let g = t.add(gx, gh);
        let hd = self.hidden;

        let i_pre = t.slice_cols(g, 0, hd);
        let f_pre = t.slice_cols(g, hd, 2 * hd);
        let g_pre = t.slice_cols(g, 2 * hd, 3 * hd);
        let o_pre = t.slice_cols(g, 3 * hd, 4 * hd);
        let i = t.sigmoid(i_pre);
        let f = t.sigmoid(f_pre);
        let gg = t.tanh(g_pre);
        let o = t.sigmoid(o_pre);

        let fc = t.mul(f, c);
        let ig = t.mul(i, gg);
        let c_new = t.add(fc, ig);
        let ct = t.tanh(c_new);
        let h_new = t.mul(o, ct);
        (h_new, c_new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, substream};

    #[test]
    fn zero_weight_gru_emits_zeros_from_zero_state() {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "gru-zero");
        let cell = GruCell::new(&mut store, &mut rng, "g", 3, 4);
        for id in [cell.w_ih, cell.w_hh, cell.b] {
            store.value_mut(id).fill(0.0);
        }
        let mut t = Tape::new();
        let x = t.input(randn(&mut rng, 2, 3));
        let mut h = t.input(Arr::zeros((2, 4)));
        for _ in 0..5 {
            h = cell.forward(&mut t, &store, x, h);
        }
        assert!(t.value(h).iter().all(|v| v.abs() == 0.0));
    }

    #[test]
    fn gru_gradients_match_fd() {
        let mut store = ParamStore::new();
        let mut rng = substream(1, "gru-fd");
        let cell = GruCell::new(&mut store, &mut rng, "g", 2, 3);
        let x1 = randn(&mut rng, 2, 2);
        let x2 = randn(&mut rng, 2, 2);
        let tgt = randn(&mut rng, 2, 3);

        let run = |s: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let h0 = t.input(Arr::zeros((2, 3)));
            let x1 = t.input(x1.clone());
            let x2 = t.input(x2.clone());
            let tg = t.input(tgt.clone());
            let h1 = cell.forward(&mut t, s, x1, h0);
            let h2 = cell.forward(&mut t, s, x2, h1);
            let l = t.mse(h2, tg);
            t.scalar(l)
        };

        let mut t = Tape::new();
        let h0 = t.input(Arr::zeros((2, 3)));
        let x1n = t.input(x1.clone());
        let x2n = t.input(x2.clone());
        let tg = t.input(tgt.clone());
        let h1 = cell.forward(&mut t, &store, x1n, h0);
        let h2 = cell.forward(&mut t, &store, x2n, h1);
        let loss = t.mse(h2, tg);
        let grads = t.backward(loss, store.len()).unwrap();

        for pid in 0..store.len() {
            let g = grads[pid].as_ref().unwrap();
            // spot-check a handful of coordinates per tensor
            for (r, c) in [(0, 0), (0, 1), (g.nrows() - 1, g.ncols() - 1)] {
                let orig = store.value(pid)[[r, c]];
                store.value_mut(pid)[[r, c]] = orig + 1e-5;
                let fp = run(&store);
                store.value_mut(pid)[[r, c]] = orig - 1e-5;
                let fm = run(&store);
                store.value_mut(pid)[[r, c]] = orig;
                let fd = (fp - fm) / 2e-5;
                let a = g[[r, c]];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                    "pid {pid} ({r},{c}): {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn lstm_step_is_finite_and_differentiable() {
        let mut store = ParamStore::new();
        let mut rng = substream(2, "lstm");
        let cell = LstmCell::new(&mut store, &mut rng, "l", 3, 4);
        let mut t = Tape::new();
        let x = t.input(randn(&mut rng, 5, 3));
        let h = t.input(Arr::zeros((5, 4)));
        let c = t.input(Arr::zeros((5, 4)));
        let (h1, c1) = cell.forward(&mut t, &store, x, h, c);
        let (h2, _c2) = cell.forward(&mut t, &store, x, h1, c1);
        let sq = t.square(h2);
        let loss = t.mean_all(sq);
        let grads = t.backward(loss, store.len()).unwrap();
        assert!(grads.iter().all(|g| g.is_some()));
        assert!(t.value(h2).iter().all(|v| v.is_finite()));
    }
}
