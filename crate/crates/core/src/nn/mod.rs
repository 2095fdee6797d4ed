//! A small reverse-mode autodiff tape over `ndarray` matrices.
//!
//! Values are `Array2<f64>` with rows = batch. 1-D convolutional signals are
//! stored channel-major per row: column `c * len + l` holds channel `c` at
//! position `l`. All operations are single-threaded and deterministic, which
//! the trainer's seed-reproducibility contract relies on.
//!
//! Gradients are only tracked for leaves bound to a [`ParamStore`] entry;
//! everything else is treated as data. `backward` walks the tape in reverse
//! creation order, so accumulation order is fixed.

pub mod layers;
pub mod optim;

use crate::error::{Error, Result};
use ndarray::{Array2, Zip};

pub type Arr = Array2<f64>;

/// Immutable handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named parameter tensors shared between tapes across training steps.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    vals: Vec<Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> usize {
        self.names.push(name.into());
        self.vals.push(value);
        self.vals.len() - 1
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: usize) -> &Arr {
        &self.vals[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Arr {
        &mut self.vals[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|s| s.as_str()).zip(self.vals.iter())
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.vals.iter().map(|v| v.len()).sum()
    }
}

enum Op {
    Leaf { param: Option<usize> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a [B,F] + row [1,F], broadcast over rows.
    AddRow(NodeId, NodeId),
    /// a [B,F] * col [B,1], broadcast over columns.
    MulCol(NodeId, NodeId),
    /// y = a * mul + add (elementwise scalar affine); only the slope matters
    /// for the backward pass.
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Silu(NodeId),
    Square(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    /// [B,F] -> [B,1] row sums.
    SumRows(NodeId),
    /// [B,F] -> [1,1] mean of all entries.
    MeanAll(NodeId),
    /// Same-padded 1-D convolution, kernel 3. x: [B, c_in*len],
    /// w: [c_in*3, c_out], y: [B, c_out*len].
    Conv1d { x: NodeId, w: NodeId, c_in: usize, c_out: usize, len: usize },
    /// Average pool by 2 along the signal axis. len must be even.
    AvgPool2 { x: NodeId, c: usize, len: usize },
    /// Nearest-neighbour upsample by 2 along the signal axis.
    Upsample2 { x: NodeId, c: usize, len: usize },
    /// Per-channel bias: y[b, c*len+l] = x[b, c*len+l] + bias[b, c].
    AddChanBias { x: NodeId, bias: NodeId, c: usize, len: usize },
    /// Batched block mat-vec: a [B, m*c], b [B, c] -> y [B, m] with
    /// y[r, i] = sum_j a[r, i*c+j] * b[r, j].
    BlockMulSum { a: NodeId, b: NodeId, m: usize, c: usize },
    /// Mean binary cross-entropy with logits; targets carry no gradient.
    BceMean { logits: NodeId, targets: NodeId },
    /// Mean absolute error; targets carry no gradient.
    MaeMean { pred: NodeId, targets: NodeId },
}

/// One computation graph. Created per forward pass and discarded afterwards.
pub struct Tape {
    vals: Vec<Arr>,
    ops: Vec<Op>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new() }
    }

    fn push(&mut self, v: Arr, op: Op) -> NodeId {
        self.vals.push(v);
        self.ops.push(op);
        NodeId(self.vals.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.vals[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.vals[id.0][[0, 0]]
    }

    /// Data leaf: no gradient is tracked through it.
    pub fn input(&mut self, v: Arr) -> NodeId {
        self.push(v, Op::Leaf { param: None })
    }

    /// Parameter leaf bound to `store[id]`; `backward` reports its gradient.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> NodeId {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.0].dot(&self.vals[b.0]);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a.0] + &self.vals[b.0];
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a.0] - &self.vals[b.0];
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a.0] * &self.vals[b.0];
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.vals[a.0] + &self.vals[row.0];
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let v = &self.vals[a.0] * &self.vals[col.0];
        self.push(v, Op::MulCol(a, col))
    }

    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.vals[a.0].mapv(|x| x * mul + add);
        self.push(v, Op::Affine(a, mul))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.affine(a, k, 0.0)
    }

    /// 1 - a, used for gate complements.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.0].mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols: row mismatch");
        let mut v = Arr::zeros((va.nrows(), va.ncols() + vb.ncols()));
        v.slice_mut(ndarray::s![.., ..va.ncols()]).assign(va);
        v.slice_mut(ndarray::s![.., va.ncols()..]).assign(vb);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.vals[a.0].slice(ndarray::s![.., from..to]).to_owned();
        self.push(v, Op::SliceCols(a, from, to))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.vals[a.0];
        let mut v = Arr::zeros((va.nrows(), 1));
        for (i, row) in va.rows().into_iter().enumerate() {
            v[[i, 0]] = row.sum();
        }
        self.push(v, Op::SumRows(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.vals[a.0].mean().unwrap_or(0.0);
        self.push(Arr::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, c_in: usize, c_out: usize, len: usize) -> NodeId {
        debug_assert_eq!(self.vals[x.0].ncols(), c_in * len);
        debug_assert_eq!(self.vals[w.0].nrows(), c_in * 3);
        debug_assert_eq!(self.vals[w.0].ncols(), c_out);
        let cols = im2col_k3(&self.vals[x.0], c_in, len);
        let y2 = cols.dot(&self.vals[w.0]);
        let batch = self.vals[x.0].nrows();
        let mut y = Arr::zeros((batch, c_out * len));
        for b in 0..batch {
            for l in 0..len {
                for co in 0..c_out {
                    y[[b, co * len + l]] = y2[[b * len + l, co]];
                }
            }
        }
        self.push(y, Op::Conv1d { x, w, c_in, c_out, len })
    }

    pub fn avg_pool2(&mut self, x: NodeId, c: usize, len: usize) -> NodeId {
        assert!(len % 2 == 0, "avg_pool2 needs even length, got {len}");
        let vx = &self.vals[x.0];
        let batch = vx.nrows();
        let half = len / 2;
        let mut y = Arr::zeros((batch, c * half));
        for b in 0..batch {
            for ch in 0..c {
                for j in 0..half {
                    y[[b, ch * half + j]] =
                        0.5 * (vx[[b, ch * len + 2 * j]] + vx[[b, ch * len + 2 * j + 1]]);
                }
            }
        }
        self.push(y, Op::AvgPool2 { x, c, len })
    }

    pub fn upsample2(&mut self, x: NodeId, c: usize, len: usize) -> NodeId {
        let vx = &self.vals[x.0];
        let batch = vx.nrows();
        let mut y = Arr::zeros((batch, c * len * 2));
        for b in 0..batch {
            for ch in 0..c {
                for j in 0..len {
                    let v = vx[[b, ch * len + j]];
                    y[[b, ch * len * 2 + 2 * j]] = v;
                    y[[b, ch * len * 2 + 2 * j + 1]] = v;
                }
            }
        }
        self.push(y, Op::Upsample2 { x, c, len })
    }

    pub fn add_chan_bias(&mut self, x: NodeId, bias: NodeId, c: usize, len: usize) -> NodeId {
        let vx = &self.vals[x.0];
        let vb = &self.vals[bias.0];
        let batch = vx.nrows();
        let mut y = vx.clone();
        for b in 0..batch {
            for ch in 0..c {
                let add = vb[[b, ch]];
                for l in 0..len {
                    y[[b, ch * len + l]] += add;
                }
            }
        }
        self.push(y, Op::AddChanBias { x, bias, c, len })
    }

    pub fn block_mul_sum(&mut self, a: NodeId, b: NodeId, m: usize, c: usize) -> NodeId {
        let va = &self.vals[a.0];
        let vb = &self.vals[b.0];
        let batch = va.nrows();
        debug_assert_eq!(va.ncols(), m * c);
        debug_assert_eq!(vb.ncols(), c);
        let mut y = Arr::zeros((batch, m));
        for r in 0..batch {
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += va[[r, i * c + j]] * vb[[r, j]];
                }
                y[[r, i]] = acc;
            }
        }
        self.push(y, Op::BlockMulSum { a, b, m, c })
    }

    pub fn bce_mean(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        let l = &self.vals[logits.0];
        let t = &self.vals[targets.0];
        let mut acc = 0.0;
        Zip::from(l).and(t).for_each(|&x, &y| {
            // max(x,0) - x*y + ln(1+e^{-|x|})
            acc += x.max(0.0) - x * y + (1.0 + (-x.abs()).exp()).ln();
        });
        let v = Arr::from_elem((1, 1), acc / l.len() as f64);
        self.push(v, Op::BceMean { logits, targets })
    }

    pub fn mae_mean(&mut self, pred: NodeId, targets: NodeId) -> NodeId {
        let p = &self.vals[pred.0];
        let t = &self.vals[targets.0];
        let acc: f64 = Zip::from(p).and(t).fold(0.0, |a, &x, &y| a + (x - y).abs());
        let v = Arr::from_elem((1, 1), acc / p.len() as f64);
        self.push(v, Op::MaeMean { pred, targets })
    }

    /// Mean squared error between two nodes, as a scalar node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let d = self.sub(pred, target);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse pass from a scalar loss node. Returns per-parameter gradients
    /// indexed by `ParamStore` id (None where a parameter was unused).
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Vec<Option<Arr>>> {
        let lv = &self.vals[loss.0];
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Arr>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Arr::from_elem((1, 1), 1.0));
        let mut param_grads: Vec<Option<Arr>> = vec![None; n_params];

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[i] {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        match &mut param_grads[*pid] {
                            Some(acc) => *acc += &g,
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.vals[b.0].t());
                    let db = self.vals[a.0].t().dot(&g);
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, -g);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.vals[b.0];
                    let db = &g * &self.vals[a.0];
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Arr::zeros((1, g.ncols()));
                    for r in g.rows() {
                        for (j, v) in r.iter().enumerate() {
                            dr[[0, j]] += v;
                        }
                    }
                    accumulate(&mut grads, a.0, g);
                    accumulate(&mut grads, row.0, dr);
                }
                Op::MulCol(a, col) => {
                    let da = &g * &self.vals[col.0];
                    let prod = &g * &self.vals[a.0];
                    let mut dc = Arr::zeros((g.nrows(), 1));
                    for (i, r) in prod.rows().into_iter().enumerate() {
                        dc[[i, 0]] = r.sum();
                    }
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, col.0, dc);
                }
                Op::Affine(a, mul) => {
                    accumulate(&mut grads, a.0, &g * *mul);
                }
                Op::Sigmoid(a) => {
                    let y = &self.vals[i];
                    let da = &g * &(y * &y.mapv(|v| 1.0 - v));
                    accumulate(&mut grads, a.0, da);
                }
                Op::Tanh(a) => {
                    let y = &self.vals[i];
                    let da = &g * &y.mapv(|v| 1.0 - v * v);
                    accumulate(&mut grads, a.0, da);
                }
                Op::Relu(a) => {
                    let x = &self.vals[a.0];
                    let da = &g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a.0, da);
                }
                Op::Silu(a) => {
                    let x = &self.vals[a.0];
                    let da = &g * &x.mapv(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads, a.0, da);
                }
                Op::Square(a) => {
                    let da = &g * &(&self.vals[a.0] * 2.0);
                    accumulate(&mut grads, a.0, da);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.vals[a.0].ncols();
                    let da = g.slice(ndarray::s![.., ..na]).to_owned();
                    let db = g.slice(ndarray::s![.., na..]).to_owned();
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::SliceCols(a, from, _to) => {
                    let mut da = Arr::zeros(self.vals[a.0].raw_dim());
                    da.slice_mut(ndarray::s![.., *from..*from + g.ncols()]).assign(&g);
                    accumulate(&mut grads, a.0, da);
                }
                Op::SumRows(a) => {
                    let va = &self.vals[a.0];
                    let mut da = Arr::zeros(va.raw_dim());
                    for r in 0..va.nrows() {
                        let gv = g[[r, 0]];
                        for c in 0..va.ncols() {
                            da[[r, c]] = gv;
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::MeanAll(a) => {
                    let va = &self.vals[a.0];
                    let gv = g[[0, 0]] / va.len() as f64;
                    accumulate(&mut grads, a.0, Arr::from_elem(va.raw_dim(), gv));
                }
                Op::Conv1d { x, w, c_in, c_out, len } => {
                    let batch = self.vals[x.0].nrows();
                    // dY rearranged to [B*len, c_out]
                    let mut dy2 = Arr::zeros((batch * len, *c_out));
                    for b in 0..batch {
                        for l in 0..*len {
                            for co in 0..*c_out {
                                dy2[[b * len + l, co]] = g[[b, co * len + l]];
                            }
                        }
                    }
                    let cols = im2col_k3(&self.vals[x.0], *c_in, *len);
                    let dw = cols.t().dot(&dy2);
                    let dcols = dy2.dot(&self.vals[w.0].t());
                    let mut dx = Arr::zeros(self.vals[x.0].raw_dim());
                    for b in 0..batch {
                        for l in 0..*len {
                            for ci in 0..*c_in {
                                for k in 0..3usize {
                                    let src = l as isize + k as isize - 1;
                                    if src >= 0 && (src as usize) < *len {
                                        dx[[b, ci * len + src as usize]] +=
                                            dcols[[b * len + l, ci * 3 + k]];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                    accumulate(&mut grads, w.0, dw);
                }
                Op::AvgPool2 { x, c, len } => {
                    let batch = self.vals[x.0].nrows();
                    let half = len / 2;
                    let mut dx = Arr::zeros(self.vals[x.0].raw_dim());
                    for b in 0..batch {
                        for ch in 0..*c {
                            for j in 0..half {
                                let gv = 0.5 * g[[b, ch * half + j]];
                                dx[[b, ch * len + 2 * j]] = gv;
                                dx[[b, ch * len + 2 * j + 1]] = gv;
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::Upsample2 { x, c, len } => {
                    let batch = self.vals[x.0].nrows();
                    let mut dx = Arr::zeros(self.vals[x.0].raw_dim());
                    for b in 0..batch {
                        for ch in 0..*c {
                            for j in 0..*len {
                                dx[[b, ch * len + j]] = g[[b, ch * len * 2 + 2 * j]]
                                    + g[[b, ch * len * 2 + 2 * j + 1]];
                            }
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                }
                Op::AddChanBias { x, bias, c, len } => {
                    let batch = self.vals[x.0].nrows();
                    let mut db = Arr::zeros((batch, *c));
                    for b in 0..batch {
                        for ch in 0..*c {
                            let mut acc = 0.0;
                            for l in 0..*len {
                                acc += g[[b, ch * len + l]];
                            }
                            db[[b, ch]] = acc;
                        }
                    }
                    accumulate(&mut grads, x.0, g);
                    accumulate(&mut grads, bias.0, db);
                }
                Op::BlockMulSum { a, b, m, c } => {
                    let va = &self.vals[a.0];
                    let vb = &self.vals[b.0];
                    let batch = va.nrows();
                    let mut da = Arr::zeros(va.raw_dim());
                    let mut db = Arr::zeros(vb.raw_dim());
                    for r in 0..batch {
                        for i in 0..*m {
                            let gv = g[[r, i]];
                            for j in 0..*c {
                                da[[r, i * c + j]] = gv * vb[[r, j]];
                                db[[r, j]] += gv * va[[r, i * c + j]];
                            }
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                    accumulate(&mut grads, b.0, db);
                }
                Op::BceMean { logits, targets } => {
                    let l = &self.vals[logits.0];
                    let t = &self.vals[targets.0];
                    let scale = g[[0, 0]] / l.len() as f64;
                    let mut dl = Arr::zeros(l.raw_dim());
                    Zip::from(&mut dl).and(l).and(t).for_each(|d, &x, &y| {
                        *d = (sigmoid(x) - y) * scale;
                    });
                    accumulate(&mut grads, logits.0, dl);
                }
                Op::MaeMean { pred, targets } => {
                    let p = &self.vals[pred.0];
                    let t = &self.vals[targets.0];
                    let scale = g[[0, 0]] / p.len() as f64;
                    let mut dp = Arr::zeros(p.raw_dim());
                    Zip::from(&mut dp).and(p).and(t).for_each(|d, &x, &y| {
                        *d = (x - y).signum() * scale;
                    });
                    accumulate(&mut grads, pred.0, dp);
                }
            }
        }
        Ok(param_grads)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Arr>], idx: usize, g: Arr) {
    match &mut grads[idx] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

/// im2col for kernel size 3 with same padding; x is channel-major [B, c*len],
/// output [B*len, c*3].
fn im2col_k3(x: &Arr, c: usize, len: usize) -> Arr {
    let batch = x.nrows();
    let mut cols = Arr::zeros((batch * len, c * 3));
    for b in 0..batch {
        for l in 0..len {
            for ch in 0..c {
                for k in 0..3usize {
                    let src = l as isize + k as isize - 1;
                    if src >= 0 && (src as usize) < len {
                        cols[[b * len + l, ch * 3 + k]] = x[[b, ch * len + src as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, substream};

    /// Central finite difference of `f` w.r.t. one scalar of one parameter.
    fn numeric_grad(
        store: &mut ParamStore,
        pid: usize,
        idx: (usize, usize),
        h: f64,
        mut f: impl FnMut(&ParamStore) -> f64,
    ) -> f64 {
        let orig = store.value(pid)[idx];
        store.value_mut(pid)[idx] = orig + h;
        let fp = f(store);
        store.value_mut(pid)[idx] = orig - h;
        let fm = f(store);
        store.value_mut(pid)[idx] = orig;
        (fp - fm) / (2.0 * h)
    }

    fn check_param_grads(
        store: &mut ParamStore,
        build: impl Fn(&mut Tape, &ParamStore) -> NodeId,
        tol: f64,
    ) {
        let mut t = Tape::new();
        let loss = build(&mut t, store);
        let grads = t.backward(loss, store.len()).unwrap();
        for pid in 0..store.len() {
            let g = grads[pid].as_ref().expect("param used");
            let shape = (g.nrows(), g.ncols());
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let fd = numeric_grad(store, pid, (r, c), 1e-5, |s| {
                        let mut t = Tape::new();
                        let l = build(&mut t, s);
                        t.scalar(l)
                    });
                    let a = g[[r, c]];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (a - fd).abs() / denom < tol,
                        "param {pid} [{r},{c}]: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn dense_chain_gradients_match_fd() {
        let mut rng = substream(1, "nn-fd");
        let mut store = ParamStore::new();
        let w1 = store.add("w1", randn(&mut rng, 4, 5));
        let b1 = store.add("b1", randn(&mut rng, 1, 5));
        let w2 = store.add("w2", randn(&mut rng, 5, 3));
        let x = randn(&mut rng, 6, 4);
        let target = randn(&mut rng, 6, 3);

        check_param_grads(
            &mut store,
            move |t, s| {
                let xin = t.input(x.clone());
                let tgt = t.input(target.clone());
                let w1 = t.param(s, w1);
                let b1 = t.param(s, b1);
                let w2 = t.param(s, w2);
                let h = t.matmul(xin, w1);
                let h = t.add_row(h, b1);
                let h = t.tanh(h);
                let h = t.silu(h);
                let y = t.matmul(h, w2);
                t.mse(y, tgt)
            },
            1e-5,
        );
    }

    #[test]
    fn gate_and_reduction_gradients_match_fd() {
        let mut rng = substream(2, "nn-fd2");
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&mut rng, 4, 4));
        let x = randn(&mut rng, 3, 4);
        let lam = randn(&mut rng, 3, 1).mapv(f64::abs);

        check_param_grads(
            &mut store,
            move |t, s| {
                let xin = t.input(x.clone());
                let lam = t.input(lam.clone());
                let w = t.param(s, w);
                let h = t.matmul(xin, w);
                let a = t.sigmoid(h);
                let b = t.one_minus(a);
                let m = t.mul(a, b);
                let m = t.square(m);
                let srows = t.sum_rows(m);
                let weighted = t.mul_col(srows, lam);
                t.mean_all(weighted)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_pool_upsample_gradients_match_fd() {
        let mut rng = substream(3, "nn-fd3");
        let (c_in, c_out, len) = (2usize, 3usize, 8usize);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", randn(&mut rng, c_in * 3, c_out) * 0.5);
        let w2 = store.add("w2", randn(&mut rng, c_out * 3, 1) * 0.5);
        let bias = store.add("bias", randn(&mut rng, 2, c_out) * 0.5);
        let x = randn(&mut rng, 2, c_in * len);

        check_param_grads(
            &mut store,
            move |t, s| {
                let xin = t.input(x.clone());
                let w1 = t.param(s, w1);
                let w2 = t.param(s, w2);
                let bias = t.param(s, bias);
                let h = t.conv1d(xin, w1, c_in, c_out, len);
                let h = t.add_chan_bias(h, bias, c_out, len);
                let h = t.silu(h);
                let h = t.avg_pool2(h, c_out, len);
                let h = t.upsample2(h, c_out, len / 2);
                let y = t.conv1d(h, w2, c_out, 1, len);
                let sq = t.square(y);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn block_mul_sum_and_concat_grads_match_fd() {
        let mut rng = substream(4, "nn-fd4");
        let (m, c) = (3usize, 4usize);
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&mut rng, 5, m * c));
        let x = randn(&mut rng, 2, 5);
        let ctrl = randn(&mut rng, 2, c);

        check_param_grads(
            &mut store,
            move |t, s| {
                let xin = t.input(x.clone());
                let ctrl = t.input(ctrl.clone());
                let w = t.param(s, w);
                let f = t.matmul(xin, w);
                let f = t.tanh(f);
                let y = t.block_mul_sum(f, ctrl, m, c);
                let left = t.slice_cols(y, 0, 2);
                let right = t.slice_cols(y, 2, m);
                let cat = t.concat_cols(left, right);
                let sq = t.square(cat);
                t.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn fused_losses_match_fd() {
        let mut rng = substream(5, "nn-fd5");
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&mut rng, 4, 1));
        let x = randn(&mut rng, 8, 4);
        let y = Arr::from_shape_fn((8, 1), |(i, _)| if i % 2 == 0 { 1.0 } else { 0.0 });
        let tgt = randn(&mut rng, 8, 1);

        check_param_grads(
            &mut store,
            {
                let x = x.clone();
                move |t, s| {
                    let xin = t.input(x.clone());
                    let yin = t.input(y.clone());
                    let w = t.param(s, w);
                    let logits = t.matmul(xin, w);
                    t.bce_mean(logits, yin)
                }
            },
            1e-5,
        );

        check_param_grads(
            &mut store,
            move |t, s| {
                let xin = t.input(x.clone());
                let tin = t.input(tgt.clone());
                let w = t.param(s, w);
                let p = t.matmul(xin, w);
                t.mae_mean(p, tin)
            },
            1e-4,
        );
    }

    #[test]
    fn backward_rejects_nonscalar_and_nonfinite() {
        let mut t = Tape::new();
        let a = t.input(Arr::zeros((2, 2)));
        assert!(t.backward(a, 0).is_err());

        let mut t = Tape::new();
        let a = t.input(Arr::from_elem((1, 1), f64::NAN));
        assert!(t.backward(a, 0).is_err());
    }
}
