//! Reverse-mode automatic differentiation over a per-sample tape.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are either
//! constants or references into a [`ParamStore`]; calling [`Graph::backward`]
//! replays the tape in reverse and returns gradients for every parameter that
//! the loss depends on. There is no batch dimension: batching is an outer loop
//! over samples, each with its own graph.

use std::collections::HashMap;

use crate::error::{Result, ScaiError};
use crate::tensor::{self, active_runs, conv_out_width, ConvGeom, Tensor};

/// Probability floor applied before every logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        let id = self.tensors.len();
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Gradients for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.grads.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn as_slices(&self) -> &[Vec<f64>] {
        &self.grads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        runs: Vec<(usize, usize)>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Pool {
        x: Var,
        channels: usize,
        width: usize,
    },
    Softmax(Var),
    Add(Var, Var),
    MaskedAdd {
        base: Var,
        delta: Var,
        mask: Vec<bool>,
    },
    AddScalar {
        row: Var,
        s: Var,
    },
    HaltWeights {
        hs: Vec<Var>,
        n: Vec<usize>,
    },
    WeightedSum {
        xs: Vec<Var>,
        p: Var,
    },
    PonderMean {
        p: Var,
        n: Vec<usize>,
    },
    CrossEntropy {
        probs: Var,
        label: usize,
    },
    KlDiv {
        teacher: Var,
        student: Var,
    },
    Sum(Vec<Var>),
    Scale(Var, f64),
}

struct Node {
    shape: Vec<usize>,
    // Empty for parameter leaves, which read from the store.
    value: Vec<f64>,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, dim: &'static str, expected: usize, found: usize) -> ScaiError {
    ScaiError::ShapeMismatch {
        op,
        dim,
        expected,
        found,
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        #[cfg(debug_assertions)]
        if value.iter().any(|v| !v.is_finite()) {
            panic!("{}", ScaiError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant)
    }

    /// Leaf referencing a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let shape = self.store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// 1-D convolution of `x: [C_in, W]` with `w: [C_out, C_in, K]`.
    ///
    /// With a mask (stride 1, same-width output only) the output is computed
    /// at masked positions and is exactly zero elsewhere.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 {
            return Err(mismatch("conv1d", "input rank", 2, xs.len()));
        }
        if ws.len() != 3 {
            return Err(mismatch("conv1d", "kernel rank", 3, ws.len()));
        }
        let (c_in, w_in) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return Err(mismatch("conv1d", "input channels", ws[1], c_in));
        }
        if stride == 0 {
            return Err(mismatch("conv1d", "stride", 1, 0));
        }
        if k > w_in + 2 * padding {
            return Err(mismatch("conv1d", "kernel width", w_in + 2 * padding, k));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.iter().product::<usize>() != c_out {
                return Err(mismatch("conv1d", "bias length", c_out, bs.iter().product()));
            }
        }
        let w_out = conv_out_width(w_in, k, stride, padding);
        if let Some(m) = mask {
            if stride != 1 || w_out != w_in {
                return Err(mismatch("conv1d", "masked output width", w_in, w_out));
            }
            if m.len() != w_out {
                return Err(mismatch("conv1d", "mask length", w_out, m.len()));
            }
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            k,
            w_in,
            w_out,
            stride,
            pad: padding,
        };
        let runs = active_runs(mask, w_out);
        let mut out = vec![0.0; c_out * w_out];
        tensor::conv1d_forward(
            &geom,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &runs,
            &mut out,
        );
        Ok(self.push(
            vec![c_out, w_out],
            out,
            Op::Conv1d {
                x,
                w,
                b,
                geom,
                runs,
            },
        ))
    }

    /// `w: [O, D]`, `x: [D]` (any shape with D elements), `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(mismatch("linear", "weight rank", 2, ws.len()));
        }
        let (o, d) = (ws[0], ws[1]);
        let xd = self.value(x).len();
        if xd != d {
            return Err(mismatch("linear", "input dimension", d, xd));
        }
        let bd = self.value(b).len();
        if bd != o {
            return Err(mismatch("linear", "bias dimension", o, bd));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let out: Vec<f64> = (0..o)
            .map(|r| {
                wv[r * d..(r + 1) * d]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + bv[r]
            })
            .collect();
        Ok(self.push(vec![o], out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| tensor::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid(x))
    }

    /// Per-channel mean over the width axis: `[C, W] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (channels, width) = match s.as_slice() {
            [w] => (1, *w),
            [c, w] => (*c, *w),
            _ => (1, s.iter().product()),
        };
        let xv = self.value(x);
        let out = (0..channels)
            .map(|c| xv[c * width..(c + 1) * width].iter().sum::<f64>() / width as f64)
            .collect();
        self.push(
            vec![channels],
            out,
            Op::Pool {
                x,
                channels,
                width,
            },
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = tensor::softmax(self.value(x));
        let n = out.len();
        self.push(vec![n], out, Op::Softmax(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                "add",
                "element count",
                self.value(a).len(),
                self.value(b).len(),
            ));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b)))
    }

    /// `base + delta` on masked columns of a `[C, W]` map; unmasked columns
    /// are copied from `base` bit for bit.
    pub fn masked_add(&mut self, base: Var, delta: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(base).to_vec();
        if s != self.shape(delta) {
            return Err(mismatch(
                "masked_add",
                "element count",
                self.value(base).len(),
                self.value(delta).len(),
            ));
        }
        let width = *s.last().unwrap_or(&0);
        if mask.len() != width {
            return Err(mismatch("masked_add", "mask length", width, mask.len()));
        }
        let bv = self.value(base);
        let dv = self.value(delta);
        let out = bv
            .iter()
            .zip(dv)
            .enumerate()
            .map(|(idx, (b, d))| if mask[idx % width] { b + d } else { *b })
            .collect();
        Ok(self.push(
            s,
            out,
            Op::MaskedAdd {
                base,
                delta,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Broadcasts a one-element `s` over every entry of `row`, returning `[W]`.
    pub fn add_scalar(&mut self, row: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("add_scalar", "scalar length", 1, self.value(s).len()));
        }
        let sv = self.value(s)[0];
        let out: Vec<f64> = self.value(row).iter().map(|v| v + sv).collect();
        let n = out.len();
        Ok(self.push(vec![n], out, Op::AddScalar { row, s }))
    }

    /// Halting distribution `p: [units, W]` from the per-unit scores.
    ///
    /// `hs[s]` holds unit `s`'s score at every position; `n[i]` is the
    /// (1-based) unit at which position `i` halts. Entries before the halt
    /// unit copy the score, the halt unit receives the retainer
    /// `1 - sum(h before halt)`, later entries are zero.
    pub fn halt_weights(&mut self, hs: &[Var], n: &[usize], units: usize) -> Result<Var> {
        let width = n.len();
        for &h in hs {
            if self.value(h).len() != width {
                return Err(mismatch("halt_weights", "score width", width, self.value(h).len()));
            }
        }
        let mut p = vec![0.0; units * width];
        for (i, &ni) in n.iter().enumerate() {
            if ni == 0 || ni > units || ni - 1 > hs.len() {
                return Err(mismatch("halt_weights", "halt unit", units, ni));
            }
            let mut cum = 0.0;
            for (s, &h) in hs.iter().enumerate().take(ni - 1) {
                let hv = self.value(h)[i];
                p[s * width + i] = hv;
                cum += hv;
            }
            p[(ni - 1) * width + i] = 1.0 - cum;
        }
        Ok(self.push(
            vec![units, width],
            p,
            Op::HaltWeights {
                hs: hs.to_vec(),
                n: n.to_vec(),
            },
        ))
    }

    /// `out[c, i] = sum_s p[s, i] * xs[s][c, i]`.
    pub fn weighted_sum(&mut self, xs: &[Var], p: Var) -> Result<Var> {
        let ps = self.shape(p).to_vec();
        if ps.len() != 2 || ps[0] != xs.len() {
            return Err(mismatch("weighted_sum", "unit count", xs.len(), ps[0]));
        }
        let width = ps[1];
        let shape = self.shape(xs[0]).to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        let pv = self.value(p).to_vec();
        for (s, &x) in xs.iter().enumerate() {
            if self.shape(x) != shape.as_slice() || shape.last() != Some(&width) {
                return Err(mismatch("weighted_sum", "feature width", width, *self.shape(x).last().unwrap_or(&0)));
            }
            let xv = self.value(x);
            let prow = &pv[s * width..(s + 1) * width];
            for (row_out, row_x) in out.chunks_mut(width).zip(xv.chunks(width)) {
                for ((o, xval), pw) in row_out.iter_mut().zip(row_x).zip(prow) {
                    *o += pw * xval;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::WeightedSum {
                xs: xs.to_vec(),
                p,
            },
        ))
    }

    /// Mean over positions of `N + R`, with `R` read from the halt unit row of `p`.
    pub fn ponder_mean(&mut self, p: Var, n: &[usize]) -> Var {
        let width = n.len();
        let pv = self.value(p);
        let total: f64 = n
            .iter()
            .enumerate()
            .map(|(i, &ni)| ni as f64 + pv[(ni - 1) * width + i])
            .sum();
        self.push(
            vec![1],
            vec![total / width as f64],
            Op::PonderMean { p, n: n.to_vec() },
        )
    }

    /// `-log(max(probs[label], clamp))`.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let pv = self.value(probs);
        if label >= pv.len() {
            return Err(ScaiError::LabelOutOfRange {
                label,
                classes: pv.len(),
            });
        }
        let loss = -pv[label].max(PROB_CLAMP).ln();
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { probs, label }))
    }

    /// `KL(teacher || student)`; the teacher is treated as a constant.
    pub fn kl_div(&mut self, teacher: Var, student: Var) -> Result<Var> {
        let (t, s) = (self.value(teacher), self.value(student));
        if t.len() != s.len() {
            return Err(mismatch("kl_div", "class count", t.len(), s.len()));
        }
        let loss = kl_value(t, s);
        Ok(self.push(vec![1], vec![loss], Op::KlDiv { teacher, student }))
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let total = terms.iter().map(|&t| self.value(t).iter().sum::<f64>()).sum();
        self.push(vec![1], vec![total], Op::Sum(terms.to_vec()))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x, k))
    }

    /// Backpropagates from a scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(self.store);
        self.backward_into(loss, &mut out);
        out
    }

    /// Same as [`Graph::backward`] but accumulates into an existing buffer.
    pub fn backward_into(&self, loss: Var, out: &mut ParamGrads) {
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0; self.value(loss).len()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, f: &mut dyn FnMut(&mut [f64])| {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
                f(slot);
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (a, b) in out.grads[id.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    geom,
                    runs,
                } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let zeros = |v: Var| vec![0.0; self.value(v).len()];
                    let mut gi = self
                        .needs_grad(*x)
                        .then(|| grads[x.0].take().unwrap_or_else(|| zeros(*x)));
                    let mut gw = grads[w.0].take().unwrap_or_else(|| zeros(*w));
                    let mut gb = b.map(|b| grads[b.0].take().unwrap_or_else(|| zeros(b)));
                    tensor::conv1d_backward(
                        geom,
                        xv,
                        wv,
                        &g,
                        runs,
                        gi.as_deref_mut(),
                        Some(&mut gw),
                        gb.as_deref_mut(),
                    );
                    if gi.is_some() {
                        grads[x.0] = gi;
                    }
                    grads[w.0] = Some(gw);
                    if let Some(b) = b {
                        grads[b.0] = gb;
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let d = xv.len();
                    acc(&mut grads, *b, &mut |s| add_into(s, &g));
                    acc(&mut grads, *w, &mut |s| {
                        for (r, gr) in g.iter().enumerate() {
                            for (sv, xval) in s[r * d..(r + 1) * d].iter_mut().zip(xv) {
                                *sv += gr * xval;
                            }
                        }
                    });
                    if self.needs_grad(*x) {
                        acc(&mut grads, *x, &mut |s| {
                            for (r, gr) in g.iter().enumerate() {
                                for (sv, wval) in s.iter_mut().zip(&wv[r * d..(r + 1) * d]) {
                                    *sv += gr * wval;
                                }
                            }
                        });
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, &mut |s| {
                        for ((sv, gv), xval) in s.iter_mut().zip(&g).zip(xv) {
                            if *xval > 0.0 {
                                *sv += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    acc(&mut grads, *x, &mut |s| {
                        for ((sv, gv), y) in s.iter_mut().zip(&g).zip(yv) {
                            *sv += gv * y * (1.0 - y);
                        }
                    });
                }
                Op::Pool {
                    x,
                    channels,
                    width,
                } => {
                    let inv = 1.0 / *width as f64;
                    acc(&mut grads, *x, &mut |s| {
                        for c in 0..*channels {
                            let gc = g[c] * inv;
                            s[c * width..(c + 1) * width].iter_mut().for_each(|v| *v += gc);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let yv = &node.value;
                    let dot: f64 = g.iter().zip(yv).map(|(a, b)| a * b).sum();
                    acc(&mut grads, *x, &mut |s| {
                        for ((sv, gv), y) in s.iter_mut().zip(&g).zip(yv) {
                            *sv += y * (gv - dot);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &mut |s| add_into(s, &g));
                    acc(&mut grads, *b, &mut |s| add_into(s, &g));
                }
                Op::MaskedAdd { base, delta, mask } => {
                    let width = mask.len();
                    acc(&mut grads, *base, &mut |s| add_into(s, &g));
                    acc(&mut grads, *delta, &mut |s| {
                        for (idx, (sv, gv)) in s.iter_mut().zip(&g).enumerate() {
                            if mask[idx % width] {
                                *sv += gv;
                            }
                        }
                    });
                }
                Op::AddScalar { row, s: sc } => {
                    acc(&mut grads, *row, &mut |s| add_into(s, &g));
                    let total: f64 = g.iter().sum();
                    acc(&mut grads, *sc, &mut |s| s[0] += total);
                }
                Op::HaltWeights { hs, n } => {
                    let width = n.len();
                    // dp[s,i]/dh[t,i] = 1 for s = t < N-1; dp[N-1,i]/dh[t,i] = -1 for t < N-1.
                    for (t, &h) in hs.iter().enumerate() {
                        if !n.iter().any(|&ni| t + 1 < ni) {
                            continue;
                        }
                        acc(&mut grads, h, &mut |s| {
                            for (i, &ni) in n.iter().enumerate() {
                                if t + 1 < ni {
                                    s[i] += g[t * width + i] - g[(ni - 1) * width + i];
                                }
                            }
                        });
                    }
                }
                Op::WeightedSum { xs, p } => {
                    let pv = self.value(*p);
                    let width = self.shape(*p)[1];
                    let mut gp = vec![0.0; pv.len()];
                    for (s_idx, &x) in xs.iter().enumerate() {
                        let xv = self.value(x);
                        let prow = &pv[s_idx * width..(s_idx + 1) * width];
                        let gprow = &mut gp[s_idx * width..(s_idx + 1) * width];
                        for (row_g, row_x) in g.chunks(width).zip(xv.chunks(width)) {
                            for ((gpv, gv), xval) in gprow.iter_mut().zip(row_g).zip(row_x) {
                                *gpv += gv * xval;
                            }
                        }
                        if prow.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        acc(&mut grads, x, &mut |s| {
                            for (row_s, row_g) in s.chunks_mut(width).zip(g.chunks(width)) {
                                for ((sv, gv), pw) in row_s.iter_mut().zip(row_g).zip(prow) {
                                    *sv += gv * pw;
                                }
                            }
                        });
                    }
                    acc(&mut grads, *p, &mut |s| add_into(s, &gp));
                }
                Op::PonderMean { p, n } => {
                    let width = n.len();
                    let k = g[0] / width as f64;
                    acc(&mut grads, *p, &mut |s| {
                        for (i, &ni) in n.iter().enumerate() {
                            s[(ni - 1) * width + i] += k;
                        }
                    });
                }
                Op::CrossEntropy { probs, label } => {
                    let pv = self.value(*probs);
                    let pl = pv[*label];
                    if pl > PROB_CLAMP {
                        acc(&mut grads, *probs, &mut |s| s[*label] -= g[0] / pl);
                    }
                }
                Op::KlDiv { teacher, student } => {
                    let tv = self.value(*teacher);
                    let sv = self.value(*student);
                    acc(&mut grads, *student, &mut |s| {
                        for ((slot, t), st) in s.iter_mut().zip(tv).zip(sv) {
                            if *st > PROB_CLAMP && *t > 0.0 {
                                *slot -= g[0] * t / st;
                            }
                        }
                    });
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        acc(&mut grads, t, &mut |s| s.iter_mut().for_each(|v| *v += g[0]));
                    }
                }
                Op::Scale(x, k) => {
                    acc(&mut grads, *x, &mut |s| {
                        for (sv, gv) in s.iter_mut().zip(&g) {
                            *sv += gv * k;
                        }
                    });
                }
            }
        }
    }

    // Constants never need gradients; skipping them avoids the most expensive
    // half of the first convolution's backward pass.
    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Constant)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `sum_i t_i (log t_i - log s_i)` with both arguments clamped.
pub fn kl_value(teacher: &[f64], student: &[f64]) -> f64 {
    teacher
        .iter()
        .zip(student)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.max(PROB_CLAMP).ln() - s.max(PROB_CLAMP).ln()))
        .sum()
}

#[cfg(debug_assertions)]
fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::Conv1d { .. } => "conv1d",
        Op::Linear { .. } => "linear",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Pool { .. } => "global_avg_pool",
        Op::Softmax(_) => "softmax",
        Op::Add(..) => "add",
        Op::MaskedAdd { .. } => "masked_add",
        Op::AddScalar { .. } => "add_scalar",
        Op::HaltWeights { .. } => "halt_weights",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::PonderMean { .. } => "ponder_mean",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlDiv { .. } => "kl_div",
        Op::Sum(_) => "sum",
        Op::Scale(..) => "scale",
    }
}
