//! Dense row-major `f64` tensors and the raw kernels the autodiff tape is
//! built on. Only ranks 1–3 are used: `[W]`, `[C, W]` and `[C_out, C_in, K]`.

use crate::error::{Result, ScaiError};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel != Some(data.len()) {
            return Err(ScaiError::ShapeMismatch {
                op: "tensor",
                dim: "element count",
                expected: numel.unwrap_or(usize::MAX),
                found: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ScaiError::NonFinite { op })
        }
    }
}

/// Output width of a 1-D convolution.
pub fn conv_out_width(width: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (width + 2 * padding - kernel) / stride + 1
}

/// Maximal runs `[start, end)` of `true` in a mask, or the whole range when
/// there is no mask.
pub fn active_runs(mask: Option<&[bool]>, width: usize) -> Vec<(usize, usize)> {
    let Some(mask) = mask else {
        return if width == 0 { vec![] } else { vec![(0, width)] };
    };
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, mask.len()));
    }
    runs
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub w_in: usize,
    pub w_out: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output positions in `[a, e)` whose tap `t` lands inside the input.
    #[inline]
    fn valid(&self, t: usize, a: usize, e: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if t >= self.pad { 0 } else { (self.pad - t).div_ceil(s) };
        let hi = (self.w_in + self.pad).saturating_sub(t).div_ceil(s);
        let lo = lo.clamp(a, e);
        (lo, hi.clamp(lo, e))
    }

    /// im2col over the active runs: `[C_in * K, n]` with `n` the total run length.
    fn im2col(&self, input: &[f64], runs: &[(usize, usize)], n: usize) -> Vec<f64> {
        let mut col = Vec::with_capacity(self.c_in * self.k * n);
        for c in 0..self.c_in {
            let in_row = &input[c * self.w_in..(c + 1) * self.w_in];
            for t in 0..self.k {
                for &(a, e) in runs {
                    let (lo, hi) = self.valid(t, a, e);
                    col.resize(col.len() + (lo - a), 0.0);
                    if self.stride == 1 {
                        let j = lo + t - self.pad;
                        col.extend_from_slice(&in_row[j..j + (hi - lo)]);
                    } else {
                        col.extend((lo..hi).map(|i| in_row[i * self.stride + t - self.pad]));
                    }
                    col.resize(col.len() + (e - hi), 0.0);
                }
            }
        }
        col
    }

    /// Adds an im2col-shaped gradient back onto the input gradient.
    fn col2im_add(&self, gcol: &[f64], runs: &[(usize, usize)], n: usize, gi: &mut [f64]) {
        for c in 0..self.c_in {
            let gi_row = &mut gi[c * self.w_in..(c + 1) * self.w_in];
            for t in 0..self.k {
                let mut off = (c * self.k + t) * n;
                for &(a, e) in runs {
                    let (lo, hi) = self.valid(t, a, e);
                    let src = &gcol[off + (lo - a)..off + (hi - a)];
                    if self.stride == 1 {
                        let j = lo + t - self.pad;
                        for (d, v) in gi_row[j..j + (hi - lo)].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (i, v) in (lo..hi).zip(src) {
                            gi_row[i * self.stride + t - self.pad] += v;
                        }
                    }
                    off += e - a;
                }
            }
        }
    }
}

/// Row-major `c = a·b + beta·c` with arbitrary strides; `a: m×k`, `b: k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn run_columns(runs: &[(usize, usize)]) -> Vec<usize> {
    runs.iter().flat_map(|&(a, e)| a..e).collect()
}

pub(crate) fn conv1d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    runs: &[(usize, usize)],
    out: &mut [f64],
) {
    let n: usize = runs.iter().map(|&(a, e)| e - a).sum();
    if n == 0 {
        return;
    }
    let ck = g.c_in * g.k;
    let col = g.im2col(input, runs, n);
    let full = n == g.w_out;
    let mut res = if full { Vec::new() } else { vec![0.0; g.c_out * n] };
    {
        let dst: &mut [f64] = if full { out } else { &mut res };
        gemm(g.c_out, ck, n, weight, (ck, 1), &col, (n, 1), 0.0, dst);
        if full {
            if let Some(b) = bias {
                for (o, row) in dst.chunks_mut(n).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[o]);
                }
            }
            return;
        }
    }
    let cols = run_columns(runs);
    for o in 0..g.c_out {
        let b = bias.map_or(0.0, |b| b[o]);
        for (j, &i) in cols.iter().enumerate() {
            out[o * g.w_out + i] = res[o * n + j] + b;
        }
    }
}

/// Accumulates input, weight and bias gradients of a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    runs: &[(usize, usize)],
    grad_in: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    let n: usize = runs.iter().map(|&(a, e)| e - a).sum();
    if n == 0 {
        return;
    }
    let ck = g.c_in * g.k;
    let gathered;
    let go: &[f64] = if n == g.w_out {
        grad_out
    } else {
        let cols = run_columns(runs);
        gathered = (0..g.c_out)
            .flat_map(|o| cols.iter().map(move |&i| grad_out[o * g.w_out + i]))
            .collect::<Vec<f64>>();
        &gathered
    };
    if let Some(gb) = grad_b {
        for (o, row) in go.chunks(n).enumerate() {
            gb[o] += row.iter().sum::<f64>();
        }
    }
    if let Some(gw) = grad_w {
        let col = g.im2col(input, runs, n);
        // gw += go · colᵀ
        gemm(g.c_out, n, ck, go, (n, 1), &col, (1, n), 1.0, gw);
    }
    if let Some(gi) = grad_in {
        let mut gcol = vec![0.0; ck * n];
        // gcol = wᵀ · go
        gemm(ck, g.c_out, n, weight, (1, ck), go, (n, 1), 0.0, &mut gcol);
        g.col2im_add(&gcol, runs, n, gi);
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
