//! Position-adaptive residual blocks.
//!
//! Every position of a block's feature map carries its own halting state.
//! After each residual unit a halting score `h = sigmoid(conv3(x) +
//! w·pool(x) + b)` is evaluated at the still-active positions; a position
//! halts at the first unit `N` where the cumulative score reaches `1 - ε`
//! (the last unit always scores 1). Halted positions are copied forward
//! unchanged. The block output is the halting-distribution-weighted sum of
//! the unit outputs and the ponder cost of a position is `N + R`, where the
//! retainer `R = 1 - Σ_{s<N} h_s`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::{Result, ScaiError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
}

/// Halting branch of one residual unit: `conv_w: [1, C, 3]`,
/// `global_w: [1, C]`, `bias: [1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaltingParams {
    pub conv_w: ParamId,
    pub global_w: ParamId,
    pub bias: ParamId,
}

/// Parameters of one block. `halting` has one entry per unit except the last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub units: Vec<UnitParams>,
    pub halting: Vec<HaltingParams>,
}

/// How halting scores are produced inside an adaptive block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Halting {
    /// Learned scores with threshold ε.
    Adaptive { epsilon: f64 },
    /// Scores pinned to zero for every unit but the last: all positions run
    /// the whole block.
    ForceFull,
}

/// Result of the halting rule for one position.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltingSchedule {
    /// Units executed, 1-based.
    pub n: usize,
    pub r: f64,
    /// Halting distribution over the units; zero after `n`.
    pub p: Vec<f64>,
}

impl HaltingSchedule {
    pub fn rho(&self) -> f64 {
        self.n as f64 + self.r
    }
}

/// Applies the halting rule to one position's scores.
///
/// The last entry of `h` is treated as 1 whatever its value, so the schedule
/// always terminates within `h.len()` units.
pub fn halting_schedule(h: &[f64], epsilon: f64) -> HaltingSchedule {
    let units = h.len();
    assert!(units > 0, "halting schedule needs at least one unit");
    let mut cum = 0.0;
    let mut n = units;
    for (s, &hs) in h.iter().enumerate() {
        let hs = if s + 1 == units { 1.0 } else { hs };
        cum += hs;
        if cum >= 1.0 - epsilon {
            n = s + 1;
            break;
        }
    }
    let before: f64 = h[..n - 1].iter().sum();
    let r = 1.0 - before;
    let mut p = vec![0.0; units];
    p[..n - 1].copy_from_slice(&h[..n - 1]);
    p[n - 1] = r;
    HaltingSchedule { n, r, p }
}

/// Per-block record of the halting computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingTrace {
    pub units: usize,
    /// `h[i][s]`: score of position `i` after unit `s`; zero where not evaluated.
    pub h: Vec<Vec<f64>>,
    pub n: Vec<usize>,
    pub r: Vec<f64>,
    /// `p[i][s]`: halting distribution of position `i`.
    pub p: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    /// Number of positions that executed each unit.
    pub active_per_unit: Vec<usize>,
}

impl HaltingTrace {
    pub fn width(&self) -> usize {
        self.n.len()
    }

    /// Block ponder cost: mean over positions of `N + R`.
    pub fn ponder_cost(&self) -> f64 {
        if self.rho.is_empty() {
            return 0.0;
        }
        self.rho.iter().sum::<f64>() / self.rho.len() as f64
    }

    /// Trace of a block whose positions all run every unit.
    pub fn full(units: usize, width: usize) -> Self {
        let mut p = vec![0.0; units];
        p[units - 1] = 1.0;
        let mut h = vec![0.0; units];
        h[units - 1] = 1.0;
        HaltingTrace {
            units,
            h: vec![h; width],
            n: vec![units; width],
            r: vec![1.0; width],
            p: vec![p; width],
            rho: vec![units as f64 + 1.0; width],
            active_per_unit: vec![width; units],
        }
    }

    /// CSV with one row per position: `position,n,r,rho,p_1..p_S`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,n,r,rho");
        for s in 1..=self.units {
            out.push_str(&format!(",p_{s}"));
        }
        out.push('\n');
        for i in 0..self.width() {
            out.push_str(&format!("{},{},{},{}", i, self.n[i], self.r[i], self.rho[i]));
            for v in &self.p[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Scalar ponder cost of a block (mean of `N + R` over positions).
pub fn ponder_cost_block(trace: &HaltingTrace) -> f64 {
    trace.ponder_cost()
}

/// `x + conv3(relu(x))`, evaluated only at masked positions when a mask is given.
pub fn residual_unit(g: &mut Graph<'_>, x: Var, unit: &UnitParams, mask: Option<&[bool]>) -> Result<Var> {
    let w = g.param(unit.conv_w);
    let b = g.param(unit.conv_b);
    let act = g.relu(x);
    let delta = g.conv1d(act, w, Some(b), 1, 1, mask)?;
    match mask {
        Some(m) => g.masked_add(x, delta, m),
        None => g.add(x, delta),
    }
}

/// Halting scores `sigmoid(conv3(x) + w·pool(x) + b)` at every position of `x: [C, W]`.
pub fn halting_score(
    g: &mut Graph<'_>,
    x: Var,
    params: &HaltingParams,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let channels = g.shape(x)[0];
    let conv_w = g.param(params.conv_w);
    let kernel_channels = g.shape(conv_w)[1];
    if kernel_channels != channels {
        return Err(ScaiError::ShapeMismatch {
            op: "halting_score",
            dim: "channels",
            expected: kernel_channels,
            found: channels,
        });
    }
    let local = g.conv1d(x, conv_w, None, 1, 1, mask)?;
    let pooled = g.global_avg_pool(x);
    let gw = g.param(params.global_w);
    let gb = g.param(params.bias);
    let global = g.linear(pooled, gw, gb)?;
    let z = g.add_scalar(local, global)?;
    Ok(g.sigmoid(z))
}

/// Output of one block's forward pass.
pub struct BlockForward {
    pub output: Var,
    /// Running feature map after each executed unit.
    pub unit_outputs: Vec<Var>,
    pub trace: HaltingTrace,
    /// Differentiable block ponder cost; `None` for plain blocks.
    pub ponder: Option<Var>,
}

/// Plain residual stack: every unit runs at every position.
pub fn plain_block_forward(g: &mut Graph<'_>, x_in: Var, block: &BlockParams) -> Result<BlockForward> {
    if block.units.is_empty() {
        return Err(ScaiError::Config("block needs at least one residual unit".into()));
    }
    let width = g.shape(x_in)[1];
    let mut x = x_in;
    let mut unit_outputs = Vec::with_capacity(block.units.len());
    for unit in &block.units {
        x = residual_unit(g, x, unit, None)?;
        unit_outputs.push(x);
    }
    Ok(BlockForward {
        output: x,
        unit_outputs,
        trace: HaltingTrace::full(block.units.len(), width),
        ponder: None,
    })
}

/// Position-adaptive block forward pass.
pub fn pa_block_forward(
    g: &mut Graph<'_>,
    x_in: Var,
    block: &BlockParams,
    halting: Halting,
) -> Result<BlockForward> {
    let units = block.units.len();
    if units == 0 {
        return Err(ScaiError::Config("block needs at least one residual unit".into()));
    }
    if block.halting.len() + 1 < units {
        return Err(ScaiError::Config(format!(
            "block has {units} units but only {} halting branches",
            block.halting.len()
        )));
    }
    let width = g.shape(x_in)[1];
    let epsilon = match halting {
        Halting::Adaptive { epsilon } => epsilon,
        Halting::ForceFull => 0.0,
    };

    let mut active = vec![true; width];
    let mut cum = vec![0.0; width];
    let mut n = vec![0usize; width];
    let mut h_trace = vec![vec![0.0; units]; width];
    let mut hs: Vec<Var> = Vec::with_capacity(units);
    let mut unit_outputs = Vec::with_capacity(units);
    let mut active_per_unit = Vec::with_capacity(units);
    let mut x_hat = x_in;

    for s in 0..units {
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            break;
        }
        let mask = (n_active < width).then(|| active.clone());
        let x = residual_unit(g, x_hat, &block.units[s], mask.as_deref())?;
        active_per_unit.push(n_active);

        let last = s + 1 == units;
        let scores = if last {
            None
        } else {
            let h = match halting {
                Halting::Adaptive { .. } => halting_score(g, x, &block.halting[s], mask.as_deref())?,
                Halting::ForceFull => g.constant(Tensor::zeros(vec![width])),
            };
            hs.push(h);
            Some(g.value(h).to_vec())
        };
        for i in 0..width {
            if !active[i] {
                continue;
            }
            let hv = scores.as_ref().map_or(1.0, |v| v[i]);
            h_trace[i][s] = hv;
            cum[i] += hv;
            if last || cum[i] >= 1.0 - epsilon {
                n[i] = s + 1;
                active[i] = false;
            }
        }
        unit_outputs.push(x);
        x_hat = x;
    }

    let executed = unit_outputs.len();
    let p = g.halt_weights(&hs, &n, executed)?;
    let output = g.weighted_sum(&unit_outputs, p)?;
    let ponder = g.ponder_mean(p, &n);

    let pv = g.value(p);
    let mut p_rows = vec![vec![0.0; units]; width];
    let mut r = vec![0.0; width];
    for i in 0..width {
        for s in 0..executed {
            p_rows[i][s] = pv[s * width + i];
        }
        r[i] = p_rows[i][n[i] - 1];
    }
    let rho = n.iter().zip(&r).map(|(&ni, ri)| ni as f64 + ri).collect();
    Ok(BlockForward {
        output,
        unit_outputs,
        trace: HaltingTrace {
            units,
            h: h_trace,
            n,
            r,
            p: p_rows,
            rho,
            active_per_unit,
        },
        ponder: Some(ponder),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn confident_first_unit_halts_immediately() {
        let s = halting_schedule(&[0.99, 0.3, 0.2, 1.0], 0.02);
        assert_eq!(s.n, 1);
        assert_eq!(s.r, 1.0);
        assert_eq!(s.p, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn two_half_scores_halt_at_second_unit() {
        let s = halting_schedule(&[0.5, 0.6, 0.1, 1.0], 0.02);
        assert_eq!(s.n, 2);
        assert!((s.r - 0.5).abs() < 1e-15);
        assert!(close(&s.p, &[0.5, 0.5, 0.0, 0.0]));
    }

    #[test]
    fn low_scores_run_every_unit() {
        let s = halting_schedule(&[0.1, 0.1, 0.1, 1.0], 0.02);
        assert_eq!(s.n, 4);
        assert!((s.r - 0.7).abs() < 1e-12);
        assert!(close(&s.p, &[0.1, 0.1, 0.1, 0.7]));
        assert!((s.rho() - 4.7).abs() < 1e-12);
    }

    #[test]
    fn last_unit_forced_even_if_score_is_low() {
        let s = halting_schedule(&[0.0, 0.0, 0.0, 0.0], 0.02);
        assert_eq!(s.n, 4);
        assert_eq!(s.r, 1.0);
    }

    #[test]
    fn single_unit_block() {
        let s = halting_schedule(&[0.3], 0.5);
        assert_eq!((s.n, s.r), (1, 1.0));
        assert_eq!(s.p, vec![1.0]);
    }

    #[test]
    fn ponder_cost_is_mean_of_rho() {
        let mut t = HaltingTrace::full(4, 6);
        assert_eq!(ponder_cost_block(&t), 5.0);
        for i in 0..3 {
            t.n[i] = 1;
            t.r[i] = 1.0;
            t.rho[i] = 2.0;
        }
        assert_eq!(ponder_cost_block(&t), 3.5);
        for i in 0..6 {
            t.rho[i] = 2.0;
        }
        assert_eq!(ponder_cost_block(&t), 2.0);
    }

    #[test]
    fn trace_csv_has_row_per_position() {
        let csv = HaltingTrace::full(2, 3).to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "position,n,r,rho,p_1,p_2");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,2,1,3,0,1");
    }
}
