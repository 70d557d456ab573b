//! The multi-exit network: a stack of residual blocks joined by strided
//! transfer convolutions with projection shortcuts, and a pool→linear→softmax
//! classifier after every block.
//!
//! Block `l` computes `x^l = block_l(transfer_l(x^{l-1})) + shortcut_l(x^{l-1})`
//! where `x^0` is the `[1, W]` input curve. The first transfer keeps the width
//! (stride 1); later ones halve it (stride 2, kernel 3) while moving to the
//! next channel count. Shortcuts are 1×1 convolutions with the same stride.
//!
//! Parameter names, all 1-based:
//!
//! | name | shape |
//! |---|---|
//! | `block{l}.transfer.weight` / `.bias` | `[C_l, C_{l-1}, 3]` / `[C_l]` |
//! | `block{l}.shortcut.weight` / `.bias` | `[C_l, C_{l-1}, 1]` / `[C_l]` |
//! | `block{l}.unit{s}.conv.weight` / `.bias` | `[C_l, C_l, 3]` / `[C_l]` |
//! | `block{l}.halt{s}.conv.weight` | `[1, C_l, 3]` (units `s < S_l`, adaptive models) |
//! | `block{l}.halt{s}.global.weight` | `[1, C_l]` |
//! | `block{l}.halt{s}.bias` | `[1]` |
//! | `exit{l}.weight` / `.bias` | `[classes, C_l]` / `[classes]` |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Result, ScaiError};
use crate::pa::{self, BlockParams, Halting, HaltingParams, HaltingTrace, UnitParams};
use crate::tensor::{conv_out_width, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaiConfig {
    /// Number of blocks (and exits), `L`.
    pub blocks: usize,
    /// Residual units per block, `S_l`.
    pub units: Vec<usize>,
    pub input_width: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// Halting threshold ε.
    pub epsilon: f64,
    /// Ponder-cost weight γ.
    pub gamma: f64,
    /// Position-adaptive blocks (SCAI+) instead of plain residual stacks (SCAI).
    pub pa_enabled: bool,
    pub distill_enabled: bool,
    /// Initial bias of every halting branch.
    pub halt_bias_init: f64,
    pub seed: u64,
}

impl Default for ScaiConfig {
    fn default() -> Self {
        ScaiConfig {
            blocks: 4,
            units: vec![4, 4, 4, 4],
            input_width: 400,
            channels: vec![16, 32, 64, 128],
            num_classes: 12,
            epsilon: 0.02,
            gamma: 1e-5,
            pa_enabled: true,
            distill_enabled: true,
            halt_bias_init: 0.0,
            seed: 0,
        }
    }
}

impl ScaiConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScaiError::Config(m));
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        if self.units.len() != self.blocks {
            return bad(format!("{} unit counts for {} blocks", self.units.len(), self.blocks));
        }
        if self.channels.len() != self.blocks {
            return bad(format!("{} channel counts for {} blocks", self.channels.len(), self.blocks));
        }
        if self.units.contains(&0) {
            return bad("every block needs at least one unit".into());
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon {} outside (0, 1)", self.epsilon));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma {} is negative", self.gamma));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input_width < 2 {
            return bad("input width must be at least 2".into());
        }
        let mut w = self.input_width;
        for l in 1..self.blocks {
            w = conv_out_width(w, 3, 2, 1);
            if w < 2 {
                return bad(format!("input width {} too small for {} blocks (block {} has width {w})", self.input_width, self.blocks, l + 1));
            }
        }
        Ok(())
    }

    /// Feature width of every block.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = self.input_width;
        (0..self.blocks)
            .map(|l| {
                if l > 0 {
                    w = conv_out_width(w, 3, 2, 1);
                }
                w
            })
            .collect()
    }

    pub fn halting(&self) -> Halting {
        Halting::Adaptive {
            epsilon: self.epsilon,
        }
    }

    /// Number of trainable scalars a model with this configuration holds,
    /// saturating on overflow.
    pub fn parameter_count(&self) -> u128 {
        let mut total: u128 = 0;
        let mut cin: u128 = 1;
        let k = self.num_classes as u128;
        for (&c, &s) in self.channels.iter().zip(&self.units) {
            let (c, s) = (c as u128, s as u128);
            let mut block = c.saturating_mul(cin).saturating_mul(4).saturating_add(2 * c);
            block = block.saturating_add(s.saturating_mul(c.saturating_mul(c).saturating_mul(3).saturating_add(c)));
            if self.pa_enabled {
                block = block.saturating_add(s.saturating_sub(1).saturating_mul(4 * c + 1));
            }
            block = block.saturating_add(k.saturating_mul(c).saturating_add(k));
            total = total.saturating_add(block);
            cin = c;
        }
        total
    }

    /// Uniform `S` across `blocks` blocks, doubling channels from `base`.
    pub fn with_depth(mut self, blocks: usize, units: usize, base_channels: usize) -> Self {
        self.blocks = blocks;
        self.units = vec![units; blocks];
        self.channels = (0..blocks).map(|l| base_channels << l).collect();
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayout {
    pub in_channels: usize,
    pub channels: usize,
    pub in_width: usize,
    pub width: usize,
    pub stride: usize,
    pub transfer_w: ParamId,
    pub transfer_b: ParamId,
    pub shortcut_w: ParamId,
    pub shortcut_b: ParamId,
    pub params: BlockParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaiModel {
    config: ScaiConfig,
    params: ParamStore,
    layout: Vec<BlockLayout>,
}

/// Result of running a sample up to one exit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitOutcome {
    /// 1-based exit index.
    pub exit_index: usize,
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub prediction: usize,
    /// Multiply-accumulates spent up to and including this exit.
    pub flops_used: u64,
    pub traces: Vec<HaltingTrace>,
}

impl ExitOutcome {
    fn new(exit_index: usize, probs: Vec<f64>, flops_used: u64, traces: Vec<HaltingTrace>) -> Self {
        let (prediction, confidence) = argmax(&probs);
        ExitOutcome {
            exit_index,
            probs,
            confidence,
            prediction,
            flops_used,
            traces,
        }
    }
}

pub fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
}

/// Graph handles produced by a training forward pass.
pub struct ForwardPass {
    pub features: Vec<Var>,
    pub probs: Vec<Var>,
    pub ponders: Vec<Var>,
    pub traces: Vec<HaltingTrace>,
}

impl ScaiModel {
    pub fn build(config: ScaiConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut layout = Vec::with_capacity(config.blocks);
        let widths = config.widths();
        let mut normal = |params: &mut ParamStore, name: String, shape: Vec<usize>, std: f64| {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("finite std");
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.insert(name, Tensor::new(shape, data).expect("shape").with_grad())
        };
        let zeros = |params: &mut ParamStore, name: String, shape: Vec<usize>| {
            params.insert(name, Tensor::zeros(shape).with_grad())
        };

        let mut in_channels = 1;
        let mut in_width = config.input_width;
        for l in 0..config.blocks {
            let b = l + 1;
            let c = config.channels[l];
            let s_count = config.units[l];
            let stride = if l == 0 { 1 } else { 2 };
            // He fan-in scaling, halved on the two branches that are summed.
            let transfer_w = normal(
                &mut params,
                format!("block{b}.transfer.weight"),
                vec![c, in_channels, 3],
                (1.0 / (3 * in_channels) as f64).sqrt(),
            );
            let transfer_b = zeros(&mut params, format!("block{b}.transfer.bias"), vec![c]);
            let shortcut_w = normal(
                &mut params,
                format!("block{b}.shortcut.weight"),
                vec![c, in_channels, 1],
                (1.0 / in_channels as f64).sqrt(),
            );
            let shortcut_b = zeros(&mut params, format!("block{b}.shortcut.bias"), vec![c]);
            let mut units = Vec::with_capacity(s_count);
            let mut halting = Vec::new();
            for s in 1..=s_count {
                // Residual branches shrink with depth so the stack stays well scaled.
                let conv_w = normal(
                    &mut params,
                    format!("block{b}.unit{s}.conv.weight"),
                    vec![c, c, 3],
                    (2.0 / (3 * c * s_count) as f64).sqrt(),
                );
                let conv_b = zeros(&mut params, format!("block{b}.unit{s}.conv.bias"), vec![c]);
                units.push(UnitParams { conv_w, conv_b });
                if config.pa_enabled && s < s_count {
                    let hc = zeros(&mut params, format!("block{b}.halt{s}.conv.weight"), vec![1, c, 3]);
                    let hg = zeros(&mut params, format!("block{b}.halt{s}.global.weight"), vec![1, c]);
                    let hb = params.insert(
                        format!("block{b}.halt{s}.bias"),
                        Tensor::from_vec(vec![config.halt_bias_init]).with_grad(),
                    );
                    halting.push(HaltingParams {
                        conv_w: hc,
                        global_w: hg,
                        bias: hb,
                    });
                }
            }
            let head_w = normal(
                &mut params,
                format!("exit{b}.weight"),
                vec![config.num_classes, c],
                0.1 / (c as f64).sqrt(),
            );
            let head_b = zeros(&mut params, format!("exit{b}.bias"), vec![config.num_classes]);
            layout.push(BlockLayout {
                in_channels,
                channels: c,
                in_width,
                width: widths[l],
                stride,
                transfer_w,
                transfer_b,
                shortcut_w,
                shortcut_b,
                params: BlockParams { units, halting },
                head_w,
                head_b,
            });
            in_channels = c;
            in_width = widths[l];
        }
        Ok(ScaiModel {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model with the given parameter values (e.g. from a checkpoint).
    pub fn from_parts(config: ScaiConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::build(config)?;
        if params.len() != model.params.len() {
            return Err(ScaiError::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (name, tensor) in params.iter() {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| ScaiError::Config(format!("unknown parameter {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != tensor.shape() {
                return Err(ScaiError::Config(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    tensor.shape()
                )));
            }
            slot.data_mut().copy_from_slice(tensor.data());
        }
        Ok(model)
    }

    pub fn config(&self) -> &ScaiConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_exits(&self) -> usize {
        self.layout.len()
    }

    pub fn block_width(&self, l: usize) -> usize {
        self.layout[l - 1].width
    }

    pub fn block_channels(&self, l: usize) -> usize {
        self.layout[l - 1].channels
    }

    /// Shape `[channels, width]` of `x^l`; `l = 0` is the raw input.
    pub fn feature_shape(&self, l: usize) -> [usize; 2] {
        if l == 0 {
            [1, self.config.input_width]
        } else {
            [self.layout[l - 1].channels, self.layout[l - 1].width]
        }
    }

    /// Mean number of residual units run at each position of each block,
    /// averaged over `curves` with every block executed.
    pub fn mean_layers(&self, curves: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut sums: Vec<Vec<f64>> = self.layout.iter().map(|lay| vec![0.0; lay.width]).collect();
        for curve in curves {
            let out = self.forward_to_exit(curve, self.num_exits())?;
            for (sum, trace) in sums.iter_mut().zip(&out.traces) {
                for (s, &n) in sum.iter_mut().zip(&trace.n) {
                    *s += n as f64;
                }
            }
        }
        let count = curves.len().max(1) as f64;
        for row in &mut sums {
            row.iter_mut().for_each(|v| *v /= count);
        }
        Ok(sums)
    }

    fn check_exit(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.num_exits() {
            return Err(ScaiError::InvalidExit {
                index: l,
                exits: self.num_exits(),
            });
        }
        Ok(())
    }

    pub fn input_tensor(&self, curve: &[f64]) -> Result<Tensor> {
        if curve.len() != self.config.input_width {
            return Err(ScaiError::ShapeMismatch {
                op: "forward",
                dim: "input width",
                expected: self.config.input_width,
                found: curve.len(),
            });
        }
        Tensor::new(vec![1, curve.len()], curve.to_vec())
    }

    /// Runs block `l` (1-based) on `x^{l-1}`.
    pub fn block_forward(
        &self,
        g: &mut Graph<'_>,
        l: usize,
        x_prev: Var,
        halting: Option<Halting>,
    ) -> Result<pa::BlockForward> {
        self.check_exit(l)?;
        let lay = &self.layout[l - 1];
        let tw = g.param(lay.transfer_w);
        let tb = g.param(lay.transfer_b);
        let t = g.conv1d(x_prev, tw, Some(tb), lay.stride, 1, None)?;
        let sw = g.param(lay.shortcut_w);
        let sb = g.param(lay.shortcut_b);
        let shortcut = g.conv1d(x_prev, sw, Some(sb), lay.stride, 0, None)?;
        let mut fwd = match (self.config.pa_enabled, halting) {
            (true, Some(h)) => pa::pa_block_forward(g, t, &lay.params, h)?,
            _ => pa::plain_block_forward(g, t, &lay.params)?,
        };
        fwd.output = g.add(fwd.output, shortcut)?;
        Ok(fwd)
    }

    /// Classifier `l`: global average pool → linear → softmax.
    pub fn classifier_head(&self, g: &mut Graph<'_>, l: usize, features: Var) -> Result<Var> {
        self.check_exit(l)?;
        let lay = &self.layout[l - 1];
        let pooled = g.global_avg_pool(features);
        let w = g.param(lay.head_w);
        let b = g.param(lay.head_b);
        let logits = g.linear(pooled, w, b)?;
        Ok(g.softmax(logits))
    }

    fn default_halting(&self) -> Option<Halting> {
        self.config.pa_enabled.then(|| self.config.halting())
    }

    /// Forward through blocks `1..=exits`, recording every head.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        input: Var,
        exits: usize,
        halting: Option<Halting>,
    ) -> Result<ForwardPass> {
        self.check_exit(exits)?;
        let mut pass = ForwardPass {
            features: Vec::with_capacity(exits),
            probs: Vec::with_capacity(exits),
            ponders: Vec::new(),
            traces: Vec::with_capacity(exits),
        };
        let mut x = input;
        for l in 1..=exits {
            let fwd = self.block_forward(g, l, x, halting)?;
            x = fwd.output;
            pass.features.push(x);
            pass.probs.push(self.classifier_head(g, l, x)?);
            if let Some(p) = fwd.ponder {
                pass.ponders.push(p);
            }
            pass.traces.push(fwd.trace);
        }
        Ok(pass)
    }

    /// Runs the sample through blocks `1..=l` and classifier `l`.
    pub fn forward_to_exit(&self, curve: &[f64], l: usize) -> Result<ExitOutcome> {
        self.check_exit(l)?;
        let mut runner = ExitRunner::new(self, curve)?;
        let mut last = None;
        for _ in 0..l {
            last = Some(runner.advance()?);
        }
        Ok(last.expect("at least one exit"))
    }

    /// Outcomes at every exit from a single pass.
    pub fn forward_all_exits(&self, curve: &[f64]) -> Result<Vec<ExitOutcome>> {
        let mut runner = ExitRunner::new(self, curve)?;
        (0..self.num_exits()).map(|_| runner.advance()).collect()
    }

    /// Same as [`forward_all_exits`](Self::forward_all_exits) with an explicit halting mode.
    pub fn forward_all_exits_with(&self, curve: &[f64], halting: Halting) -> Result<Vec<ExitOutcome>> {
        let mut runner = ExitRunner::new(self, curve)?.with_halting(Some(halting));
        (0..self.num_exits()).map(|_| runner.advance()).collect()
    }

    /// Static per-exit cost table: cumulative multiply-accumulates assuming
    /// every position runs every unit.
    pub fn static_cost_table(&self) -> CostTable {
        let mut total = 0;
        let per_exit = (1..=self.num_exits())
            .map(|l| {
                let lay = &self.layout[l - 1];
                let full = vec![lay.width; lay.params.units.len()];
                total += self.block_cost(l, &full) + self.head_cost(l);
                total
            })
            .collect();
        CostTable { per_exit }
    }

    /// Multiply-accumulates of block `l` given how many positions ran each unit.
    ///
    /// Counts the transfer and shortcut convolutions, each executed residual
    /// convolution at its active positions and, for adaptive blocks, the
    /// halting branch (3-tap conv at active positions, pooling, global
    /// weight) plus the weighted output accumulation.
    pub fn block_cost(&self, l: usize, active_per_unit: &[usize]) -> u64 {
        let lay = &self.layout[l - 1];
        let (cin, c, w) = (lay.in_channels as u64, lay.channels as u64, lay.width as u64);
        let units = lay.params.units.len();
        let mut cost = c * cin * 3 * w + c * cin * w;
        for (s, &a) in active_per_unit.iter().enumerate() {
            let a = a as u64;
            cost += c * c * 3 * a;
            if self.config.pa_enabled {
                if s + 1 < units {
                    cost += 3 * c * a + c * w + c;
                }
                cost += c * a;
            }
        }
        cost
    }

    pub fn head_cost(&self, l: usize) -> u64 {
        let lay = &self.layout[l - 1];
        let c = lay.channels as u64;
        c * lay.width as u64 + self.config.num_classes as u64 * c
    }
}

/// Cumulative cost `C_l` of reaching exit `l` (index `l - 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub per_exit: Vec<u64>,
}

impl CostTable {
    pub fn exit_cost(&self, l: usize) -> u64 {
        self.per_exit[l - 1]
    }

    pub fn len(&self) -> usize {
        self.per_exit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_exit.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.per_exit.iter().map(|&c| c as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("exit_index,static_flops\n");
        for (i, c) in self.per_exit.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, c));
        }
        out
    }
}

/// Evaluates a sample one exit at a time, keeping the graph between steps.
pub struct ExitRunner<'m> {
    model: &'m ScaiModel,
    graph: Graph<'m>,
    current: Var,
    next_block: usize,
    flops: u64,
    traces: Vec<HaltingTrace>,
    halting: Option<Halting>,
}

impl<'m> ExitRunner<'m> {
    pub fn new(model: &'m ScaiModel, curve: &[f64]) -> Result<Self> {
        let input = model.input_tensor(curve)?;
        Self::from_features(model, 0, input)
    }

    /// Resumes from `x^split` (`split = 0` is the raw input `[1, W]`).
    pub fn from_features(model: &'m ScaiModel, split: usize, features: Tensor) -> Result<Self> {
        if split >= model.num_exits() {
            return Err(ScaiError::InvalidExit {
                index: split + 1,
                exits: model.num_exits(),
            });
        }
        let expected = model.feature_shape(split);
        if features.shape() != expected {
            return Err(ScaiError::ShapeMismatch {
                op: "resume",
                dim: "feature shape",
                expected: expected[0] * expected[1],
                found: features.numel(),
            });
        }
        let mut graph = Graph::new(&model.params);
        let current = graph.constant(features);
        Ok(ExitRunner {
            model,
            graph,
            current,
            next_block: split + 1,
            flops: 0,
            traces: Vec::new(),
            halting: model.default_halting(),
        })
    }

    pub fn with_halting(mut self, halting: Option<Halting>) -> Self {
        self.halting = halting;
        self
    }

    /// Next exit index that [`advance`](Self::advance) would produce.
    pub fn next_exit(&self) -> usize {
        self.next_block
    }

    pub fn is_finished(&self) -> bool {
        self.next_block > self.model.num_exits()
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Current feature map `x^{next_exit - 1}`.
    pub fn features(&self) -> Tensor {
        Tensor::new(self.graph.shape(self.current).to_vec(), self.graph.value(self.current).to_vec())
            .expect("graph shapes are consistent")
    }

    pub fn advance(&mut self) -> Result<ExitOutcome> {
        let l = self.next_block;
        let fwd = self.model.block_forward(&mut self.graph, l, self.current, self.halting)?;
        let probs = self.model.classifier_head(&mut self.graph, l, fwd.output)?;
        self.flops += self.model.block_cost(l, &fwd.trace.active_per_unit) + self.model.head_cost(l);
        self.current = fwd.output;
        self.traces.push(fwd.trace);
        self.next_block += 1;
        Ok(ExitOutcome::new(
            l,
            self.graph.value(probs).to_vec(),
            self.flops,
            self.traces.clone(),
        ))
    }
}
