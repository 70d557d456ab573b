//! Exit policies: anytime prediction under a per-sample budget and budgeted
//! batch prediction with calibrated confidence thresholds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaiError};
use crate::model::{ExitOutcome, ExitRunner, ScaiModel};
use crate::synth::Dataset;
use crate::train::cross_entropy_value;

pub const Q_MIN: f64 = 0.001;
pub const Q_TOL: f64 = 1e-6;

/// Geometric exit probabilities `q_l = z (1-q)^{l-1} q` and the constant `z`.
pub fn exit_probabilities(q: f64, exits: usize) -> (Vec<f64>, f64) {
    let weights: Vec<f64> = (0..exits).map(|l| (1.0 - q).powi(l as i32) * q).collect();
    let sum: f64 = weights.iter().sum();
    (weights.iter().map(|w| w / sum).collect(), 1.0 / sum)
}

/// `Σ_l M q_l C_l` for exit rate `q`.
pub fn expected_cost(costs: &[f64], batch: usize, q: f64) -> f64 {
    let (ql, _) = exit_probabilities(q, costs.len());
    ql.iter().zip(costs).map(|(p, c)| batch as f64 * p * c).sum()
}

/// Smallest exit rate in `[Q_MIN, 1]` whose expected cost fits `budget`.
pub fn solve_budget(costs: &[f64], batch: usize, budget: f64) -> Result<f64> {
    if costs.is_empty() {
        return Err(ScaiError::Empty("cost table"));
    }
    let minimum = batch as f64 * costs[0];
    if budget < minimum {
        return Err(ScaiError::InfeasibleBudget { budget, minimum });
    }
    if expected_cost(costs, batch, Q_MIN) <= budget {
        return Ok(Q_MIN);
    }
    // cost(lo) > budget >= cost(hi)
    let (mut lo, mut hi) = (Q_MIN, 1.0);
    while hi - lo > Q_TOL {
        let mid = 0.5 * (lo + hi);
        if expected_cost(costs, batch, mid) <= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Thresholds `θ_l` from validation confidences (`confidences[i][l]` for
/// sample `i`, exit `l`) so that about `q_l · n` samples leave at exit `l`.
///
/// Exits are filled in order from the samples still running. Among equal
/// confidences the lower sample index leaves first. A threshold of infinity
/// lets nothing through; the last threshold is 0.
pub fn calibrate_thresholds(confidences: &[Vec<f64>], q: &[f64]) -> Result<Vec<f64>> {
    let exits = q.len();
    let n = confidences.len();
    if exits == 0 {
        return Err(ScaiError::Empty("exit probabilities"));
    }
    if n < exits {
        return Err(ScaiError::Config(format!(
            "{n} validation samples cannot calibrate {exits} exits"
        )));
    }
    if let Some(bad) = confidences.iter().find(|c| c.len() != exits) {
        return Err(ScaiError::ShapeMismatch {
            op: "calibrate",
            dim: "exits per sample",
            expected: exits,
            found: bad.len(),
        });
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut thresholds = Vec::with_capacity(exits);
    let mut cum = 0.0;
    let mut taken = 0usize;
    for l in 0..exits - 1 {
        cum += q[l];
        let target = ((cum * n as f64).round() as usize).min(n);
        let k = target.saturating_sub(taken).min(remaining.len());
        remaining.sort_by(|&a, &b| confidences[b][l].total_cmp(&confidences[a][l]).then(a.cmp(&b)));
        let theta = if k == 0 {
            f64::INFINITY
        } else if k == remaining.len() {
            0.0
        } else {
            confidences[remaining[k - 1]][l]
        };
        thresholds.push(theta);
        remaining.drain(..k);
        remaining.sort_unstable();
        taken += k;
    }
    thresholds.push(0.0);
    Ok(thresholds)
}

/// Everything needed to run budgeted batch prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub q: f64,
    pub q_l: Vec<f64>,
    pub z: f64,
    pub costs: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub budget: f64,
    pub batch: usize,
}

impl BudgetPlan {
    /// Solves for `q`, then calibrates thresholds on validation confidences.
    /// A budget covering every sample at the last exit needs no early exits
    /// and sends everything to the end.
    pub fn new(costs: &[f64], batch: usize, budget: f64, validation: &[Vec<f64>]) -> Result<Self> {
        let exits = costs.len();
        let unlimited = costs.last().is_some_and(|&c| budget >= batch as f64 * c);
        if unlimited {
            let mut q_l = vec![0.0; exits];
            q_l[exits - 1] = 1.0;
            let mut thresholds = vec![f64::INFINITY; exits];
            thresholds[exits - 1] = 0.0;
            return Ok(BudgetPlan {
                q: 0.0,
                q_l,
                z: 1.0,
                costs: costs.to_vec(),
                thresholds,
                budget,
                batch,
            });
        }
        let q = solve_budget(costs, batch, budget)?;
        let (q_l, z) = exit_probabilities(q, exits);
        let thresholds = calibrate_thresholds(validation, &q_l)?;
        Ok(BudgetPlan {
            q,
            q_l,
            z,
            costs: costs.to_vec(),
            thresholds,
            budget,
            batch,
        })
    }
}

/// Threshold file: `exit_index,theta`.
pub fn thresholds_csv(thresholds: &[f64]) -> String {
    let mut out = String::from("exit_index,theta\n");
    for (l, t) in thresholds.iter().enumerate() {
        out.push_str(&format!("{},{}\n", l + 1, t));
    }
    out
}

pub fn parse_thresholds(text: &str, source: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "exit_index,theta")) => {}
        _ => return Err(ScaiError::parse(source, 1, "expected header exit_index,theta")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| ScaiError::parse(source, i + 1, m.to_string());
        let (idx, theta) = line.split_once(',').ok_or_else(|| bad("expected two columns"))?;
        let idx: usize = idx.trim().parse().map_err(|_| bad("bad exit index"))?;
        if idx != out.len() + 1 {
            return Err(bad("exit indices must run 1, 2, ... in order"));
        }
        let theta: f64 = theta.trim().parse().map_err(|_| bad("bad threshold"))?;
        if theta.is_nan() || theta < 0.0 {
            return Err(bad("threshold must be a non-negative number"));
        }
        out.push(theta);
    }
    Ok(out)
}

/// Runs a sample exit by exit until its confidence reaches the exit's threshold.
pub fn threshold_predict(model: &ScaiModel, curve: &[f64], thresholds: &[f64]) -> Result<ExitOutcome> {
    if thresholds.len() != model.num_exits() {
        return Err(ScaiError::ShapeMismatch {
            op: "thresholds",
            dim: "exits",
            expected: model.num_exits(),
            found: thresholds.len(),
        });
    }
    let mut runner = ExitRunner::new(model, curve)?;
    loop {
        let out = runner.advance()?;
        if runner.is_finished() || out.confidence >= thresholds[out.exit_index - 1] {
            return Ok(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchResult {
    pub outcomes: Vec<ExitOutcome>,
    pub total_flops: u64,
}

pub fn budgeted_batch_predict(model: &ScaiModel, curves: &[&[f64]], thresholds: &[f64]) -> Result<BatchResult> {
    let outcomes = curves
        .par_iter()
        .map(|c| threshold_predict(model, c, thresholds))
        .collect::<Result<Vec<_>>>()?;
    let total_flops = outcomes.iter().map(|o| o.flops_used).sum();
    Ok(BatchResult { outcomes, total_flops })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnytimeOutcome {
    pub outcome: ExitOutcome,
    /// Set when even the first exit costs more than the budget.
    pub over_budget: bool,
}

/// Deepest exit whose static cumulative cost fits `budget`, or exit 1 flagged
/// as over budget.
pub fn anytime_exit(costs: &[f64], budget: f64) -> (usize, bool) {
    match costs.iter().rposition(|&c| c <= budget) {
        Some(i) => (i + 1, false),
        None => (1, true),
    }
}

pub fn anytime_predict(model: &ScaiModel, curve: &[f64], budget: f64) -> Result<AnytimeOutcome> {
    let costs = model.static_cost_table().as_f64();
    let (exit, over_budget) = anytime_exit(&costs, budget);
    Ok(AnytimeOutcome {
        outcome: model.forward_to_exit(curve, exit)?,
        over_budget,
    })
}

/// Confidence, prediction and cumulative realized cost at every exit for a
/// set of samples, computed once and shared between policies.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeTable {
    pub labels: Vec<usize>,
    pub exits: Vec<Vec<ExitSummary>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitSummary {
    pub confidence: f64,
    pub prediction: usize,
    pub flops: u64,
    pub loss: f64,
}

impl OutcomeTable {
    pub fn build(model: &ScaiModel, data: &Dataset) -> Result<Self> {
        let exits = data
            .curves
            .par_iter()
            .map(|c| {
                model
                    .forward_all_exits(&c.values)?
                    .into_iter()
                    .map(|o| {
                        Ok(ExitSummary {
                            confidence: o.confidence,
                            prediction: o.prediction,
                            flops: o.flops_used,
                            loss: cross_entropy_value(&o.probs, c.label)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OutcomeTable {
            labels: data.curves.iter().map(|c| c.label).collect(),
            exits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_exits(&self) -> usize {
        self.exits.first().map_or(0, Vec::len)
    }

    pub fn confidences(&self) -> Vec<Vec<f64>> {
        self.exits
            .iter()
            .map(|s| s.iter().map(|e| e.confidence).collect())
            .collect()
    }

    /// Exit chosen for each sample under `thresholds`.
    pub fn threshold_exits(&self, thresholds: &[f64]) -> Vec<usize> {
        self.exits
            .iter()
            .map(|s| {
                s.iter()
                    .zip(thresholds)
                    .position(|(e, &t)| e.confidence >= t)
                    .map_or(s.len(), |i| i + 1)
            })
            .collect()
    }

    /// Accuracy, total realized cost and exit histogram of per-sample exits.
    pub fn score(&self, exits: &[usize]) -> PolicyScore {
        let mut histogram = vec![0; self.num_exits()];
        let mut correct = 0;
        let mut flops = 0;
        for (i, &l) in exits.iter().enumerate() {
            let e = &self.exits[i][l - 1];
            histogram[l - 1] += 1;
            correct += (e.prediction == self.labels[i]) as usize;
            flops += e.flops;
        }
        PolicyScore {
            accuracy: correct as f64 / exits.len().max(1) as f64,
            total_flops: flops,
            histogram,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyScore {
    pub accuracy: f64,
    pub total_flops: u64,
    pub histogram: Vec<usize>,
}

/// Expected validation loss when each sample's budget is drawn from
/// `budgets` (one draw per sample, reused across samples cyclically) and the
/// anytime policy picks the exit.
pub fn anytime_expected_loss(table: &OutcomeTable, costs: &[f64], budgets: &[f64]) -> f64 {
    if table.is_empty() || budgets.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &table.exits {
        for &b in budgets {
            let (l, _) = anytime_exit(costs, b);
            total += s[l - 1].loss;
            count += 1;
        }
    }
    total / count as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMode {
    Anytime,
    Budgeted,
}

impl CurveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveMode::Anytime => "anytime",
            CurveMode::Budgeted => "budgeted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub mode: CurveMode,
    pub budget: f64,
    pub realized_flops_mean: f64,
    pub accuracy: f64,
    pub exit_histogram: Vec<usize>,
}

/// One row per budget. Anytime budgets are per sample; budgeted budgets are
/// for the whole test set, with thresholds calibrated on `valid`.
pub fn accuracy_vs_budget_curve(
    costs: &[f64],
    test: &OutcomeTable,
    valid: &OutcomeTable,
    mode: CurveMode,
    budgets: &[f64],
) -> Result<Vec<CurveRow>> {
    if test.is_empty() && !budgets.is_empty() {
        return Err(ScaiError::Empty("test split"));
    }
    let n = test.len();
    let validation = valid.confidences();
    budgets
        .iter()
        .map(|&budget| {
            let exits = match mode {
                CurveMode::Anytime => vec![anytime_exit(costs, budget).0; n],
                CurveMode::Budgeted => {
                    let plan = BudgetPlan::new(costs, n, budget, &validation)?;
                    test.threshold_exits(&plan.thresholds)
                }
            };
            let score = test.score(&exits);
            Ok(CurveRow {
                mode,
                budget,
                realized_flops_mean: score.total_flops as f64 / n as f64,
                accuracy: score.accuracy,
                exit_histogram: score.histogram,
            })
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("mode,budget,realized_flops_mean,accuracy,exit_histogram\n");
    for r in rows {
        let hist: Vec<String> = r.exit_histogram.iter().map(|h| h.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode.as_str(),
            r.budget,
            r.realized_flops_mean,
            r.accuracy,
            hist.join(";")
        ));
    }
    out
}
