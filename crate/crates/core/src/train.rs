//! Self-distillation training with ponder-cost regularization, Adam and
//! early stopping on final-exit validation accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_value, Graph, ParamGrads, Var, PROB_CLAMP};
use crate::error::{Result, ScaiError};
use crate::model::{argmax, ScaiConfig, ScaiModel};
use crate::optim::{AdamConfig, AdamState};
use crate::synth::{sample_seed, Dataset};

/// Which distribution supervises intermediate exits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// Every intermediate exit learns from the deepest one.
    #[default]
    FinalExit,
    /// Exit `l` learns from exit `l + 1`.
    NextExit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub teacher: TeacherMode,
    /// Adds a cross-entropy term at intermediate exits on top of the
    /// distillation terms. Off by default.
    pub intermediate_hard_labels: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            patience: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            teacher: TeacherMode::FinalExit,
            intermediate_hard_labels: false,
            seed: 0,
        }
    }
}

/// Loss options that depend on both the model and the training config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub distill: bool,
    pub teacher: TeacherMode,
    pub intermediate_hard_labels: bool,
    pub gamma: f64,
}

impl LossSpec {
    pub fn new(model: &ScaiConfig, train: &TrainConfig) -> Self {
        LossSpec {
            distill: model.distill_enabled,
            teacher: train.teacher,
            intermediate_hard_labels: train.intermediate_hard_labels,
            gamma: model.gamma,
        }
    }
}

/// Per-exit supervision on the tape.
pub fn task_loss(g: &mut Graph<'_>, probs: &[Var], label: usize, spec: &LossSpec) -> Result<Var> {
    let last = *probs.last().ok_or(ScaiError::Empty("exit outputs"))?;
    let mut terms = Vec::with_capacity(probs.len() + 1);
    for (l, &p) in probs.iter().enumerate().take(probs.len() - 1) {
        if spec.distill {
            let teacher = match spec.teacher {
                TeacherMode::FinalExit => last,
                TeacherMode::NextExit => probs[l + 1],
            };
            terms.push(g.kl_div(teacher, p)?);
            if spec.intermediate_hard_labels {
                terms.push(g.cross_entropy(p, label)?);
            }
        } else {
            terms.push(g.cross_entropy(p, label)?);
        }
    }
    terms.push(g.cross_entropy(last, label)?);
    Ok(g.sum(&terms))
}

/// Task loss plus `gamma` times the summed block ponder costs.
pub fn total_loss(g: &mut Graph<'_>, task: Var, ponders: &[Var], gamma: f64) -> Var {
    if ponders.is_empty() || gamma == 0.0 {
        return task;
    }
    let rho = g.sum(ponders);
    let reg = g.scale(rho, gamma);
    g.sum(&[task, reg])
}

/// Clamped cross-entropy of a distribution against a label.
pub fn cross_entropy_value(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(ScaiError::LabelOutOfRange {
        label,
        classes: probs.len(),
    })?;
    Ok(-p.clamp(PROB_CLAMP, 1.0).ln())
}

/// Scalar form of [`task_loss`].
pub fn task_loss_value(probs: &[Vec<f64>], label: usize, spec: &LossSpec) -> Result<f64> {
    let last = probs.last().ok_or(ScaiError::Empty("exit outputs"))?;
    let mut total = 0.0;
    for (l, p) in probs.iter().enumerate().take(probs.len() - 1) {
        if spec.distill {
            let teacher = match spec.teacher {
                TeacherMode::FinalExit => last,
                TeacherMode::NextExit => &probs[l + 1],
            };
            total += kl_value(teacher, p);
            if spec.intermediate_hard_labels {
                total += cross_entropy_value(p, label)?;
            }
        } else {
            total += cross_entropy_value(p, label)?;
        }
    }
    Ok(total + cross_entropy_value(last, label)?)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(task: f64, rho: &[f64], gamma: f64) -> f64 {
    task + gamma * rho.iter().sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Valid,
}

impl SplitKind {
    fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Valid => "valid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// 1-based exit index.
    pub exit: usize,
    pub split: SplitKind,
    pub accuracy: f64,
    /// Mean cross-entropy of this exit.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Mean total training loss per epoch.
    pub train_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub stop_epoch: usize,
    pub seed: u64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,exit,split,accuracy,loss\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                r.exit,
                r.split.as_str(),
                r.accuracy,
                r.loss
            ));
        }
        out
    }

    /// Accuracy trace of one exit on one split, in epoch order.
    pub fn accuracy_trace(&self, exit: usize, split: SplitKind) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.exit == exit && r.split == split)
            .map(|r| r.accuracy)
            .collect()
    }
}

/// Per-exit accuracy and mean cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitMetrics {
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
}

/// Evaluates every exit on every curve without early exiting.
pub fn evaluate(model: &ScaiModel, data: &Dataset) -> Result<ExitMetrics> {
    if data.is_empty() {
        return Err(ScaiError::Empty("evaluation split"));
    }
    let per_sample = data
        .curves
        .par_iter()
        .map(|c| {
            let outs = model.forward_all_exits(&c.values)?;
            outs.iter()
                .map(|o| Ok((o.prediction == c.label, cross_entropy_value(&o.probs, c.label)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce_metrics(&per_sample, model.num_exits()))
}

fn reduce_metrics(per_sample: &[Vec<(bool, f64)>], exits: usize) -> ExitMetrics {
    let n = per_sample.len() as f64;
    let mut accuracy = vec![0.0; exits];
    let mut loss = vec![0.0; exits];
    for s in per_sample {
        for (l, &(hit, ce)) in s.iter().enumerate() {
            accuracy[l] += hit as u8 as f64;
            loss[l] += ce;
        }
    }
    accuracy.iter_mut().for_each(|a| *a /= n);
    loss.iter_mut().for_each(|a| *a /= n);
    ExitMetrics { accuracy, loss }
}

struct SampleStep {
    grads: ParamGrads,
    loss: f64,
    exits: Vec<(bool, f64)>,
}

fn sample_step(model: &ScaiModel, curve: &[f64], label: usize, spec: &LossSpec) -> Result<SampleStep> {
    let mut g = Graph::new(model.params());
    let input = g.constant(model.input_tensor(curve)?);
    let halting = model.config().pa_enabled.then(|| model.config().halting());
    let pass = model.forward_graph(&mut g, input, model.num_exits(), halting)?;
    let task = task_loss(&mut g, &pass.probs, label, spec)?;
    let loss = total_loss(&mut g, task, &pass.ponders, spec.gamma);
    let exits = pass
        .probs
        .iter()
        .map(|&p| {
            let probs = g.value(p);
            Ok((argmax(probs).0 == label, cross_entropy_value(probs, label)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleStep {
        grads: g.backward(loss),
        loss: g.scalar(loss),
        exits,
    })
}

/// Trains `model` in place and returns the per-epoch report. The model ends
/// up holding the parameters of the best validation epoch.
pub fn train(model: &mut ScaiModel, train_set: &Dataset, valid_set: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    train_with(model, train_set, valid_set, config, |_, _| {})
}

/// [`train`] with a callback invoked after every epoch with the epoch number
/// and whether it set a new best validation accuracy.
pub fn train_with(
    model: &mut ScaiModel,
    train_set: &Dataset,
    valid_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, bool),
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(ScaiError::Empty("training split"));
    }
    if valid_set.is_empty() {
        return Err(ScaiError::Empty("validation split"));
    }
    if config.batch_size == 0 {
        return Err(ScaiError::Config("batch size must be positive".into()));
    }
    let spec = LossSpec::new(model.config(), config);
    let exits = model.num_exits();
    let mut adam = AdamState::new(config.adam.clone(), model.params());
    let mut report = TrainReport {
        records: Vec::new(),
        train_loss: Vec::new(),
        best_epoch: 0,
        best_valid_accuracy: f64::NEG_INFINITY,
        stop_epoch: 0,
        seed: config.seed,
    };
    let mut best_params = model.params().clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut train_exits = Vec::with_capacity(train_set.len());
        for batch in order.chunks(config.batch_size) {
            let steps = batch
                .par_iter()
                .map(|&i| {
                    let c = &train_set.curves[i];
                    sample_step(model, &c.values, c.label, &spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = ParamGrads::zeros_like(model.params());
            for s in steps {
                grads.add_assign(&s.grads);
                epoch_loss += s.loss;
                train_exits.push(s.exits);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model.params_mut(), &grads);
        }
        report.train_loss.push(epoch_loss / train_set.len() as f64);

        let train_metrics = reduce_metrics(&train_exits, exits);
        let valid_metrics = evaluate(model, valid_set)?;
        for (split, m) in [(SplitKind::Train, &train_metrics), (SplitKind::Valid, &valid_metrics)] {
            for l in 0..exits {
                report.records.push(EpochRecord {
                    epoch,
                    exit: l + 1,
                    split,
                    accuracy: m.accuracy[l],
                    loss: m.loss[l],
                });
            }
        }
        report.stop_epoch = epoch;

        let val = valid_metrics.accuracy[exits - 1];
        let improved = val > report.best_valid_accuracy;
        if improved {
            report.best_valid_accuracy = val;
            report.best_epoch = epoch;
            best_params = model.params().clone();
        }
        log::debug!(
            "epoch {epoch}: loss {:.4} valid {:?}",
            report.train_loss[epoch - 1],
            valid_metrics.accuracy
        );
        on_epoch(epoch, improved);
        if epoch - report.best_epoch >= config.patience {
            break;
        }
    }
    *model.params_mut() = best_params;
    Ok(report)
}

/// Axes of a hyperparameter grid. Empty axes fall back to the base config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub blocks: Vec<usize>,
    pub units: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl GridSpec {
    /// The search sets used for the published configuration.
    pub fn reference() -> Self {
        GridSpec {
            blocks: vec![1, 2, 3, 4],
            units: vec![1, 2, 3, 4],
            epsilon: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            gamma: vec![1e-6, 1e-5, 1e-4, 1e-3],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && self.units.is_empty() && self.epsilon.is_empty() && self.gamma.is_empty()
    }

    /// Every configuration on the grid; an empty spec yields no configurations.
    pub fn configs(&self, base: &ScaiConfig) -> Vec<ScaiConfig> {
        if self.is_empty() {
            return Vec::new();
        }
        fn axis<T: Copy>(v: &[T], fallback: T) -> Vec<T> {
            if v.is_empty() {
                vec![fallback]
            } else {
                v.to_vec()
            }
        }
        let base_units = base.units.first().copied().unwrap_or(1);
        let mut out = Vec::new();
        for &blocks in &axis(&self.blocks, base.blocks) {
            for &units in &axis(&self.units, base_units) {
                for &epsilon in &axis(&self.epsilon, base.epsilon) {
                    for &gamma in &axis(&self.gamma, base.gamma) {
                        let mut c = base.clone().with_depth(blocks, units, base.channels[0]);
                        c.epsilon = epsilon;
                        c.gamma = gamma;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub config: ScaiConfig,
    pub best_epoch: usize,
    pub test_accuracy: Vec<f64>,
    pub mean_flops: f64,
}

/// Trains every grid configuration with the same seeds and scores it on `test`.
pub fn hyper_sweep(
    grid: &GridSpec,
    base: &ScaiConfig,
    train_config: &TrainConfig,
    splits: (&Dataset, &Dataset, &Dataset),
) -> Result<Vec<SweepRow>> {
    let (train_set, valid_set, test_set) = splits;
    grid.configs(base)
        .into_iter()
        .map(|config| {
            let mut model = ScaiModel::build(config.clone())?;
            let report = train(&mut model, train_set, valid_set, train_config)?;
            let metrics = evaluate(&model, test_set)?;
            let flops: u64 = test_set
                .curves
                .iter()
                .map(|c| Ok(model.forward_to_exit(&c.values, model.num_exits())?.flops_used))
                .sum::<Result<u64>>()?;
            Ok(SweepRow {
                config,
                best_epoch: report.best_epoch,
                test_accuracy: metrics.accuracy,
                mean_flops: flops as f64 / test_set.len() as f64,
            })
        })
        .collect()
}

/// CSV with one row per configuration; per-exit accuracies are `;`-joined.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("blocks,units,epsilon,gamma,best_epoch,final_accuracy,exit_accuracies,mean_flops\n");
    for r in rows {
        let acc: Vec<String> = r.test_accuracy.iter().map(|a| a.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.config.blocks,
            r.config.units.first().copied().unwrap_or(0),
            r.config.epsilon,
            r.config.gamma,
            r.best_epoch,
            r.test_accuracy.last().copied().unwrap_or(0.0),
            acc.join(";"),
            r.mean_flops
        ));
    }
    out
}
