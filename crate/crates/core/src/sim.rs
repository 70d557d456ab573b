//! Logical-time simulation of on-device early exiting with offload of
//! intermediate features to a compute center.
//!
//! Every sample draws an anytime budget `B`. Its target exit is the deepest
//! one whose static cost fits `B` (exit 1 if none does). Exits run in order
//! and stop early once a confidence threshold fires. Exits whose static cost
//! exceeds the device's `B_max` run on the server: the feature map reached so
//! far is encoded, shipped and resumed there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaiError};
use crate::model::{ExitOutcome, ExitRunner, ScaiModel};
use crate::policy::anytime_exit;
use crate::synth::Dataset;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Multiply-accumulates per millisecond.
    pub compute_rate: f64,
    /// Largest static cost the device may run per sample.
    pub b_max: f64,
    /// Uplink bytes per millisecond.
    pub bandwidth: f64,
    pub rtt_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BudgetDistribution {
    Exponential { mean: f64 },
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl BudgetDistribution {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            BudgetDistribution::Exponential { mean } => mean > 0.0 && mean.is_finite(),
            BudgetDistribution::Fixed { value } => value >= 0.0,
            BudgetDistribution::Uniform { low, high } => low >= 0.0 && high >= low && high.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(ScaiError::Config(format!("invalid budget distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            BudgetDistribution::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            BudgetDistribution::Fixed { value } => value,
            BudgetDistribution::Uniform { low, high } => {
                if high > low {
                    rng.random_range(low..high)
                } else {
                    low
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub devices: Vec<DeviceProfile>,
    /// Server multiply-accumulates per millisecond.
    pub server_rate: f64,
    /// Number of arriving samples; sample `i` is curve `i mod n` of the data
    /// and is handled by device `i mod devices`.
    pub workload: usize,
    pub budget: BudgetDistribution,
    pub seed: u64,
    /// Probability that an offload payload is damaged in transit.
    #[serde(default)]
    pub corruption: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(ScaiError::Empty("device list"));
        }
        if self.workload == 0 {
            return Err(ScaiError::Empty("workload"));
        }
        for d in &self.devices {
            let rates = [d.compute_rate, d.bandwidth];
            if rates.iter().any(|r| !(*r > 0.0)) || !(d.b_max >= 0.0) || !(d.rtt_ms >= 0.0) {
                return Err(ScaiError::Config(format!("device {}: rates must be positive", d.name)));
            }
        }
        if !(self.server_rate > 0.0) {
            return Err(ScaiError::Config("server rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption) {
            return Err(ScaiError::Config("corruption must lie in [0, 1]".into()));
        }
        self.budget.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
            ScaiError::parse("scenario", line, e.message().to_string())
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

pub const PAYLOAD_MAGIC: &[u8; 8] = b"SCAIFEAT";
const HEADER_LEN: usize = 8 + 1 + 4 + 4 + 4;

/// Frames `x^split` as magic, version, split, channels, width, little-endian
/// values and a CRC-32 of everything before it.
pub fn encode_payload(split: usize, features: &Tensor) -> Vec<u8> {
    let (c, w) = match features.shape() {
        [c, w] => (*c, *w),
        _ => (1, features.numel()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * features.numel() + 4);
    out.extend_from_slice(PAYLOAD_MAGIC);
    out.push(1);
    for v in [split, c, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_payload(bytes: &[u8]) -> Result<(usize, Tensor)> {
    if bytes.len() < 4 {
        return Err(ScaiError::Checksum {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ScaiError::Checksum { stored, computed });
    }
    if body.len() < HEADER_LEN || &body[..8] != PAYLOAD_MAGIC {
        return Err(ScaiError::Payload("missing header".into()));
    }
    if body[8] != 1 {
        return Err(ScaiError::Payload(format!("unsupported version {}", body[8])));
    }
    let word = |i: usize| u32::from_le_bytes(body[9 + 4 * i..13 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (split, c, w) = (word(0), word(1), word(2));
    let values = &body[HEADER_LEN..];
    let expected = c.checked_mul(w).and_then(|n| n.checked_mul(8));
    if expected != Some(values.len()) {
        return Err(ScaiError::Payload(format!(
            "{c}×{w} features need {} bytes, found {}",
            c.saturating_mul(w).saturating_mul(8),
            values.len()
        )));
    }
    let data = values
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok((split, Tensor::new(vec![c, w], data)?))
}

/// Server side of an offload: decode and finish the remaining exits up to
/// `target`, stopping early when a threshold fires.
pub fn resume_from_payload(
    model: &ScaiModel,
    payload: &[u8],
    target: usize,
    thresholds: &[f64],
) -> Result<(usize, ExitOutcome)> {
    let (split, features) = decode_payload(payload)?;
    let mut runner = ExitRunner::from_features(model, split, features)?;
    loop {
        let out = runner.advance()?;
        if out.exit_index >= target || out.confidence >= thresholds[out.exit_index - 1] {
            return Ok((split, out));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub sample: usize,
    pub device: usize,
    pub budget: f64,
    /// `None` when the payload was lost.
    pub exit_index: Option<usize>,
    pub correct: Option<bool>,
    pub offloaded: bool,
    /// Feature map shipped (`0` = raw input), if offloaded.
    pub split_block: Option<usize>,
    pub payload_bytes: usize,
    pub latency_ms: f64,
    pub flops_device: u64,
    pub flops_server: u64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub devices: Vec<String>,
    pub records: Vec<SimRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimAggregate {
    pub samples: usize,
    pub classified: usize,
    pub failed: usize,
    pub offloaded: usize,
    pub accuracy: f64,
    pub mean_latency_ms: f64,
    pub mean_offload_latency_ms: f64,
    pub mean_flops_device: f64,
    pub mean_flops_server: f64,
}

impl SimAggregate {
    fn of<'a>(records: impl Iterator<Item = &'a SimRecord>) -> Self {
        let rs: Vec<&SimRecord> = records.collect();
        let n = rs.len();
        let mean = |f: &dyn Fn(&SimRecord) -> f64, rs: &[&SimRecord]| {
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64
            }
        };
        let classified: Vec<&SimRecord> = rs.iter().copied().filter(|r| !r.failed).collect();
        let offloaded: Vec<&SimRecord> = rs.iter().copied().filter(|r| r.offloaded && !r.failed).collect();
        SimAggregate {
            samples: n,
            classified: classified.len(),
            failed: n - classified.len(),
            offloaded: rs.iter().filter(|r| r.offloaded).count(),
            accuracy: mean(&|r| (r.correct == Some(true)) as u8 as f64, &classified),
            mean_latency_ms: mean(&|r| r.latency_ms, &classified),
            mean_offload_latency_ms: mean(&|r| r.latency_ms, &offloaded),
            mean_flops_device: mean(&|r| r.flops_device as f64, &rs),
            mean_flops_server: mean(&|r| r.flops_server as f64, &rs),
        }
    }

    pub fn offload_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.offloaded as f64 / self.samples as f64
        }
    }
}

impl SimResult {
    pub fn aggregate(&self) -> SimAggregate {
        SimAggregate::of(self.records.iter())
    }

    pub fn device_aggregate(&self, device: usize) -> SimAggregate {
        SimAggregate::of(self.records.iter().filter(|r| r.device == device))
    }
}

/// Runs the scenario over `data`. Deterministic given the scenario seed.
pub fn simulate(model: &ScaiModel, thresholds: &[f64], scenario: &Scenario, data: &Dataset) -> Result<SimResult> {
    scenario.validate()?;
    if data.is_empty() {
        return Err(ScaiError::Empty("workload data"));
    }
    if thresholds.len() != model.num_exits() {
        return Err(ScaiError::ShapeMismatch {
            op: "simulate",
            dim: "thresholds",
            expected: model.num_exits(),
            found: thresholds.len(),
        });
    }
    let costs = model.static_cost_table().as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut records = Vec::with_capacity(scenario.workload);
    for sample in 0..scenario.workload {
        let device_idx = sample % scenario.devices.len();
        let device = &scenario.devices[device_idx];
        let curve = &data.curves[sample % data.len()];
        let budget = scenario.budget.sample(&mut rng);
        let corrupt = rng.random::<f64>() < scenario.corruption;
        let (target, _) = anytime_exit(&costs, budget);

        let mut runner = ExitRunner::new(model, &curve.values)?;
        let mut outcome = None;
        while runner.next_exit() <= target && costs[runner.next_exit() - 1] <= device.b_max {
            let out = runner.advance()?;
            let done = out.exit_index == target || out.confidence >= thresholds[out.exit_index - 1];
            outcome = Some(out);
            if done {
                break;
            }
        }
        let flops_device = runner.flops();
        let device_ms = flops_device as f64 / device.compute_rate;
        let resolved = outcome
            .as_ref()
            .is_some_and(|o| o.exit_index == target || o.confidence >= thresholds[o.exit_index - 1]);

        let mut record = SimRecord {
            sample,
            device: device_idx,
            budget,
            exit_index: None,
            correct: None,
            offloaded: !resolved,
            split_block: None,
            payload_bytes: 0,
            latency_ms: device_ms,
            flops_device,
            flops_server: 0,
            failed: false,
        };
        let final_outcome = if resolved {
            outcome
        } else {
            let split = runner.next_exit() - 1;
            let mut payload = encode_payload(split, &runner.features());
            if corrupt {
                payload.truncate(payload.len() / 2);
            }
            record.split_block = Some(split);
            record.payload_bytes = payload.len();
            record.latency_ms += payload.len() as f64 / device.bandwidth + device.rtt_ms;
            match resume_from_payload(model, &payload, target, thresholds) {
                Ok((_, out)) => {
                    record.flops_server = out.flops_used;
                    record.latency_ms += out.flops_used as f64 / scenario.server_rate;
                    Some(out)
                }
                Err(ScaiError::Checksum { .. }) => {
                    record.failed = true;
                    None
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(out) = final_outcome {
            record.exit_index = Some(out.exit_index);
            record.correct = Some(out.prediction == curve.label);
        }
        records.push(record);
    }
    Ok(SimResult {
        devices: scenario.devices.iter().map(|d| d.name.clone()).collect(),
        records,
    })
}

const REPORT_HEADER: &str = "scope,samples,classified,failed,offloaded,offload_fraction,accuracy,mean_latency_ms,mean_offload_latency_ms,mean_flops_device,mean_flops_server\n";

/// One row per device in scenario order, then an `all` row.
pub fn latency_report(result: &SimResult) -> String {
    let mut out = String::from(REPORT_HEADER);
    if result.records.is_empty() {
        return out;
    }
    let row = |scope: &str, a: &SimAggregate| {
        format!(
            "{scope},{},{},{},{},{},{},{},{},{},{}\n",
            a.samples,
            a.classified,
            a.failed,
            a.offloaded,
            a.offload_fraction(),
            a.accuracy,
            a.mean_latency_ms,
            a.mean_offload_latency_ms,
            a.mean_flops_device,
            a.mean_flops_server
        )
    };
    for (i, name) in result.devices.iter().enumerate() {
        out.push_str(&row(name, &result.device_aggregate(i)));
    }
    out.push_str(&row("all", &result.aggregate()));
    out
}

/// Per-sample records as CSV.
pub fn records_csv(result: &SimResult) -> String {
    let mut out = String::from(
        "sample,device,budget,exit_index,correct,offloaded,split_block,payload_bytes,latency_ms,flops_device,flops_server,failed\n",
    );
    let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
    for r in &result.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.sample,
            result.devices[r.device],
            r.budget,
            opt(r.exit_index),
            r.correct.map_or(String::new(), |c| c.to_string()),
            r.offloaded,
            opt(r.split_block),
            r.payload_bytes,
            r.latency_ms,
            r.flops_device,
            r.flops_server,
            r.failed
        ));
    }
    out
}
