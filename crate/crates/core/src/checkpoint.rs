//! Plain-text model checkpoints.
//!
//! ```text
//! scai-checkpoint 1
//! config {"blocks":4,...}
//! tensor block1.transfer.weight 16,1,3
//! 0.0123 -0.4 ...
//! tensor block1.transfer.bias 16
//! ...
//! ```
//!
//! Each `tensor` line is followed by one line holding its values in
//! shortest round-trip form, so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Result, ScaiError};
use crate::model::{ScaiConfig, ScaiModel};
use crate::tensor::Tensor;

pub const MAGIC: &str = "scai-checkpoint 1";

/// Largest model a checkpoint may describe, in scalars.
pub const MAX_PARAMETERS: u128 = 1 << 28;

pub fn to_string(model: &ScaiModel) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let config = serde_json::to_string(model.config()).expect("config serializes");
    let _ = writeln!(out, "config {config}");
    for (name, t) in model.params().iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "tensor {name} {}", shape.join(","));
        let mut first = true;
        for v in t.data() {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn save(model: &ScaiModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(model)).map_err(|e| ScaiError::io(path, e))
}

pub fn load(path: &Path) -> Result<ScaiModel> {
    let text = std::fs::read_to_string(path).map_err(|e| ScaiError::io(path, e))?;
    parse(&text, &path.display().to_string())
}

/// Parses a checkpoint; `source` names the input in error messages.
pub fn parse(text: &str, source: &str) -> Result<ScaiModel> {
    let err = |line: usize, m: String| ScaiError::parse(source, line, m);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(err(1, format!("expected `{MAGIC}`"))),
    }
    let (line, cfg) = lines.next().ok_or_else(|| err(2, "missing config line".into()))?;
    let json = cfg
        .strip_prefix("config ")
        .ok_or_else(|| err(line, "expected `config <json>`".into()))?;
    let config: ScaiConfig = serde_json::from_str(json).map_err(|e| err(line, format!("config: {e}")))?;
    config.validate().map_err(|e| err(line, e.to_string()))?;
    let expected = config.parameter_count();
    if expected > MAX_PARAMETERS {
        return Err(err(line, format!("model with {expected} parameters exceeds the limit")));
    }

    let mut params = ParamStore::new();
    let mut scalars: u128 = 0;
    while let Some((line, header)) = lines.next() {
        if header.is_empty() {
            continue;
        }
        let mut parts = header.split(' ');
        if parts.next() != Some("tensor") {
            return Err(err(line, "expected `tensor <name> <shape>`".into()));
        }
        let (Some(name), Some(shape), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(err(line, "expected `tensor <name> <shape>`".into()));
        };
        let shape = shape
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(line, format!("shape: {e}")))?;
        if params.id(name).is_some() {
            return Err(err(line, format!("duplicate tensor {name}")));
        }
        let (vline, values) = lines
            .next()
            .ok_or_else(|| err(line + 1, format!("missing values for {name}")))?;
        let data = values
            .split(' ')
            .filter(|v| !v.is_empty())
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| err(vline, format!("bad value for {name}")))?;
        scalars += data.len() as u128;
        let tensor = Tensor::new(shape, data).map_err(|e| err(vline, format!("{name}: {e}")))?;
        params.insert(name, tensor.with_grad());
    }
    if scalars != expected {
        return Err(ScaiError::parse(
            source,
            0,
            format!("configuration needs {expected} parameters, checkpoint holds {scalars}"),
        ));
    }
    ScaiModel::from_parts(config, params).map_err(|e| ScaiError::parse(source, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScaiModel {
        let config = ScaiConfig {
            input_width: 16,
            ..ScaiConfig::default().with_depth(2, 2, 2)
        };
        ScaiModel::build(config).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = tiny();
        let text = to_string(&model);
        let back = parse(&text, "mem").unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.config(), model.config());
        assert_eq!(to_string(&back), text);
    }

    #[test]
    fn errors_name_the_line() {
        let text = to_string(&tiny());
        let mut lines: Vec<&str> = text.lines().collect();
        lines[4] = "0.1 nope";
        match parse(&lines.join("\n"), "mem").unwrap_err() {
            ScaiError::Parse { line, .. } => assert_eq!(line, 5),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse("garbage", "mem"), Err(ScaiError::Parse { line: 1, .. })));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let text = to_string(&tiny());
        let cut = &text[..text.len() / 2];
        assert!(parse(cut, "mem").is_err());
    }
}
