//! Synthetic spectral curves.
//!
//! Each class is a recipe of Gaussian Raman peaks on top of a broad
//! fluorescence background. Every class shares the dominant ethanol peaks;
//! classes in the same flavor group share a background and differ only in a
//! few minor peaks, some of them only a handful of positions apart. Every
//! sample gets a global position shift, per-peak amplitude jitter, white
//! noise and an intensity scale, and is then min-max normalized.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaiError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub center: f64,
    /// Standard deviation in positions.
    pub width: f64,
    pub amplitude: f64,
    /// Per-sample position jitter (uniform in ±value) on top of the global shift.
    #[serde(default)]
    pub jitter: f64,
    /// Distance between the two lines of a doublet; 0 for a single line.
    #[serde(default)]
    pub split: f64,
}

impl Peak {
    pub fn new(center: f64, width: f64, amplitude: f64) -> Self {
        Peak {
            center,
            width,
            amplitude,
            jitter: 0.0,
            split: 0.0,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn doublet(mut self, split: f64) -> Self {
        self.split = split;
        self
    }

    fn at(&self, x: f64, shift: f64, amp: f64) -> f64 {
        let line = |c: f64| {
            let d = (x - c - shift) / self.width;
            amp * (-0.5 * d * d).exp()
        };
        if self.split > 0.0 {
            line(self.center - 0.5 * self.split) + line(self.center + 0.5 * self.split)
        } else {
            line(self.center)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub label: usize,
    /// Raman peaks, shared ethanol peaks first.
    pub peaks: Vec<Peak>,
    /// Broad fluorescence background.
    pub background: Peak,
    /// White-noise standard deviation before normalization.
    pub noise: f64,
    /// Per-sample intensity scale range.
    pub intensity_jitter: (f64, f64),
    /// Relative per-peak amplitude jitter (uniform in ±value).
    pub amplitude_jitter: f64,
    /// Global position shift range (uniform in ±value).
    pub shift_jitter: f64,
}

impl ClassRecipe {
    pub fn validate(&self, width: usize) -> Result<()> {
        for p in self.peaks.iter().chain(std::iter::once(&self.background)) {
            if !(p.center >= 0.0 && p.center < width as f64) {
                return Err(ScaiError::Config(format!(
                    "class {}: peak center {} outside [0, {width})",
                    self.label, p.center
                )));
            }
            if !(p.width > 0.0) || p.amplitude < 0.0 || p.jitter < 0.0 || p.split < 0.0 {
                return Err(ScaiError::Config(format!(
                    "class {}: peak needs positive width and non-negative amplitude, jitter and split",
                    self.label
                )));
            }
        }
        let (lo, hi) = self.intensity_jitter;
        if !(lo > 0.0 && hi >= lo) || self.noise < 0.0 || self.amplitude_jitter < 0.0 || self.shift_jitter < 0.0 {
            return Err(ScaiError::Config(format!("class {}: invalid jitter settings", self.label)));
        }
        Ok(())
    }
}

/// Shared ethanol Raman peaks on the 400-position reference axis.
pub const ETHANOL_PEAKS: [(f64, f64, f64); 3] = [(200.0, 3.0, 1.0), (112.0, 2.5, 0.35), (288.0, 3.0, 0.45)];

#[derive(Clone, Copy)]
enum Motif {
    Narrow,
    Broad,
    Doublet,
}

/// The frozen 12-class recipe set, laid out for `width` positions.
///
/// Classes 0–2, 3–5 and 6–11 form three flavor groups whose fluorescence
/// backgrounds sit around a shared center. Each class has its own background
/// width and height, which with the per-sample jitter separates some samples
/// from coarse shape alone and leaves others overlapping. Classes are fully
/// told apart only by their minor-peak motifs (narrow line, broad band,
/// doublet), whose positions wander from sample to sample.
pub fn default_recipes(width: usize) -> Vec<ClassRecipe> {
    use Motif::*;
    let k = width as f64 / 400.0;
    let centers = [140.0, 230.0, 300.0];
    let widths = [40.0, 65.0, 90.0];
    let heights = [0.2, 0.35, 0.5, 0.65];
    let minor: [&[(Motif, f64)]; 12] = [
        &[(Narrow, 50.0)],
        &[(Narrow, 50.0), (Narrow, 250.0)],
        &[(Narrow, 50.0), (Broad, 250.0)],
        &[(Broad, 150.0)],
        &[(Broad, 150.0), (Broad, 345.0)],
        &[(Broad, 150.0), (Doublet, 345.0)],
        &[(Doublet, 50.0)],
        &[(Doublet, 50.0), (Doublet, 250.0)],
        &[(Doublet, 50.0), (Narrow, 250.0)],
        &[(Doublet, 50.0), (Narrow, 250.0), (Narrow, 345.0)],
        &[(Doublet, 50.0), (Broad, 250.0)],
        &[(Doublet, 50.0), (Broad, 250.0), (Narrow, 345.0)],
    ];
    (0..12)
        .map(|label| {
            let group = match label {
                0..=2 => 0,
                3..=5 => 1,
                _ => 2,
            };
            let background = Peak::new(centers[group] * k, widths[label % 3] * k, heights[label / 3]).with_jitter(10.0 * k);
            let mut peaks: Vec<Peak> = ETHANOL_PEAKS
                .iter()
                .map(|&(c, w, a)| Peak::new(c * k, w * k, a))
                .collect();
            peaks.extend(minor[label].iter().map(|&(motif, c)| {
                let peak = match motif {
                    Narrow => Peak::new(c * k, 1.5 * k, 0.3),
                    Broad => Peak::new(c * k, 6.0 * k, 0.3),
                    Doublet => Peak::new(c * k, 1.5 * k, 0.3).doublet(6.0 * k),
                };
                peak.with_jitter(15.0 * k)
            }));
            ClassRecipe {
                label,
                peaks,
                background,
                noise: 0.02,
                intensity_jitter: (0.8, 1.2),
                amplitude_jitter: 0.3,
                shift_jitter: 4.0 * k,
            }
        })
        .collect()
}

/// Every distinct peak center across a recipe set.
pub fn peak_positions(recipes: &[ClassRecipe]) -> Vec<f64> {
    let mut centers: Vec<f64> = recipes
        .iter()
        .flat_map(|r| r.peaks.iter().map(|p| p.center))
        .collect();
    centers.sort_by(f64::total_cmp);
    centers.dedup();
    centers
}

/// Flags the positions of a `block_width`-wide feature map whose input
/// coordinate can fall under a recipe peak: within two widths of its
/// center, widened by its position jitter, doublet half-split and the
/// recipe's global shift.
pub fn peak_mask(recipes: &[ClassRecipe], input_width: usize, block_width: usize) -> Vec<bool> {
    let extents: Vec<(f64, f64)> = recipes
        .iter()
        .flat_map(|r| {
            r.peaks
                .iter()
                .map(move |p| (p.center, 2.0 * p.width + p.jitter + p.split / 2.0 + r.shift_jitter))
        })
        .collect();
    let scale = input_width as f64 / block_width as f64;
    (0..block_width)
        .map(|i| {
            let x = i as f64 * scale;
            extents.iter().any(|(c, r)| (x - c).abs() <= *r)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralCurve {
    pub sample_id: usize,
    pub label: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub width: usize,
    pub num_classes: usize,
    pub curves: Vec<SpectralCurve>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for c in &self.curves {
            counts[c.label] += 1;
        }
        counts
    }
}

/// Min-max normalization to `[0, 1]`.
pub fn normalize(values: &[f64]) -> Result<Vec<f64>> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) || !range.is_finite() {
        return Err(ScaiError::DegenerateCurve(format!(
            "cannot normalize a curve with range {range}"
        )));
    }
    Ok(values.iter().map(|v| (v - min) / range).collect())
}

/// Mixes a master seed with a sample index (splitmix64 finalizer).
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one normalized curve from a recipe.
pub fn synth_curve<R: Rng + ?Sized>(recipe: &ClassRecipe, width: usize, rng: &mut R) -> Result<Vec<f64>> {
    let shift = if recipe.shift_jitter > 0.0 {
        rng.random_range(-recipe.shift_jitter..=recipe.shift_jitter)
    } else {
        0.0
    };
    let (lo, hi) = recipe.intensity_jitter;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let jitter = |rng: &mut R| {
        if recipe.amplitude_jitter > 0.0 {
            1.0 + rng.random_range(-recipe.amplitude_jitter..=recipe.amplitude_jitter)
        } else {
            1.0
        }
    };
    let amps: Vec<f64> = recipe.peaks.iter().map(|p| p.amplitude * jitter(rng)).collect();
    let offsets: Vec<f64> = recipe
        .peaks
        .iter()
        .map(|p| {
            if p.jitter > 0.0 {
                shift + rng.random_range(-p.jitter..=p.jitter)
            } else {
                shift
            }
        })
        .collect();
    let bg_amp = recipe.background.amplitude * jitter(rng);
    let bg_offset = if recipe.background.jitter > 0.0 {
        shift + rng.random_range(-recipe.background.jitter..=recipe.background.jitter)
    } else {
        shift
    };
    let raw: Vec<f64> = (0..width)
        .map(|x| {
            let x = x as f64;
            let signal: f64 = recipe
                .peaks
                .iter()
                .zip(amps.iter().zip(&offsets))
                .map(|(p, (&a, &o))| p.at(x, o, a))
                .sum::<f64>()
                + recipe.background.at(x, bg_offset, bg_amp);
            let noise: f64 = StandardNormal.sample(rng);
            scale * (signal + recipe.noise * noise)
        })
        .collect();
    normalize(&raw)
}

/// `per_class` curves for each recipe, class-major, with per-sample seeds
/// derived from `seed` and the sample id.
pub fn build_dataset(recipes: &[ClassRecipe], width: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    for (i, r) in recipes.iter().enumerate() {
        if r.label != i {
            return Err(ScaiError::Config(format!("recipe {i} carries label {}", r.label)));
        }
        r.validate(width)?;
    }
    let curves = (0..recipes.len() * per_class)
        .into_par_iter()
        .map(|sample_id| {
            let label = sample_id / per_class;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, sample_id as u64));
            let values = synth_curve(&recipes[label], width, &mut rng)?;
            Ok(SpectralCurve {
                sample_id,
                label,
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        width,
        num_classes: recipes.len(),
        curves,
    })
}

/// Stratified split by integer ratios (e.g. `[8, 1, 1]`).
pub fn split(dataset: &Dataset, ratios: &[usize], seed: u64) -> Result<Vec<Dataset>> {
    let total: usize = ratios.iter().sum();
    if total == 0 {
        return Err(ScaiError::Split("ratios sum to zero".into()));
    }
    let mut parts: Vec<Vec<SpectralCurve>> = vec![Vec::new(); ratios.len()];
    for class in 0..dataset.num_classes {
        let mut members: Vec<&SpectralCurve> = dataset.curves.iter().filter(|c| c.label == class).collect();
        let n = members.len();
        if ratios.iter().any(|r| (n * r) % total != 0) {
            return Err(ScaiError::Split(format!(
                "class {class} has {n} samples, not divisible by ratios {ratios:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, class as u64));
        rand::seq::SliceRandom::shuffle(members.as_mut_slice(), &mut rng);
        let mut start = 0;
        for (part, r) in parts.iter_mut().zip(ratios) {
            let take = n * r / total;
            part.extend(members[start..start + take].iter().map(|c| (*c).clone()));
            start += take;
        }
    }
    Ok(parts
        .into_iter()
        .map(|mut curves| {
            curves.sort_by_key(|c| c.sample_id);
            Dataset {
                width: dataset.width,
                num_classes: dataset.num_classes,
                curves,
            }
        })
        .collect())
}

/// Writes `sample_id,label,v_0..v_{W-1}`; values use shortest round-trip formatting.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(dataset)).map_err(|e| ScaiError::io(path, e))
}

pub fn to_csv(dataset: &Dataset) -> String {
    let mut out = String::from("sample_id,label");
    for i in 0..dataset.width {
        out.push_str(&format!(",v_{i}"));
    }
    out.push('\n');
    for c in &dataset.curves {
        out.push_str(&format!("{},{}", c.sample_id, c.label));
        for v in &c.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn load_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| ScaiError::io(path, e))?;
    parse_csv(&bytes, &path.display().to_string(), num_classes)
}

/// Parses the dataset CSV; `source` names the input in error messages.
pub fn parse_csv(bytes: &[u8], source: &str, num_classes: usize) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| ScaiError::parse(source, 1, e.to_string()))?
        .clone();
    if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "label" {
        return Err(ScaiError::parse(source, 1, "expected header sample_id,label,v_0,..."));
    }
    for (i, name) in header.iter().skip(2).enumerate() {
        if name != format!("v_{i}") {
            return Err(ScaiError::parse(source, 1, format!("column {} should be v_{i}, found {name}", i + 2)));
        }
    }
    let width = header.len() - 2;
    let mut curves = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            ScaiError::parse(source, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(ScaiError::parse(
                source,
                line,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        let field = |i: usize| record.get(i).unwrap_or_default();
        let sample_id = field(0)
            .parse::<usize>()
            .map_err(|e| ScaiError::parse(source, line, format!("sample_id: {e}")))?;
        let label = field(1)
            .parse::<usize>()
            .map_err(|e| ScaiError::parse(source, line, format!("label: {e}")))?;
        if label >= num_classes {
            return Err(ScaiError::parse(
                source,
                line,
                format!("label {label} out of range for {num_classes} classes"),
            ));
        }
        let values = (2..record.len())
            .map(|i| {
                field(i)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| ScaiError::parse(source, line, format!("bad value in column {i}: {:?}", field(i))))
            })
            .collect::<Result<Vec<_>>>()?;
        curves.push(SpectralCurve {
            sample_id,
            label,
            values,
        });
    }
    Ok(Dataset {
        width,
        num_classes,
        curves,
    })
}

/// Recipe file: TOML with a `width` and an array of `[[recipes]]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeFile {
    pub width: usize,
    pub recipes: Vec<ClassRecipe>,
}

impl RecipeFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: RecipeFile = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
            ScaiError::parse("recipes", line, e.message().to_string())
        })?;
        for r in &file.recipes {
            r.validate(file.width)?;
        }
        Ok(file)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipes serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(recipe: &ClassRecipe) -> ClassRecipe {
        ClassRecipe {
            noise: 0.0,
            intensity_jitter: (1.0, 1.0),
            amplitude_jitter: 0.0,
            shift_jitter: 0.0,
            ..recipe.clone()
        }
    }

    #[test]
    fn equal_seeds_give_identical_curves() {
        let r = quiet(&default_recipes(400)[3]);
        let a = synth_curve(&r, 400, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synth_curve(&r, 400, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_peak_mode_is_at_center() {
        let r = ClassRecipe {
            label: 0,
            peaks: vec![Peak::new(200.0, 5.0, 1.0)],
            background: Peak::new(100.0, 50.0, 0.0),
            noise: 0.0,
            intensity_jitter: (1.0, 1.0),
            amplitude_jitter: 0.0,
            shift_jitter: 0.0,
        };
        let v = synth_curve(&r, 400, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let argmax = v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((argmax as i64 - 200).abs() <= 1);
    }

    #[test]
    fn zero_amplitude_recipe_is_rejected() {
        let r = ClassRecipe {
            label: 0,
            peaks: vec![Peak::new(200.0, 5.0, 0.0)],
            background: Peak::new(100.0, 50.0, 0.0),
            noise: 0.0,
            intensity_jitter: (1.0, 1.0),
            amplitude_jitter: 0.0,
            shift_jitter: 0.0,
        };
        let err = synth_curve(&r, 400, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, ScaiError::DegenerateCurve(_)));
    }

    #[test]
    fn normalized_range_and_idempotence() {
        let v = normalize(&[3.0, -1.0, 7.0, 2.5]).unwrap();
        assert_eq!(v.iter().cloned().fold(f64::MIN, f64::max), 1.0);
        assert_eq!(v.iter().cloned().fold(f64::MAX, f64::min), 0.0);
        assert_eq!(normalize(&v).unwrap(), v);
    }

    #[test]
    fn default_dataset_shape() {
        let d = build_dataset(&default_recipes(400), 400, 100, 7).unwrap();
        assert_eq!(d.len(), 1200);
        assert_eq!(d.class_counts(), vec![100; 12]);
        let one = build_dataset(&default_recipes(400), 400, 1, 7).unwrap();
        assert_eq!(one.len(), 12);
    }

    #[test]
    fn split_is_stratified_disjoint_and_exhaustive() {
        let d = build_dataset(&default_recipes(400), 400, 100, 3).unwrap();
        let parts = split(&d, &[8, 1, 1], 11).unwrap();
        assert_eq!(parts[0].class_counts(), vec![80; 12]);
        assert_eq!(parts[1].class_counts(), vec![10; 12]);
        assert_eq!(parts[2].class_counts(), vec![10; 12]);
        let mut ids: Vec<usize> = parts.iter().flat_map(|p| p.curves.iter().map(|c| c.sample_id)).collect();
        ids.sort();
        assert_eq!(ids, (0..1200).collect::<Vec<_>>());

        let other = split(&d, &[8, 1, 1], 12).unwrap();
        assert_ne!(parts[1], other[1]);
        assert_eq!(other[1].len(), 120);
    }

    #[test]
    fn infeasible_split_is_an_error() {
        let d = build_dataset(&default_recipes(400), 400, 7, 3).unwrap();
        assert!(matches!(split(&d, &[8, 1, 1], 0), Err(ScaiError::Split(_))));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = build_dataset(&default_recipes(400), 400, 2, 5).unwrap();
        let text = to_csv(&d);
        assert_eq!(parse_csv(text.as_bytes(), "mem", 12).unwrap(), d);

        let empty = Dataset {
            width: 3,
            num_classes: 12,
            curves: vec![],
        };
        assert_eq!(to_csv(&empty), "sample_id,label,v_0,v_1,v_2\n");

        let bad = "sample_id,label,v_0,v_1\n0,1,0.5,0.25\n1,1,0.5\n";
        match parse_csv(bad.as_bytes(), "mem", 12).unwrap_err() {
            ScaiError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn recipe_file_round_trip() {
        let file = RecipeFile {
            width: 400,
            recipes: default_recipes(400),
        };
        assert_eq!(RecipeFile::parse(&file.to_toml()).unwrap(), file);
        assert!(RecipeFile::parse("width = 10\nrecipes = 3").is_err());
    }
}
