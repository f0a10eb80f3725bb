//! Localization labels from classifier explanations: sequential boosting
//! weights, probability filtering, weighted aggregation, percentile
//! binarization, and the `DOLL1` mask file format.
//!
//! `DOLL1` layout (little-endian):
//!
//! ```text
//! "DOLL"              4 bytes magic
//! version: u16        1
//! C: u16              number of planes
//! H: u32, W: u32
//! manifest_len: u32
//! manifest            canonical JSON
//! planes              C planes, row-major, each row packed into ⌈W/8⌉ bytes,
//!                     bit 7 of a byte is the leftmost pixel, padding bits 0
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{abs_reduce, integrated_gradients_raw};
use crate::formats::{self, canonical_json, read_magic_version, FORMAT_VERSION};
use crate::models::Classifier;
use crate::tensor::{Image, Mask, Plane};

pub const DOLL_MAGIC: &[u8; 4] = b"DOLL";
/// Bounds applied to the weighted error before taking logs.
pub const ERROR_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub tau: f64,
    pub percentile: f64,
    pub steps: usize,
    pub k: usize,
    pub prediction_threshold: f64,
    pub ensemble_size: usize,
    /// Architectures assigned to ensemble members in round-robin order.
    pub ensemble_archs: Vec<String>,
    pub aggregation: Aggregation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau: 0.1,
            percentile: 80.0,
            steps: 5,
            k: 3,
            prediction_threshold: 0.5,
            ensemble_size: 5,
            ensemble_archs: vec!["cnn-s".into(), "cnn-m".into(), "cnn-d".into()],
            aggregation: Aggregation::Boosted,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("pipeline.tau", "must lie in [0, 1)"));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::config("pipeline.percentile", "must lie in (0, 100)"));
        }
        if self.steps == 0 {
            return Err(Error::config("pipeline.steps", "must be at least 1"));
        }
        if self.k < 2 {
            return Err(Error::config("pipeline.k", "must be at least 2"));
        }
        if !(self.prediction_threshold > 0.0 && self.prediction_threshold < 1.0) {
            return Err(Error::config("pipeline.prediction_threshold", "must lie in (0, 1)"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::config("pipeline.ensemble_size", "must be positive"));
        }
        if self.ensemble_archs.is_empty() {
            return Err(Error::config("pipeline.ensemble_archs", "must name at least one architecture"));
        }
        Ok(())
    }

    pub fn arch_of(&self, m: usize) -> &str {
        &self.ensemble_archs[m % self.ensemble_archs.len()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Boosted,
    Averaged,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Boosted => "boosted",
            Aggregation::Averaged => "averaged",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boosted" => Ok(Aggregation::Boosted),
            "averaged" => Ok(Aggregation::Averaged),
            other => Err(Error::config("aggregation", format!("expected boosted or averaged, got `{other}`"))),
        }
    }
}

/// `W = ln((1−e)/e) + ln(K−1)` without any clamping.
pub fn boost_weight(e: f64, k: usize) -> f64 {
    ((1.0 - e) / e).ln() + ((k - 1) as f64).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostWeights {
    /// `values[m][c]`, rows in `model_order`.
    pub values: Vec<Vec<f64>>,
    pub model_order: Vec<String>,
    pub k: usize,
    /// Human-readable notes for every clamp that fired.
    pub warnings: Vec<String>,
}

impl BoostWeights {
    pub fn n_models(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, m: usize, c: usize) -> f64 {
        self.values[m][c]
    }

    pub fn ones(model_order: Vec<String>, n_classes: usize, k: usize) -> Self {
        BoostWeights {
            values: vec![vec![1.0; n_classes]; model_order.len()],
            model_order,
            k,
            warnings: vec![],
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        BoostWeights {
            values: self
                .values
                .iter()
                .map(|row| row.iter().map(|w| w * factor).collect())
                .collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        if !self.model_order.iter().all(|m| seen.insert(m)) {
            return Err(Error::config("model_order", "entries must be unique"));
        }
        if self.values.len() != self.model_order.len() {
            return Err(Error::shape(self.model_order.len(), self.values.len()));
        }
        if !self.values.iter().flatten().all(|w| w.is_finite()) {
            return Err(Error::numeric("boost weights"));
        }
        Ok(())
    }
}

/// Sample weights after each model's update, per class: `[c][m][n]`.
pub type SampleWeightTrace = Vec<Vec<Vec<f64>>>;

/// Thresholds `probs[m][n][c]` into hard predictions.
pub fn threshold_predictions(probs: &[Vec<Vec<f64>>], threshold: f64) -> Vec<Vec<Vec<u8>>> {
    probs
        .iter()
        .map(|per_model| {
            per_model
                .iter()
                .map(|row| row.iter().map(|p| (*p >= threshold) as u8).collect())
                .collect()
        })
        .collect()
}

/// Sequential reweighting over models in order, independently per class.
/// `predictions[m][n][c]` and `labels[n][c]` are 0/1.
pub fn compute_boost_weights(
    predictions: &[Vec<Vec<u8>>],
    labels: &[Vec<u8>],
    k: usize,
    model_order: Vec<String>,
) -> Result<(BoostWeights, SampleWeightTrace)> {
    if k < 2 {
        return Err(Error::config("pipeline.k", "must be at least 2"));
    }
    if predictions.len() != model_order.len() {
        return Err(Error::shape(model_order.len(), predictions.len()));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("boosting samples".into()));
    }
    let c_count = labels[0].len();
    for per_model in predictions {
        if per_model.len() != n || per_model.iter().any(|row| row.len() != c_count) {
            return Err(Error::shape(format!("{n}x{c_count}"), "ragged predictions"));
        }
    }
    let m_count = predictions.len();
    let mut values = vec![vec![0.0; c_count]; m_count];
    let mut warnings = Vec::new();
    let mut trace = Vec::with_capacity(c_count);
    for c in 0..c_count {
        let mut s = vec![1.0 / n as f64; n];
        let mut class_trace = Vec::with_capacity(m_count);
        for m in 0..m_count {
            let miss: Vec<bool> = (0..n).map(|i| predictions[m][i][c] != labels[i][c]).collect();
            let total: f64 = s.iter().sum();
            let wrong: f64 = s.iter().zip(&miss).filter(|(_, x)| **x).map(|(v, _)| v).sum();
            let raw_e = wrong / total;
            let e = raw_e.clamp(ERROR_CLAMP, 1.0 - ERROR_CLAMP);
            if e != raw_e {
                warnings.push(format!(
                    "model {} observation {c}: weighted error {raw_e} clamped to {e}",
                    model_order[m]
                ));
            }
            let mut w = boost_weight(e, k);
            if w < 0.0 {
                warnings.push(format!(
                    "model {} observation {c}: negative weight {w:.6} set to 0",
                    model_order[m]
                ));
                w = 0.0;
            }
            values[m][c] = w;
            for (sv, x) in s.iter_mut().zip(&miss) {
                if *x {
                    *sv *= w.exp();
                }
            }
            let z: f64 = s.iter().sum();
            for sv in s.iter_mut() {
                *sv /= z;
            }
            class_trace.push(s.clone());
        }
        trace.push(class_trace);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((
        BoostWeights {
            values,
            model_order,
            k,
            warnings,
        },
        trace,
    ))
}

/// Indices of models whose probability strictly exceeds `tau`.
pub fn filter_models(probs: &[f64], tau: f64) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > tau)
        .map(|(i, _)| i)
        .collect()
}

/// Weighted mean `(1/|N|) Σ w_m E_m` over the selected maps.
pub fn aggregate(maps: &[(&Plane, f64)]) -> Result<Plane> {
    let Some((first, _)) = maps.first() else {
        return Err(Error::NoEvidence);
    };
    let mut out = Plane::zeros(first.height, first.width);
    for (map, w) in maps {
        if (map.height, map.width) != (out.height, out.width) {
            return Err(Error::shape(
                format!("{}x{}", out.height, out.width),
                format!("{}x{}", map.height, map.width),
            ));
        }
        for (o, v) in out.data.iter_mut().zip(&map.data) {
            *o += w * v;
        }
    }
    let n = maps.len() as f64;
    for o in out.data.iter_mut() {
        *o /= n;
    }
    Ok(out)
}

/// Nearest-rank percentile of `values`: the `⌈p/100 · N⌉`-th smallest.
pub fn nearest_rank(values: &[f64], percentile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile * sorted.len() as f64) / 100.0).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Marks pixels strictly above the plane's nearest-rank percentile.
pub fn binarize(plane: &Plane, percentile: f64) -> Mask {
    let threshold = nearest_rank(&plane.data, percentile);
    Mask {
        height: plane.height,
        width: plane.width,
        bits: plane.data.iter().map(|v| *v > threshold).collect(),
    }
}

/// Everything needed to build a mask for one image under any weighting:
/// per-model probabilities and the abs-reduced maps of the models that
/// passed the filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEvidence {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// `probs[m][c]`
    pub probs: Vec<Vec<f64>>,
    /// `maps[m][c]`, present only when `probs[m][c] > tau`.
    pub maps: Vec<Vec<Option<Plane>>>,
}

pub fn collect_evidence(id: &str, image: &Image, ensemble: &[Classifier], cfg: &PipelineConfig) -> Result<ImageEvidence> {
    let mut probs = Vec::with_capacity(ensemble.len());
    let mut maps = Vec::with_capacity(ensemble.len());
    for (m, clf) in ensemble.iter().enumerate() {
        let p = clf.predict(image)?;
        let n_classes = p.len();
        let mut row = vec![None; n_classes];
        let selected: Vec<usize> = (0..n_classes).filter(|c| p[*c] > cfg.tau).collect();
        if !selected.is_empty() {
            let raw = integrated_gradients_raw(clf, image, &selected, cfg.steps).map_err(|e| match e {
                Error::Numeric { context } => Error::numeric(format!("image {id}, model {m}: {context}")),
                other => other,
            })?;
            for (c, r) in selected.into_iter().zip(raw) {
                row[c] = Some(abs_reduce(&r));
            }
        }
        probs.push(p);
        maps.push(row);
    }
    Ok(ImageEvidence {
        id: id.to_string(),
        height: image.height,
        width: image.width,
        probs,
        maps,
    })
}

/// Builds one plane per observation; a plane with no filtered model is empty.
pub fn masks_from_evidence(
    ev: &ImageEvidence,
    weights: &BoostWeights,
    cfg: &PipelineConfig,
    mode: Aggregation,
) -> Result<Vec<Mask>> {
    let n_classes = ev.probs.first().map_or(0, |p| p.len());
    if weights.n_models() != ev.probs.len() {
        return Err(Error::shape(ev.probs.len(), weights.n_models()));
    }
    let mut planes = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let column: Vec<f64> = ev.probs.iter().map(|p| p[c]).collect();
        let selected = filter_models(&column, cfg.tau);
        let maps: Vec<(&Plane, f64)> = selected
            .iter()
            .map(|&m| {
                let w = match mode {
                    Aggregation::Boosted => weights.get(m, c),
                    Aggregation::Averaged => 1.0,
                };
                (ev.maps[m][c].as_ref().expect("map computed for filtered model"), w)
            })
            .collect();
        match aggregate(&maps) {
            Ok(plane) => planes.push(binarize(&plane, cfg.percentile)),
            Err(Error::NoEvidence) => planes.push(Mask::empty(ev.height, ev.width)),
            Err(e) => return Err(e),
        }
    }
    Ok(planes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DollManifest {
    pub observation_names: Vec<String>,
    pub source_image_id: String,
    pub config_digest: String,
    pub model_order: Vec<String>,
    pub aggregation: Aggregation,
    /// Index the weighted sum runs over.
    pub aggregate_index: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DollMask {
    pub planes: Vec<Mask>,
    pub manifest: DollManifest,
}

impl DollMask {
    pub fn height(&self) -> usize {
        self.planes.first().map_or(0, |p| p.height)
    }

    pub fn width(&self) -> usize {
        self.planes.first().map_or(0, |p| p.width)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn generate_doll(
    id: &str,
    image: &Image,
    ensemble: &[Classifier],
    weights: &BoostWeights,
    cfg: &PipelineConfig,
    mode: Aggregation,
    observation_names: &[String],
    config_digest: &str,
) -> Result<DollMask> {
    let ev = collect_evidence(id, image, ensemble, cfg)?;
    let planes = masks_from_evidence(&ev, weights, cfg, mode)?;
    Ok(DollMask {
        planes,
        manifest: DollManifest {
            observation_names: observation_names.to_vec(),
            source_image_id: id.to_string(),
            config_digest: config_digest.to_string(),
            model_order: weights.model_order.clone(),
            aggregation: mode,
            aggregate_index: "model".into(),
        },
    })
}

pub fn encode_doll(mask: &DollMask) -> Result<Vec<u8>> {
    let (h, w) = (mask.height(), mask.width());
    if mask.planes.iter().any(|p| p.height != h || p.width != w) {
        return Err(Error::shape(format!("{h}x{w}"), "planes of different sizes"));
    }
    if mask.manifest.observation_names.len() != mask.planes.len() {
        return Err(Error::shape(mask.planes.len(), mask.manifest.observation_names.len()));
    }
    let c = u16::try_from(mask.planes.len()).map_err(|_| Error::shape("at most 65535 planes", mask.planes.len()))?;
    let manifest = canonical_json(&mask.manifest)?;
    let row_bytes = w.div_ceil(8);
    let mut out = Vec::with_capacity(20 + manifest.len() + mask.planes.len() * h * row_bytes);
    out.extend_from_slice(DOLL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for plane in &mask.planes {
        for y in 0..h {
            let mut row = vec![0u8; row_bytes];
            for x in 0..w {
                if plane.get(y, x) {
                    row[x / 8] |= 0x80 >> (x % 8);
                }
            }
            out.extend_from_slice(&row);
        }
    }
    Ok(out)
}

pub fn decode_doll(bytes: &[u8]) -> Result<DollMask> {
    let mut pos = read_magic_version(bytes, DOLL_MAGIC)?;
    let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
        if bytes.len() - pos < n {
            return Err(Error::format(pos as u64, format!("truncated {what}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &bytes[at..at + n]))
    };
    let c = u16::from_le_bytes(take(2, "plane count")?.1.try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(take(4, "height")?.1.try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(take(4, "width")?.1.try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(take(4, "manifest length")?.1.try_into().unwrap()) as usize;
    let (at, raw) = take(len, "manifest")?;
    let manifest: DollManifest =
        serde_json::from_slice(raw).map_err(|e| Error::format(at as u64, format!("bad manifest: {e}")))?;
    if manifest.observation_names.len() != c {
        return Err(Error::format(
            at as u64,
            format!("manifest names {} observations, header says {c}", manifest.observation_names.len()),
        ));
    }
    let row_bytes = w.div_ceil(8);
    let mut planes = Vec::with_capacity(c);
    for ci in 0..c {
        let (at, raw) = take(h * row_bytes, &format!("plane {ci}"))?;
        let mut m = Mask::empty(h, w);
        for y in 0..h {
            let row = &raw[y * row_bytes..(y + 1) * row_bytes];
            for x in 0..w {
                m.set(y, x, row[x / 8] & (0x80 >> (x % 8)) != 0);
            }
            if w % 8 != 0 && row[row_bytes - 1] & (0xff >> (w % 8)) != 0 {
                return Err(Error::format(
                    (at + (y + 1) * row_bytes - 1) as u64,
                    "nonzero row padding bits",
                ));
            }
        }
        planes.push(m);
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, "trailing bytes after last plane"));
    }
    Ok(DollMask { planes, manifest })
}

pub fn write_doll(mask: &DollMask, path: &Path) -> Result<()> {
    fs::write(path, encode_doll(mask)?)?;
    Ok(())
}

pub fn read_doll(path: &Path) -> Result<DollMask> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_doll(&fs::read(path)?)
}

/// Digest of the encoded bytes, handy for determinism checks.
pub fn doll_digest(mask: &DollMask) -> Result<String> {
    Ok(formats::sha256_hex(&encode_doll(mask)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_zero_point_and_closed_form() {
        assert!(boost_weight(2.0 / 3.0, 3).abs() < 1e-12);
        assert!((boost_weight(0.1, 3) - 18f64.ln()).abs() < 1e-12);
        assert!((boost_weight(0.1, 3) - 2.8904).abs() < 1e-4);
        assert!(boost_weight(0.8, 5).abs() < 1e-12);
    }

    #[test]
    fn four_sample_toy_update() {
        // model 1 misses sample 3 only; e = 1/4
        let labels = vec![vec![1u8], vec![0], vec![1], vec![0]];
        let preds = vec![vec![vec![1u8], vec![0], vec![0], vec![0]]];
        let (w, trace) = compute_boost_weights(&preds, &labels, 3, vec!["m1".into()]).unwrap();
        let w1 = boost_weight(0.25, 3);
        assert!((w.get(0, 0) - w1).abs() < 1e-12);
        let s3 = w1.exp() / (3.0 + w1.exp());
        assert!((trace[0][0][2] - s3).abs() < 1e-12);
        assert!((trace[0][0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_hopeless_models_hit_the_clamps() {
        let labels = vec![vec![1u8], vec![0]];
        let perfect = vec![vec![1u8], vec![0]];
        let hopeless = vec![vec![0u8], vec![1]];
        let (w, _) =
            compute_boost_weights(&[perfect, hopeless], &labels, 3, vec!["a".into(), "b".into()]).unwrap();
        let cap = boost_weight(ERROR_CLAMP, 3);
        assert!((w.get(0, 0) - cap).abs() < 1e-9);
        assert_eq!(w.get(1, 0), 0.0);
        assert_eq!(w.warnings.len(), 3);
        w.validate().unwrap();
    }

    #[test]
    fn filter_is_strict() {
        assert_eq!(filter_models(&[0.05, 0.2, 0.1], 0.1), vec![1]);
        assert!(filter_models(&[0.05, 0.1], 0.1).is_empty());
        assert_eq!(filter_models(&[0.3, 0.01], 0.0), vec![0, 1]);
    }

    #[test]
    fn aggregate_examples() {
        let m = Plane::from_data(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(aggregate(&[(&m, 2.0)]).unwrap().data, vec![2.0, 0.0, 0.0, 2.0]);
        let two = aggregate(&[(&m, 1.0), (&m, 3.0)]).unwrap();
        assert_eq!(two.data, vec![2.0, 0.0, 0.0, 2.0]);
        assert!(matches!(aggregate(&[]), Err(Error::NoEvidence)));
    }

    #[test]
    fn binarize_examples() {
        let p = Plane::from_data(2, 5, (0..10).map(|v| v as f64).collect()).unwrap();
        let m = binarize(&p, 80.0);
        assert_eq!(m.count(), 2);
        assert!(m.bits[8] && m.bits[9]);
        assert_eq!(binarize(&Plane::from_data(2, 2, vec![3.0; 4]).unwrap(), 80.0).count(), 0);
        let scaled = Plane::from_data(2, 5, p.data.iter().map(|v| v * 7.5).collect()).unwrap();
        assert_eq!(binarize(&scaled, 80.0), m);
    }

    fn sample_mask(c: usize, h: usize, w: usize) -> DollMask {
        let planes = (0..c)
            .map(|ci| {
                Mask::from_bits(h, w, (0..h * w).map(|i| (i * 7 + ci * 3) % 5 == 0).collect()).unwrap()
            })
            .collect();
        DollMask {
            planes,
            manifest: DollManifest {
                observation_names: (0..c).map(|i| format!("obs{i}")).collect(),
                source_image_id: "train-00001".into(),
                config_digest: "ab".repeat(32),
                model_order: vec!["m0".into(), "m1".into()],
                aggregation: Aggregation::Boosted,
                aggregate_index: "model".into(),
            },
        }
    }

    #[test]
    fn doll_roundtrip_and_size() {
        let mask = sample_mask(14, 64, 64);
        let bytes = encode_doll(&mask).unwrap();
        let manifest_len = canonical_json(&mask.manifest).unwrap().len();
        assert_eq!(bytes.len(), 16 + 4 + manifest_len + 14 * 64 * 8);
        let back = decode_doll(&bytes).unwrap();
        assert_eq!(back, mask);
        assert_eq!(encode_doll(&back).unwrap(), bytes);
    }

    #[test]
    fn doll_odd_width_padding() {
        let mask = sample_mask(3, 5, 11);
        let bytes = encode_doll(&mask).unwrap();
        assert_eq!(decode_doll(&bytes).unwrap(), mask);
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] |= 0x01;
        assert!(matches!(decode_doll(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn doll_corruption_is_rejected_with_offset() {
        let bytes = encode_doll(&sample_mask(2, 8, 8)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_doll(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_doll(&bad), Err(Error::Format { offset: 4, .. })));
        match decode_doll(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 20),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_doll(&long).is_err());
    }
}
