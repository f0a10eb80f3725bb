//! Synthetic multi-label corpus with hidden ground-truth region masks.
//!
//! Each observation is bound to one shape family. A positive observation
//! draws exactly one shape of its family on a smooth textured background;
//! the shape's pixels form the observation's ground-truth plane. Every
//! sample is rendered from its own random streams keyed by `(seed, id)`,
//! so the corpus is identical under any degree of parallelism.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{self, read_pgm, write_pgm};
use crate::seeding::rng_for;
use crate::tensor::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Bar,
    Blob,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Ellipse, ShapeFamily::Bar, ShapeFamily::Blob];
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Bar => "bar",
            ShapeFamily::Blob => "blob",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub n_observations: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// One family per observation. Repeated families are told apart by
    /// orientation (ellipse, bar) or lobe count (blob).
    pub shape_palette: Vec<ShapeFamily>,
    pub noise_level: f64,
    pub seed: u64,
    /// 1 for grayscale; 3 replicates the plane.
    pub channels: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            image_size: 64,
            n_observations: 4,
            n_train: 1400,
            n_val: 300,
            n_test: 300,
            shape_palette: default_palette(4),
            noise_level: 0.15,
            seed: 0,
            channels: 1,
        }
    }
}

/// Cycles ellipse, bar, blob over `n` observations.
pub fn default_palette(n: usize) -> Vec<ShapeFamily> {
    (0..n).map(|i| ShapeFamily::ALL[i % 3]).collect()
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_observations < 2 {
            return Err(Error::config("corpus.n_observations", "must be at least 2"));
        }
        for (field, n) in [
            ("corpus.n_train", self.n_train),
            ("corpus.n_val", self.n_val),
            ("corpus.n_test", self.n_test),
        ] {
            if n < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.image_size < 16 {
            return Err(Error::config("corpus.image_size", "must be at least 16"));
        }
        if self.shape_palette.len() != self.n_observations {
            return Err(Error::config(
                "corpus.shape_palette",
                format!(
                    "needs exactly one family per observation ({} given for {})",
                    self.shape_palette.len(),
                    self.n_observations
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::config("corpus.noise_level", "must lie in [0, 1]"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("corpus.channels", "must be 1 or 3"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    /// Variant index of observation `c` among observations sharing its family.
    pub fn variant(&self, c: usize) -> usize {
        let fam = self.shape_palette[c];
        self.shape_palette[..c].iter().filter(|f| **f == fam).count()
    }

    pub fn observation_names(&self) -> Vec<String> {
        (0..self.n_observations)
            .map(|c| format!("obs{c}-{}{}", self.shape_palette[c], self.variant(c)))
            .collect()
    }

    fn split_of(&self, index: usize) -> (Split, usize) {
        if index < self.n_train {
            (Split::Train, index)
        } else if index < self.n_train + self.n_val {
            (Split::Val, index - self.n_train)
        } else {
            (Split::Test, index - self.n_train - self.n_val)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub labels: Vec<u8>,
    /// Oracle-only region masks, one per observation.
    pub gt_masks: Option<Vec<Mask>>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub samples: Vec<ImageSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                labels: s.labels.clone(),
                split: s.split,
            })
            .collect()
    }

    /// SHA-256 over ids, splits, labels, quantized pixels and gt bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update([0, s.split as u8]);
            h.update(&s.labels);
            h.update([s.image.channels as u8]);
            for v in &s.image.data {
                h.update([quantize(*v)]);
            }
            if let Some(gt) = &s.gt_masks {
                for m in gt {
                    let bytes: Vec<u8> = m.bits.iter().map(|b| *b as u8).collect();
                    h.update(&bytes);
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Fraction of positive labels per observation.
    pub fn label_marginals(&self) -> Vec<f64> {
        let c = self.config.n_observations;
        let mut pos = vec![0usize; c];
        for s in &self.samples {
            for (p, l) in pos.iter_mut().zip(&s.labels) {
                *p += *l as usize;
            }
        }
        pos.iter().map(|p| *p as f64 / self.samples.len() as f64).collect()
    }
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let samples = (0..config.total())
        .into_par_iter()
        .map(|i| {
            let (split, local) = config.split_of(i);
            let id = format!("{}-{:05}", split.as_str(), local);
            let mut sample = render_sample(&id, config, &mut rng_for(config.seed, &format!("labels/{id}")))?;
            sample.split = split;
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: config.clone(),
        samples,
    })
}

/// Renders one sample. Labels are drawn from `rng`; shape geometry and pixel
/// noise come from separate streams keyed by `(seed, id)`, so changing the
/// noise level never moves a shape.
pub fn render_sample(id: &str, config: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<ImageSample> {
    let labels: Vec<u8> = (0..config.n_observations)
        .map(|_| rng.random_bool(0.5) as u8)
        .collect();
    render_with_labels(id, config, labels)
}

pub fn render_with_labels(id: &str, config: &CorpusConfig, labels: Vec<u8>) -> Result<ImageSample> {
    let s = config.image_size;
    let mut shape_rng = rng_for(config.seed, &format!("shapes/{id}"));
    let mut noise_rng = rng_for(config.seed, &format!("noise/{id}"));

    let background = Background::sample(&mut shape_rng, s);
    let mut placed: Vec<Shape> = Vec::new();
    let mut owners: Vec<usize> = Vec::new();
    let mut gt = vec![Mask::empty(s, s); config.n_observations];
    for c in 0..config.n_observations {
        if labels[c] == 0 {
            continue;
        }
        let shape = place_shape(id, c, config, &placed, &mut shape_rng)?;
        for y in 0..s {
            for x in 0..s {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    gt[c].set(y, x, true);
                }
            }
        }
        placed.push(shape);
        owners.push(c);
    }

    let noise = Normal::new(0.0, 0.3 * config.noise_level.max(1e-12)).expect("valid std");
    let mut plane = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let texture = background.at(x as f64, y as f64, s as f64);
            let mut v = texture;
            for (shape, c) in placed.iter().zip(&owners) {
                if gt[*c].get(y, x) {
                    v = shape.level + 0.5 * (texture - background.base);
                }
            }
            let eps: f64 = noise.sample(&mut noise_rng);
            if config.noise_level > 0.0 {
                v += eps;
            }
            plane[y * s + x] = dequantize(quantize(v));
        }
    }
    let gray = Image::from_data(1, s, s, plane)?;
    let image = if config.channels == 1 {
        gray
    } else {
        gray.replicate(config.channels)
    };
    Ok(ImageSample {
        id: id.to_string(),
        image,
        labels,
        gt_masks: Some(gt),
        split: Split::Train,
    })
}

/// Maps `[0, 1]` (clamped) onto 8-bit levels.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0
}

struct Background {
    base: f64,
    waves: Vec<(f64, f64, f64, f64)>,
    tilt: f64,
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng, _size: usize) -> Self {
        let base = rng.random_range(0.15..0.3);
        let waves = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.02..0.05),
                )
            })
            .collect();
        Background {
            base,
            waves,
            tilt: rng.random_range(-0.05..0.05),
        }
    }

    fn at(&self, x: f64, y: f64, size: f64) -> f64 {
        let (u, v) = (x / size, y / size);
        let mut t = self.base + self.tilt * (v - 0.5);
        for (fx, fy, phase, amp) in &self.waves {
            t += amp * (2.0 * PI * (fx * u + fy * v) + phase).sin();
        }
        t
    }
}

#[derive(Clone, Debug)]
struct Shape {
    kind: Geometry,
    cx: f64,
    cy: f64,
    level: f64,
}

#[derive(Clone, Debug)]
enum Geometry {
    /// Semi-axes and rotation.
    Ellipse { a: f64, b: f64, theta: f64 },
    /// Half-length, half-thickness and rotation.
    Bar { half_len: f64, half_thick: f64, theta: f64 },
    /// Union of discs given as offsets from the center plus radius.
    Blob { discs: Vec<(f64, f64, f64)> },
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        match &self.kind {
            Geometry::Ellipse { a, b, theta } => {
                let (u, v) = rotate(dx, dy, *theta);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Geometry::Bar {
                half_len,
                half_thick,
                theta,
            } => {
                let (u, v) = rotate(dx, dy, *theta);
                u.abs() <= *half_len && v.abs() <= *half_thick
            }
            Geometry::Blob { discs } => discs
                .iter()
                .any(|(ox, oy, r)| (dx - ox).powi(2) + (dy - oy).powi(2) <= r * r),
        }
    }

    /// Axis-aligned half extents of the shape's bounding box.
    fn half_extent(&self) -> (f64, f64) {
        match &self.kind {
            Geometry::Ellipse { a, b, theta } => {
                let (c, s) = (theta.cos(), theta.sin());
                ((a * c).hypot(b * s), (a * s).hypot(b * c))
            }
            Geometry::Bar {
                half_len,
                half_thick,
                theta,
            } => {
                let (c, s) = (theta.cos().abs(), theta.sin().abs());
                (half_len * c + half_thick * s, half_len * s + half_thick * c)
            }
            Geometry::Blob { discs } => {
                let hx = discs.iter().map(|(ox, _, r)| ox.abs() + r).fold(0.0, f64::max);
                let hy = discs.iter().map(|(_, oy, r)| oy.abs() + r).fold(0.0, f64::max);
                (hx, hy)
            }
        }
    }
}

fn rotate(dx: f64, dy: f64, theta: f64) -> (f64, f64) {
    let (c, s) = (theta.cos(), theta.sin());
    (dx * c + dy * s, -dx * s + dy * c)
}

fn sample_geometry(family: ShapeFamily, variant: usize, size: f64, rng: &mut ChaCha8Rng) -> Geometry {
    let theta = [0.0, PI / 2.0, PI / 4.0][variant % 3];
    match family {
        ShapeFamily::Ellipse => Geometry::Ellipse {
            a: size * rng.random_range(0.13..0.18),
            b: size * rng.random_range(0.07..0.09),
            theta,
        },
        ShapeFamily::Bar => Geometry::Bar {
            half_len: size * rng.random_range(0.18..0.24),
            half_thick: size * rng.random_range(0.035..0.05),
            theta,
        },
        ShapeFamily::Blob => {
            let r = size * rng.random_range(0.06..0.08);
            let lobes = 3 + variant;
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut discs = vec![(0.0, 0.0, r)];
            for k in 0..lobes {
                let ang = phase + 2.0 * PI * k as f64 / lobes as f64;
                let lr = r * rng.random_range(0.6..0.8);
                discs.push((0.9 * r * ang.cos(), 0.9 * r * ang.sin(), lr));
            }
            Geometry::Blob { discs }
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

fn place_shape(
    id: &str,
    c: usize,
    config: &CorpusConfig,
    placed: &[Shape],
    rng: &mut ChaCha8Rng,
) -> Result<Shape> {
    let size = config.image_size as f64;
    let family = config.shape_palette[c];
    let variant = config.variant(c);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let kind = sample_geometry(family, variant, size, rng);
        let level = rng.random_range(0.6..0.8);
        let probe = Shape {
            kind,
            cx: 0.0,
            cy: 0.0,
            level,
        };
        let (hx, hy) = probe.half_extent();
        // centers sit on pixel centers so the center pixel is always covered
        let (lo_x, hi_x) = ((hx + 1.0).ceil(), (size - hx - 1.0).floor());
        let (lo_y, hi_y) = ((hy + 1.0).ceil(), (size - hy - 1.0).floor());
        if hi_x < lo_x || hi_y < lo_y {
            return Err(Error::Placement {
                sample_id: id.to_string(),
                observation: c,
                reason: format!("shape extent {:.1}x{:.1} exceeds image size {size}", 2.0 * hx, 2.0 * hy),
            });
        }
        let cx = rng.random_range(lo_x as i64..=hi_x as i64) as f64 + 0.5;
        let cy = rng.random_range(lo_y as i64..=hi_y as i64) as f64 + 0.5;
        let overlaps = placed.iter().any(|other| {
            let (ox, oy) = other.half_extent();
            (cx - other.cx).abs() < hx + ox + 1.0 && (cy - other.cy).abs() < hy + oy + 1.0
        });
        if !overlaps {
            return Ok(Shape { cx, cy, ..probe });
        }
    }
    Err(Error::Placement {
        sample_id: id.to_string(),
        observation: c,
        reason: format!("no free position after {PLACEMENT_ATTEMPTS} attempts"),
    })
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    config: CorpusConfig,
    digest: String,
    observation_names: Vec<String>,
}

/// Writes `dir/{train,val,test}/<id>.pgm`, gt planes under `dir/gt/`,
/// `dir/manifest.jsonl` and `dir/corpus.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    for split in Split::ALL {
        fs::create_dir_all(dir.join(split.as_str()))?;
    }
    fs::create_dir_all(dir.join("gt"))?;
    let size = corpus.config.image_size;
    let mut manifest = Vec::new();
    for s in &corpus.samples {
        let bytes: Vec<u8> = s.image.channel(0).iter().map(|v| quantize(*v)).collect();
        write_pgm(&dir.join(s.split.as_str()).join(format!("{}.pgm", s.id)), size, size, &bytes)?;
        if let Some(gt) = &s.gt_masks {
            for (c, m) in gt.iter().enumerate() {
                let bytes: Vec<u8> = m.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
                write_pgm(&dir.join("gt").join(format!("{}_{c}.pgm", s.id)), size, size, &bytes)?;
            }
        }
        serde_json::to_writer(&mut manifest, &ManifestEntry {
            id: s.id.clone(),
            labels: s.labels.clone(),
            split: s.split,
        })?;
        manifest.push(b'\n');
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;
    let header = CorpusHeader {
        config: corpus.config.clone(),
        digest: corpus.digest(),
        observation_names: corpus.config.observation_names(),
    };
    let mut f = fs::File::create(dir.join("corpus.json"))?;
    f.write_all(formats::canonical_json(&header)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`]. Ground-truth planes are only
/// loaded when `with_gt` is set.
pub fn read_corpus(dir: &Path, with_gt: bool) -> Result<Corpus> {
    let header_path = dir.join("corpus.json");
    if !header_path.exists() {
        return Err(Error::MissingArtifact(header_path));
    }
    let header: CorpusHeader = serde_json::from_slice(&fs::read(&header_path)?)?;
    let config = header.config;
    let reader = BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)?;
        let (w, h, bytes) = read_pgm(&dir.join(entry.split.as_str()).join(format!("{}.pgm", entry.id)))?;
        let gray = Image::from_data(1, h, w, bytes.iter().map(|b| dequantize(*b)).collect())?;
        let image = if config.channels == 1 {
            gray
        } else {
            gray.replicate(config.channels)
        };
        let gt_masks = if with_gt {
            let mut planes = Vec::new();
            for c in 0..config.n_observations {
                let (w, h, bytes) = read_pgm(&dir.join("gt").join(format!("{}_{c}.pgm", entry.id)))?;
                planes.push(Mask::from_bits(h, w, bytes.iter().map(|b| *b > 127).collect())?);
            }
            Some(planes)
        } else {
            None
        };
        samples.push(ImageSample {
            id: entry.id,
            image,
            labels: entry.labels,
            gt_masks,
            split: entry.split,
        });
    }
    Ok(Corpus { config, samples })
}

/// The digest recorded in `dir/corpus.json`.
pub fn recorded_digest(dir: &Path) -> Result<String> {
    let header_path = dir.join("corpus.json");
    if !header_path.exists() {
        return Err(Error::MissingArtifact(header_path));
    }
    let header: CorpusHeader = serde_json::from_slice(&fs::read(&header_path)?)?;
    Ok(header.digest)
}
