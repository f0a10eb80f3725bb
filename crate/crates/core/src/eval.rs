//! Segmentation metrics, model evaluation, and run comparison tables/plots.
//!
//! When prediction and ground truth are both empty, IoU and Dice are 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::SegModel;
use crate::nn::Batch;
use crate::tensor::{Image, Mask};

/// Per-pixel confusion counts for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                format!("{}x{}", gt.height, gt.width),
                format!("{}x{}", pred.height, pred.width),
            ));
        }
        let mut c = Confusion::default();
        for (p, g) in pred.bits.iter().zip(&gt.bits) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn acc(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        if total == 0 {
            1.0
        } else {
            (self.tp + self.tn) as f64 / total as f64
        }
    }
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::from_masks(pred, gt)?.iou())
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::from_masks(pred, gt)?.dice())
}

pub fn acc(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(Confusion::from_masks(pred, gt)?.acc())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub iou: f64,
    pub acc: f64,
    pub dice: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub miou: f64,
    pub macc: f64,
    pub mdice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub aggregates: Aggregates,
    pub n_images: usize,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    /// Builds a report from per-class confusion counts accumulated over a split.
    pub fn from_confusions(run_id: &str, names: &[String], counts: &[Confusion], n_images: usize) -> Self {
        let per_class: BTreeMap<String, ClassMetrics> = names
            .iter()
            .zip(counts)
            .map(|(n, c)| {
                (
                    n.clone(),
                    ClassMetrics {
                        iou: c.iou(),
                        acc: c.acc(),
                        dice: c.dice(),
                    },
                )
            })
            .collect();
        let k = per_class.len().max(1) as f64;
        let aggregates = Aggregates {
            miou: per_class.values().map(|m| m.iou).sum::<f64>() / k,
            macc: per_class.values().map(|m| m.acc).sum::<f64>() / k,
            mdice: per_class.values().map(|m| m.dice).sum::<f64>() / k,
        };
        let mut metadata = BTreeMap::new();
        metadata.insert("empty_empty_convention".into(), "1".into());
        metadata.insert("background_class".into(), "excluded".into());
        MetricsReport {
            run_id: run_id.to_string(),
            per_class,
            aggregates,
            n_images,
            metadata,
        }
    }
}

/// An image with one target mask per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub image: Image,
    pub targets: Vec<Mask>,
}

/// Thresholded per-class confusion counts of `model` over `samples`.
pub fn confusions(model: &SegModel, samples: &[SegSample], threshold: f64) -> Result<Vec<Confusion>> {
    let mut counts = vec![Confusion::default(); model.out_channels];
    for chunk in samples.chunks(16) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.forward(&Batch::from_images(&imgs))?.logits;
        accumulate(&logits, chunk, threshold, &mut counts)?;
    }
    Ok(counts)
}

/// Adds the confusion counts of thresholded `logits` against `samples`.
pub fn accumulate(logits: &Batch, samples: &[SegSample], threshold: f64, counts: &mut [Confusion]) -> Result<()> {
    let hw = logits.h * logits.w;
    // σ(z) > t  ⇔  z > logit(t)
    let cut = (threshold / (1.0 - threshold)).ln();
    for (i, s) in samples.iter().enumerate() {
        if s.targets.len() != logits.c {
            return Err(Error::shape(logits.c, s.targets.len()));
        }
        for (c, gt) in s.targets.iter().enumerate() {
            let z = &logits.data[(i * logits.c + c) * hw..(i * logits.c + c + 1) * hw];
            let pred = Mask {
                height: logits.h,
                width: logits.w,
                bits: z.iter().map(|v| *v > cut).collect(),
            };
            counts[c].add(&Confusion::from_masks(&pred, gt)?);
        }
    }
    Ok(())
}

pub fn evaluate_model(
    run_id: &str,
    model: &SegModel,
    samples: &[SegSample],
    class_names: &[String],
    threshold: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    if class_names.len() != model.out_channels {
        return Err(Error::shape(model.out_channels, class_names.len()));
    }
    let counts = confusions(model, samples, threshold)?;
    let mut report = MetricsReport::from_confusions(run_id, class_names, &counts, samples.len());
    report.metadata.insert("threshold".into(), threshold.to_string());
    Ok(report)
}

/// One line of a metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn history_to_jsonl(history: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in history {
        out.push_str(&crate::formats::canonical_json(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn history_from_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub text: String,
    pub csv: String,
}

/// Side-by-side table of reports, rows sorted by run id.
pub fn compare_runs(reports: &[MetricsReport]) -> Result<Comparison> {
    let Some(first) = reports.first() else {
        return Err(Error::Empty("no reports to compare".into()));
    };
    let classes: Vec<&String> = first.per_class.keys().collect();
    for r in reports {
        if r.per_class.keys().collect::<Vec<_>>() != classes {
            return Err(Error::config(
                "reports",
                format!("run `{}` has a different class schema than `{}`", r.run_id, first.run_id),
            ));
        }
    }
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));

    let mut header = vec!["run".to_string()];
    for c in &classes {
        header.push(format!("{c}.iou"));
        header.push(format!("{c}.acc"));
        header.push(format!("{c}.dice"));
    }
    header.extend(["miou", "macc", "mdice"].map(String::from));
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|r| {
            let mut row = vec![r.run_id.clone()];
            for c in &classes {
                let m = &r.per_class[*c];
                row.extend([m.iou, m.acc, m.dice].map(pct));
            }
            row.extend([r.aggregates.miou, r.aggregates.macc, r.aggregates.mdice].map(pct));
            row
        })
        .collect();

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let line = |cells: &[String], text: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        text.push_str(parts.join("  ").trim_end());
        text.push('\n');
    };
    line(&header, &mut text);
    for row in &rows {
        line(row, &mut text);
    }
    let mut csv = header.join(",");
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    Ok(Comparison { text, csv })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Long-format CSV of every run's curve for `metric` on `split`.
pub fn curves_csv(runs: &[(String, Vec<MetricRecord>)], split: &str, metric: &str) -> String {
    let mut sorted: Vec<&(String, Vec<MetricRecord>)> = runs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from("run,iteration,value\n");
    for (run, hist) in sorted {
        for r in hist.iter().filter(|r| r.split == split && r.metric == metric) {
            let _ = writeln!(out, "{run},{},{}", r.iteration, r.value);
        }
    }
    out
}

/// Minimal line chart of the same curves as [`curves_csv`].
pub fn curves_svg(runs: &[(String, Vec<MetricRecord>)], split: &str, metric: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut sorted: Vec<&(String, Vec<MetricRecord>)> = runs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let series: Vec<(&str, Vec<(f64, f64)>)> = sorted
        .iter()
        .map(|(run, hist)| {
            let pts = hist
                .iter()
                .filter(|r| r.split == split && r.metric == metric)
                .map(|r| (r.iteration as f64, r.value))
                .collect();
            (run.as_str(), pts)
        })
        .collect();
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let x_max = all.clone().map(|p| p.0).fold(1.0, f64::max);
    let y_max = all.clone().map(|p| p.1).fold(f64::MIN, f64::max).max(1e-9);
    let y_min = all.map(|p| p.1).fold(f64::MAX, f64::min).min(0.0);
    let sx = |x: f64| PAD + x / x_max * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y_min) / (y_max - y_min) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">iteration (max {x_max})</text>"#,
        W / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">{split} {metric} [{y_min:.3}, {y_max:.3}]</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, (run, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        if !d.is_empty() {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                d.join(" ")
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{run}</text>"#,
            W - PAD - 150.0,
            PAD + 15.0 * (i as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// First iteration at which the curve reaches `fraction` of its final value.
pub fn iterations_to_fraction(history: &[MetricRecord], split: &str, metric: &str, fraction: f64) -> Option<usize> {
    let pts: Vec<&MetricRecord> = history.iter().filter(|r| r.split == split && r.metric == metric).collect();
    let last = pts.last()?.value;
    pts.iter().find(|r| r.value >= fraction * last).map(|r| r.iteration)
}
