//! Segmentation pre-training against localization masks and downstream
//! adapter fine-tuning with IoU-based checkpoint selection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{accumulate, Confusion, MetricRecord, SegSample};
use crate::models::{bce_from_logit, Augment, SegModel, TrainConfig, BCE_EPS};
use crate::nn::ops::sigmoid;
use crate::nn::{Adam, Batch, Tag};
use crate::seeding::rng_for;
use crate::tensor::{Image, Mask};

/// Binary cross entropy of a probability with clipping to `[ε, 1−ε]`.
pub fn bce(p: f64, d: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -d * p.ln() - (1.0 - d) * (1.0 - p).ln()
}

fn targets_of(samples: &[&SegSample], channels: usize) -> Result<Vec<f64>> {
    let mut t = Vec::new();
    for s in samples {
        if s.targets.len() != channels {
            return Err(Error::shape(format!("{channels} target planes"), s.targets.len()));
        }
        for m in &s.targets {
            t.extend(m.bits.iter().map(|b| *b as u8 as f64));
        }
    }
    Ok(t)
}

/// Summed per-pixel, per-channel BCE of `logits` against 0/1 `targets`, and
/// the gradient of the mean over all elements with respect to the logits.
pub fn segmentation_loss(logits: &Batch, targets: &[f64]) -> (f64, Batch) {
    assert_eq!(logits.data.len(), targets.len(), "targets must match logits");
    let n = targets.len() as f64;
    let mut sum = 0.0;
    let mut grad = logits.clone();
    for ((g, z), d) in grad.data.iter_mut().zip(&logits.data).zip(targets) {
        sum += bce_from_logit(*z, *d);
        *g = (sigmoid(*z) - d) / n;
    }
    (sum, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub iteration: usize,
    pub metric_name: String,
    pub val_metric: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self, config_digest: &str) -> Result<Vec<u8>> {
        self.model.to_bytes(config_digest, self.iteration, &self.metric_name, self.val_metric)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let (model, header) = SegModel::from_bytes(bytes)?;
        Ok((
            Checkpoint {
                model,
                iteration: header.iteration,
                metric_name: header.metric_name,
                val_metric: header.val_metric,
            },
            header.artifact.config_digest,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Lowest validation loss over epochs.
    pub checkpoint: Checkpoint,
    /// Mean per-element loss on the probe batch before training and after each epoch.
    pub probe_losses: Vec<f64>,
    pub history: Vec<MetricRecord>,
}

fn mean_loss(model: &SegModel, samples: &[&SegSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(16) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.forward(&Batch::from_images(&imgs))?.logits;
        let t = targets_of(chunk, model.out_channels)?;
        sum += segmentation_loss(&logits, &t).0;
        count += t.len();
    }
    Ok(sum / count as f64)
}

/// Trains every parameter against the masks; keeps the lowest-val-loss epoch.
pub fn pretrain(
    model: &SegModel,
    train: &[SegSample],
    val: &[SegSample],
    cfg: &TrainConfig,
    probe_size: usize,
) -> Result<PretrainOutcome> {
    cfg.validate("pretrain")?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("pre-training train or val split".into()));
    }
    let mut model = model.clone();
    let size = train[0].image.height;
    let probe: Vec<&SegSample> = train.iter().take(probe_size.max(1)).collect();
    let val_refs: Vec<&SegSample> = val.iter().collect();
    // fails early on channel mismatch
    let mut probe_losses = vec![mean_loss(&model, &probe)?];
    let trainable: Vec<String> = model.params.names().cloned().collect();
    let mut opt = Adam::new(&model.params, &trainable, cfg.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut iteration = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &format!("pretrain-epoch/{epoch}"));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<SegSample> = chunk
                .iter()
                .map(|&i| augment_sample(&train[i], Augment::draw(cfg, size, &mut rng)))
                .collect();
            let refs: Vec<&SegSample> = augmented.iter().collect();
            let imgs: Vec<&Image> = refs.iter().map(|s| &s.image).collect();
            let fwd = model.forward(&Batch::from_images(&imgs))?;
            let t = targets_of(&refs, model.out_channels)?;
            let (loss, grad) = segmentation_loss(&fwd.logits, &t);
            if !loss.is_finite() || !fwd.logits.data.iter().all(|z| z.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    lr: cfg.learning_rate,
                });
            }
            total += loss;
            count += t.len();
            let grads = model.backward(&fwd, &grad, true);
            opt.step(&mut model.params, &grads);
            iteration += 1;
        }
        let train_loss = total / count as f64;
        let val_loss = mean_loss(&model, &val_refs)?;
        probe_losses.push(mean_loss(&model, &probe)?);
        log::debug!("pretrain epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        for (split, v) in [("train", train_loss), ("val", val_loss)] {
            history.push(MetricRecord {
                iteration,
                split: split.into(),
                metric: "loss".into(),
                value: v,
            });
        }
        if best.as_ref().is_none_or(|b| val_loss < b.val_metric) {
            best = Some(Checkpoint {
                model: model.clone(),
                iteration,
                metric_name: "val_loss".into(),
                val_metric: val_loss,
            });
        }
    }
    Ok(PretrainOutcome {
        checkpoint: best.expect("at least one epoch"),
        probe_losses,
        history,
    })
}

pub fn augment_sample(s: &SegSample, aug: Augment) -> SegSample {
    if aug.is_identity() {
        return s.clone();
    }
    SegSample {
        id: s.id.clone(),
        image: aug.apply_image(&s.image),
        targets: s.targets.iter().map(|m| aug.apply_mask(m)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub freeze_backbone: bool,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub augment_flip: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            freeze_backbone: true,
            iterations: 2000,
            learning_rate: 0.01,
            batch_size: 8,
            seed: 0,
            eval_every: 100,
            augment_flip: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("finetune.iterations", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("finetune.eval_every", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("finetune.learning_rate", "must be positive"));
        }
        Ok(())
    }

    fn augment(&self) -> TrainConfig {
        TrainConfig {
            augment_crop: false,
            augment_flip: self.augment_flip,
            augment_rotate: false,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Highest validation mIoU over the history; ties keep the earliest.
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricRecord>,
    /// Parameter names the optimizer kept state for.
    pub optimizer_state: Vec<String>,
    pub final_model: SegModel,
}

/// Frozen-backbone features, computed once per (sample, augmentation).
struct FeatureCache {
    entries: HashMap<(usize, Augment), Batch>,
}

impl FeatureCache {
    fn get(&mut self, model: &SegModel, samples: &[SegSample], i: usize, aug: Augment) -> Result<&Batch> {
        if !self.entries.contains_key(&(i, aug)) {
            let img = aug.apply_image(&samples[i].image);
            let f = model.features(&Batch::from_images(&[&img]))?;
            self.entries.insert((i, aug), f);
        }
        Ok(&self.entries[&(i, aug)])
    }
}

fn stack(parts: &[&Batch]) -> Batch {
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Batch {
        n: parts.iter().map(|p| p.n).sum(),
        data,
        ..*parts[0]
    }
}

fn val_miou(model: &SegModel, val: &[SegSample], cached: Option<&[Batch]>) -> Result<f64> {
    let mut counts = vec![Confusion::default(); model.out_channels];
    for (k, chunk) in val.chunks(16).enumerate() {
        let logits = match cached {
            Some(feats) => model.forward_from_features(&feats[k]).logits,
            None => {
                let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
                model.forward(&Batch::from_images(&imgs))?.logits
            }
        };
        accumulate(&logits, chunk, 0.5, &mut counts)?;
    }
    Ok(counts.iter().map(|c| c.iou()).sum::<f64>() / counts.len() as f64)
}

/// Supervised fine-tuning on a downstream task. With `freeze_backbone`,
/// only head parameters get gradients and optimizer state.
pub fn finetune(init: &SegModel, train: &[SegSample], val: &[SegSample], cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("downstream train or val split".into()));
    }
    for s in train.iter().chain(val) {
        if s.targets.len() != init.out_channels {
            return Err(Error::shape(
                format!("{} target planes", init.out_channels),
                format!("{} in sample {}", s.targets.len(), s.id),
            ));
        }
    }
    let mut model = init.clone();
    let size = train[0].image.height;
    let trainable = if cfg.freeze_backbone {
        model.params.names_with_tag(Tag::Head)
    } else {
        model.params.names().cloned().collect()
    };
    let mut opt = Adam::new(&model.params, &trainable, cfg.learning_rate);
    let aug_cfg = cfg.augment();

    let mut cache = FeatureCache {
        entries: HashMap::new(),
    };
    let val_features: Option<Vec<Batch>> = if cfg.freeze_backbone {
        Some(
            val.chunks(16)
                .map(|chunk| {
                    let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
                    model.features(&Batch::from_images(&imgs))
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut history = Vec::new();
    let record = |history: &mut Vec<MetricRecord>, it: usize, v: f64| {
        history.push(MetricRecord {
            iteration: it,
            split: "val".into(),
            metric: "miou".into(),
            value: v,
        })
    };
    let v0 = val_miou(&model, val, val_features.as_deref())?;
    record(&mut history, 0, v0);
    let mut best = Checkpoint {
        model: model.clone(),
        iteration: 0,
        metric_name: "val_miou".into(),
        val_metric: v0,
    };

    let mut rng = rng_for(cfg.seed, "finetune");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut running = 0.0;
    let mut running_n = 0usize;
    for it in 1..=cfg.iterations {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let augs: Vec<Augment> = idx.iter().map(|_| Augment::draw(&aug_cfg, size, &mut rng)).collect();
        let batch_samples: Vec<SegSample> =
            idx.iter().zip(&augs).map(|(&i, a)| augment_sample(&train[i], *a)).collect();
        let refs: Vec<&SegSample> = batch_samples.iter().collect();
        let targets = targets_of(&refs, model.out_channels)?;
        let fwd = if cfg.freeze_backbone {
            let mut feats = Vec::with_capacity(idx.len());
            for (&i, a) in idx.iter().zip(&augs) {
                feats.push(cache.get(&model, train, i, *a)?.clone());
            }
            let feat_refs: Vec<&Batch> = feats.iter().collect();
            model.forward_from_features(&stack(&feat_refs))
        } else {
            let imgs: Vec<&Image> = refs.iter().map(|s| &s.image).collect();
            model.forward(&Batch::from_images(&imgs))?
        };
        let (loss, grad) = segmentation_loss(&fwd.logits, &targets);
        if !loss.is_finite() || !fwd.logits.data.iter().all(|z| z.is_finite()) {
            return Err(Error::Divergence {
                epoch: it,
                lr: cfg.learning_rate,
            });
        }
        running += loss;
        running_n += targets.len();
        let grads = model.backward(&fwd, &grad, !cfg.freeze_backbone);
        opt.step(&mut model.params, &grads);

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let v = val_miou(&model, val, val_features.as_deref())?;
            history.push(MetricRecord {
                iteration: it,
                split: "train".into(),
                metric: "loss".into(),
                value: running / running_n.max(1) as f64,
            });
            running = 0.0;
            running_n = 0;
            record(&mut history, it, v);
            log::debug!("finetune it {it}: val miou {v:.4}");
            if v > best.val_metric {
                best = Checkpoint {
                    model: model.clone(),
                    iteration: it,
                    metric_name: "val_miou".into(),
                    val_metric: v,
                };
            }
        }
    }
    Ok(FinetuneOutcome {
        checkpoint: best,
        history,
        optimizer_state: opt.state_names().cloned().collect(),
        final_model: model,
    })
}

/// Wraps ground-truth or pseudo-label planes as segmentation samples.
pub fn seg_samples(items: impl IntoIterator<Item = (String, Image, Vec<Mask>)>) -> Vec<SegSample> {
    items
        .into_iter()
        .map(|(id, image, targets)| SegSample { id, image, targets })
        .collect()
}
