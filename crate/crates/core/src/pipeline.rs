//! In-memory experiment stages shared by the command line and the
//! acceptance suite: ensemble training, boosting, evidence collection,
//! mask generation, pre-training and downstream fine-tuning.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FinetuneInit, RunConfig, Task};
use crate::datagen::{generate_corpus, Corpus, CorpusConfig, ImageSample, Split};
use crate::doll::{
    collect_evidence, compute_boost_weights, masks_from_evidence, threshold_predictions, Aggregation, BoostWeights,
    ImageEvidence, PipelineConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, iou, MetricsReport, SegSample};
use crate::models::{build_segmodel, train_classifier, Classifier, SegModel, TrainConfig, TrainedClassifier};
use crate::seeding::{derive_seed, rng_for};
use crate::tensor::{Image, Mask};
use crate::training::{finetune, pretrain, FinetuneConfig, FinetuneOutcome, PretrainOutcome};

use rand::Rng;

pub fn model_id(m: usize, arch: &str) -> String {
    format!("m{m}-{arch}")
}

pub fn model_order(cfg: &PipelineConfig) -> Vec<String> {
    (0..cfg.ensemble_size).map(|m| model_id(m, cfg.arch_of(m))).collect()
}

/// Trains the ensemble; member `m` uses `arch_of(m)` and its own derived seed.
pub fn train_ensemble(corpus: &Corpus, run: &RunConfig) -> Result<Vec<TrainedClassifier>> {
    (0..run.pipeline.ensemble_size)
        .into_par_iter()
        .map(|m| {
            let cfg = TrainConfig {
                seed: derive_seed(run.seed, &format!("classifier/{m}")),
                ..run.classifier.clone()
            };
            train_classifier(corpus, run.pipeline.arch_of(m), &cfg)
        })
        .collect()
}

/// `probs[m][n][c]` for every classifier over `samples`.
pub fn ensemble_probabilities(classifiers: &[Classifier], samples: &[&ImageSample]) -> Result<Vec<Vec<Vec<f64>>>> {
    classifiers
        .iter()
        .map(|clf| {
            let mut out = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(64) {
                let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
                out.extend(clf.predict_batch(&imgs)?);
            }
            Ok(out)
        })
        .collect()
}

/// Boosting weights from hard predictions on `samples` (held out from
/// classifier training).
pub fn boost_weights(classifiers: &[Classifier], samples: &[&ImageSample], cfg: &PipelineConfig) -> Result<BoostWeights> {
    let probs = ensemble_probabilities(classifiers, samples)?;
    let preds = threshold_predictions(&probs, cfg.prediction_threshold);
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok(compute_boost_weights(&preds, &labels, cfg.k, model_order(cfg))?.0)
}

pub fn collect_all_evidence(
    classifiers: &[Classifier],
    samples: &[&ImageSample],
    cfg: &PipelineConfig,
) -> Result<Vec<ImageEvidence>> {
    samples
        .par_iter()
        .map(|s| collect_evidence(&s.id, &s.image, classifiers, cfg))
        .collect()
}

pub fn doll_masks(
    evidence: &[ImageEvidence],
    weights: &BoostWeights,
    cfg: &PipelineConfig,
    mode: Aggregation,
) -> Result<Vec<Vec<Mask>>> {
    evidence
        .iter()
        .map(|ev| masks_from_evidence(ev, weights, cfg, mode))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationQuality {
    /// Mean IoU of nonempty mask planes against ground truth, over positive labels.
    pub doll_iou: f64,
    /// Same, for each mask cyclically shifted by a random offset (equal area).
    pub random_iou: f64,
    pub pairs: usize,
    /// Mean positive fraction over nonempty planes.
    pub positive_fraction: f64,
    /// Fraction of positive-label planes left empty by the filter.
    pub empty_positive_planes: f64,
}

pub fn localization_quality(samples: &[&ImageSample], masks: &[Vec<Mask>], seed: u64) -> Result<LocalizationQuality> {
    let mut doll = 0.0;
    let mut random = 0.0;
    let mut pairs = 0usize;
    let mut frac = 0.0;
    let mut positives = 0usize;
    let mut empty = 0usize;
    for (s, planes) in samples.iter().zip(masks) {
        let gt = s
            .gt_masks
            .as_ref()
            .ok_or_else(|| Error::Empty(format!("ground truth for {}", s.id)))?;
        for (c, plane) in planes.iter().enumerate() {
            if s.labels[c] == 0 {
                continue;
            }
            positives += 1;
            if plane.is_empty() {
                empty += 1;
                continue;
            }
            let mut rng = rng_for(seed, &format!("random-baseline/{}/{c}", s.id));
            let shifted = plane.rolled(rng.random_range(0..plane.height), rng.random_range(0..plane.width));
            doll += iou(plane, &gt[c])?;
            random += iou(&shifted, &gt[c])?;
            frac += plane.count() as f64 / plane.len() as f64;
            pairs += 1;
        }
    }
    let n = pairs.max(1) as f64;
    Ok(LocalizationQuality {
        doll_iou: doll / n,
        random_iou: random / n,
        pairs,
        positive_fraction: frac / n,
        empty_positive_planes: empty as f64 / positives.max(1) as f64,
    })
}

pub fn to_seg_samples(samples: &[&ImageSample], masks: &[Vec<Mask>]) -> Vec<SegSample> {
    samples
        .iter()
        .zip(masks)
        .map(|(s, m)| SegSample {
            id: s.id.clone(),
            image: s.image.clone(),
            targets: m.clone(),
        })
        .collect()
}

/// The labeled downstream corpus: same image distribution, its own seed.
pub fn downstream_corpus_config(run: &RunConfig) -> CorpusConfig {
    CorpusConfig {
        n_train: run.downstream.shots,
        n_val: run.downstream.n_val,
        n_test: run.downstream.n_test,
        seed: derive_seed(run.corpus.seed, "downstream"),
        ..run.corpus.clone()
    }
}

/// Ground-truth planes of `task` for one split.
pub fn task_samples(corpus: &Corpus, split: Split, task: Task) -> Result<Vec<SegSample>> {
    let channels = task.channels(corpus.config.n_observations);
    corpus
        .split(split)
        .into_iter()
        .map(|s| {
            let gt = s
                .gt_masks
                .as_ref()
                .ok_or_else(|| Error::Empty(format!("ground truth for {}", s.id)))?;
            Ok(SegSample {
                id: s.id.clone(),
                image: s.image.clone(),
                targets: channels.iter().map(|c| gt[*c].clone()).collect(),
            })
        })
        .collect()
}

pub fn task_class_names(corpus_cfg: &CorpusConfig, task: Task) -> Vec<String> {
    let names = corpus_cfg.observation_names();
    task.channels(corpus_cfg.n_observations)
        .into_iter()
        .map(|c| names[c].clone())
        .collect()
}

/// Everything up to the masks: corpus, ensemble, weights and per-image
/// evidence for the train and val splits.
pub struct Prepared {
    pub corpus: Corpus,
    pub ensemble: Vec<TrainedClassifier>,
    pub weights: BoostWeights,
    pub evidence_train: Vec<ImageEvidence>,
    pub evidence_val: Vec<ImageEvidence>,
}

impl Prepared {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let corpus = generate_corpus(&run.corpus)?;
        let ensemble = train_ensemble(&corpus, run)?;
        let classifiers: Vec<Classifier> = ensemble.iter().map(|t| t.classifier.clone()).collect();
        let val = corpus.split(Split::Val);
        let weights = boost_weights(&classifiers, &val, &run.pipeline)?;
        let evidence_train = collect_all_evidence(&classifiers, &corpus.split(Split::Train), &run.pipeline)?;
        let evidence_val = collect_all_evidence(&classifiers, &val, &run.pipeline)?;
        Ok(Prepared {
            corpus,
            ensemble,
            weights,
            evidence_train,
            evidence_val,
        })
    }

    pub fn classifiers(&self) -> Vec<Classifier> {
        self.ensemble.iter().map(|t| t.classifier.clone()).collect()
    }

    /// Masks for the train and val splits under `mode`.
    pub fn masks(&self, run: &RunConfig, mode: Aggregation) -> Result<(Vec<Vec<Mask>>, Vec<Vec<Mask>>)> {
        Ok((
            doll_masks(&self.evidence_train, &self.weights, &run.pipeline, mode)?,
            doll_masks(&self.evidence_val, &self.weights, &run.pipeline, mode)?,
        ))
    }

    pub fn pretrain(&self, run: &RunConfig, mode: Aggregation) -> Result<PretrainOutcome> {
        let (train_masks, val_masks) = self.masks(run, mode)?;
        let train = to_seg_samples(&self.corpus.split(Split::Train), &train_masks);
        let val = to_seg_samples(&self.corpus.split(Split::Val), &val_masks);
        pretrain_on(run, &train, &val)
    }
}

pub fn pretrain_on(run: &RunConfig, train: &[SegSample], val: &[SegSample]) -> Result<PretrainOutcome> {
    let model = build_segmodel(
        &run.downstream.arch,
        run.corpus.n_observations,
        run.corpus.channels,
        derive_seed(run.seed, "segmodel"),
    )?;
    let cfg = TrainConfig {
        seed: derive_seed(run.seed, "pretrain"),
        ..run.pretrain.clone()
    };
    pretrain(&model, train, val, &cfg, 32)
}

/// The `segnet` classifier whose backbone seeds the classification baseline.
pub fn train_backbone_classifier(corpus: &Corpus, run: &RunConfig) -> Result<TrainedClassifier> {
    let cfg = TrainConfig {
        seed: derive_seed(run.seed, "backbone-classifier"),
        ..run.classifier.clone()
    };
    train_classifier(corpus, "segnet", &cfg)
}

/// Starting model for fine-tuning on `task`. The pre-trained model or the
/// classifier must be supplied for the matching `init`.
pub fn initial_model(
    run: &RunConfig,
    init: FinetuneInit,
    task: Task,
    pretrained: Option<&SegModel>,
    backbone_classifier: Option<&Classifier>,
) -> Result<SegModel> {
    let out = task.channels(run.corpus.n_observations).len();
    let head_seed = derive_seed(run.seed, "head");
    match init {
        FinetuneInit::Doll => pretrained
            .ok_or_else(|| Error::Empty("pre-trained segmentation model".into()))?
            .replace_head(out, head_seed),
        FinetuneInit::Scratch => build_segmodel(&run.downstream.arch, out, run.corpus.channels, derive_seed(run.seed, "segmodel")),
        FinetuneInit::ClassifierBackbone => SegModel::from_classifier_backbone(
            backbone_classifier.ok_or_else(|| Error::Empty("backbone classifier".into()))?,
            out,
            head_seed,
        ),
    }
}

#[derive(Clone, Debug)]
pub struct DownstreamResult {
    pub outcome: FinetuneOutcome,
    pub test: MetricsReport,
}

/// Fine-tunes `init` on the downstream task's train split, selecting on val.
pub fn finetune_task(run: &RunConfig, downstream: &Corpus, task: Task, init: &SegModel, freeze_backbone: bool) -> Result<FinetuneOutcome> {
    let train = task_samples(downstream, Split::Train, task)?;
    let val = task_samples(downstream, Split::Val, task)?;
    let cfg = FinetuneConfig {
        freeze_backbone,
        seed: derive_seed(run.seed, "finetune"),
        ..run.finetune.clone()
    };
    finetune(init, &train, &val, &cfg)
}

pub fn evaluate_task(run: &RunConfig, downstream: &Corpus, task: Task, model: &SegModel, run_id: &str) -> Result<MetricsReport> {
    let test = task_samples(downstream, Split::Test, task)?;
    let names = task_class_names(&downstream.config, task);
    if model.out_channels != names.len() {
        return Err(Error::shape(format!("{} output channels for task {}", names.len(), task.as_str()), model.out_channels));
    }
    evaluate_model(run_id, model, &test, &names, run.downstream.threshold)
}

/// [`finetune_task`] followed by [`evaluate_task`] on the selected checkpoint.
pub fn run_downstream(
    run: &RunConfig,
    downstream: &Corpus,
    task: Task,
    init: &SegModel,
    freeze_backbone: bool,
    run_id: &str,
) -> Result<DownstreamResult> {
    let outcome = finetune_task(run, downstream, task, init, freeze_backbone)?;
    let test = evaluate_task(run, downstream, task, &outcome.checkpoint.model, run_id)?;
    Ok(DownstreamResult { outcome, test })
}
