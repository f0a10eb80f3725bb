//! File-backed pipeline stages under `<run_dir>/<run_id>/`.
//!
//! Every stage directory carries a `stamp.json` holding a key over the
//! inputs the stage was built from. A stage whose stamp matches is skipped
//! unless forced; the stamp is written last, so an interrupted stage reruns.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{FinetuneInit, RunConfig};
use crate::datagen::{generate_corpus, read_corpus, recorded_digest, write_corpus, Corpus, Split};
use crate::doll::{read_doll, write_doll, BoostWeights, DollManifest, DollMask};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, curves_csv, curves_svg, history_from_jsonl, history_to_jsonl, Comparison, MetricsReport};
use crate::formats::{self, ArtifactHeader, ArtifactKind};
use crate::models::Classifier;
use crate::pipeline::{self, LocalizationQuality};
use crate::training::Checkpoint;

pub const STAMP: &str = "stamp.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    key: String,
    config_digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    header: ArtifactHeader,
    weights: BoostWeights,
}

#[derive(Serialize, Deserialize)]
struct AucFile {
    header: ArtifactHeader,
    model_order: Vec<String>,
    /// `auc[m][c]`; null where a class has a single label value.
    auc: Vec<Vec<Option<f64>>>,
    mean_auc: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct QualityFile {
    header: ArtifactHeader,
    split: String,
    quality: LocalizationQuality,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    header: ArtifactHeader,
    checkpoint: String,
    report: MetricsReport,
}

/// One run: the resolved config and its output directory.
pub struct Workspace {
    pub root: PathBuf,
    pub config: RunConfig,
    pub config_digest: String,
    pub force: bool,
}

impl Workspace {
    /// `run_dir/<run_id>`; writes the resolved config as `config.txt`.
    pub fn open(run_dir: &Path, config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let root = run_dir.join(&config.run_id);
        fs::create_dir_all(&root)?;
        fs::write(root.join("config.txt"), config.to_text()?)?;
        Ok(Workspace {
            config_digest: config.digest()?,
            root,
            config,
            force,
        })
    }

    fn header(&self, kind: ArtifactKind) -> ArtifactHeader {
        ArtifactHeader::new(kind, self.config_digest.clone())
    }

    fn key(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let classifiers = json!({
            "corpus": c.corpus,
            "classifier": c.classifier,
            "seed": c.seed,
            "ensemble_size": c.pipeline.ensemble_size,
            "ensemble_archs": c.pipeline.ensemble_archs,
        });
        let with = |base: &Value, extra: Value| -> Value {
            let mut v = base.clone();
            if let (Some(m), Value::Object(e)) = (v.as_object_mut(), extra) {
                m.extend(e);
            }
            v
        };
        let value = match stage {
            Stage::Corpus => json!({ "corpus": c.corpus }),
            Stage::Downstream => json!({ "corpus": pipeline::downstream_corpus_config(c) }),
            Stage::Classifiers => classifiers,
            Stage::Weights => {
                let mut pipeline = serde_json::to_value(&c.pipeline)?;
                if let Some(m) = pipeline.as_object_mut() {
                    m.remove("aggregation");
                }
                with(&classifiers, json!({ "pipeline": pipeline }))
            }
            Stage::Doll => with(&classifiers, json!({ "pipeline": c.pipeline })),
            Stage::Pretrain => with(
                &classifiers,
                json!({ "pipeline": c.pipeline, "pretrain": c.pretrain, "arch": c.downstream.arch }),
            ),
            Stage::BackboneClassifier => json!({ "corpus": c.corpus, "classifier": c.classifier, "seed": c.seed }),
            Stage::Finetune => {
                let mut v = serde_json::to_value(c)?;
                if let Some(m) = v.as_object_mut() {
                    m.remove("run_id");
                }
                v
            }
        };
        Ok(format!("{}:{}", stage.name(), formats::digest(&value)?))
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        let c = &self.config;
        let name = match stage {
            Stage::Corpus => "corpus".to_string(),
            Stage::Downstream => "downstream".to_string(),
            Stage::Classifiers => "classifiers".to_string(),
            Stage::Weights => "weights".to_string(),
            Stage::Doll => format!("doll-{}", c.pipeline.aggregation.as_str()),
            Stage::Pretrain => format!("pretrain-{}", c.pipeline.aggregation.as_str()),
            Stage::BackboneClassifier => "backbone-classifier".to_string(),
            Stage::Finetune => self.finetune_name(),
        };
        self.root.join(name)
    }

    fn finetune_name(&self) -> String {
        let c = &self.config;
        let init = match c.downstream.init {
            FinetuneInit::Doll => format!("doll-{}", c.pipeline.aggregation.as_str()),
            other => other.as_str().to_string(),
        };
        let freeze = if c.finetune.freeze_backbone { "frozen" } else { "full" };
        format!("finetune-{}-{init}-{freeze}-{}shot", c.downstream.task.as_str(), c.downstream.shots)
    }

    /// Runs `body` in a fresh stage directory unless its stamp is current.
    fn stage(&self, stage: Stage, body: impl FnOnce(&Path) -> Result<()>) -> Result<Outcome> {
        let dir = self.dir(stage);
        let key = self.key(stage)?;
        if !self.force && read_stamp(&dir)?.is_some_and(|s| s.key == key) {
            log::info!("{}: up to date", dir.display());
            return Ok(Outcome::UpToDate);
        }
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        log::info!("{}: running", dir.display());
        body(&dir)?;
        let stamp = Stamp {
            stage: stage.name().into(),
            key,
            config_digest: self.config_digest.clone(),
        };
        write_json(&dir.join(STAMP), &stamp)?;
        Ok(Outcome::Ran)
    }

    /// The directory of a completed upstream stage built from this config.
    fn require(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.dir(stage);
        match read_stamp(&dir)? {
            None => Err(Error::MissingArtifact(dir.join(STAMP))),
            Some(s) if s.key != self.key(stage)? => Err(Error::config(
                "run",
                format!(
                    "{} was built from a different configuration; rerun `{}`",
                    dir.display(),
                    stage.command()
                ),
            )),
            Some(_) => Ok(dir),
        }
    }

    fn corpus(&self) -> Result<Corpus> {
        read_corpus(&self.require(Stage::Corpus)?, true)
    }

    fn downstream(&self) -> Result<Corpus> {
        read_corpus(&self.require(Stage::Downstream)?, true)
    }

    fn classifiers(&self) -> Result<Vec<Classifier>> {
        let dir = self.require(Stage::Classifiers)?;
        pipeline::model_order(&self.config.pipeline)
            .iter()
            .map(|id| Ok(Classifier::from_bytes(&read_file(&dir.join(format!("model-{id}.ckpt")))?)?.0))
            .collect()
    }

    fn weights(&self) -> Result<BoostWeights> {
        let path = self.require(Stage::Weights)?.join("weights.json");
        let file: WeightsFile = serde_json::from_slice(&read_file(&path)?)?;
        file.header.validate(ArtifactKind::Weights)?;
        file.weights.validate()?;
        Ok(file.weights)
    }

    pub fn gen_data(&self) -> Result<Outcome> {
        let a = self.stage(Stage::Corpus, |dir| write_corpus(&generate_corpus(&self.config.corpus)?, dir))?;
        let b = self.stage(Stage::Downstream, |dir| {
            write_corpus(&generate_corpus(&pipeline::downstream_corpus_config(&self.config))?, dir)
        })?;
        Ok(if a == Outcome::Ran || b == Outcome::Ran { Outcome::Ran } else { Outcome::UpToDate })
    }

    pub fn train_classifiers(&self) -> Result<Outcome> {
        let corpus = self.corpus()?;
        self.stage(Stage::Classifiers, |dir| {
            let ensemble = pipeline::train_ensemble(&corpus, &self.config)?;
            let order = pipeline::model_order(&self.config.pipeline);
            let mut table = String::from("model  mean_auc  per_class\n");
            for (id, t) in order.iter().zip(&ensemble) {
                fs::write(dir.join(format!("model-{id}.ckpt")), t.classifier.to_bytes(&self.config_digest)?)?;
                let per: Vec<String> = t
                    .val_auc
                    .iter()
                    .map(|a| a.map_or("-".into(), |v| format!("{v:.3}")))
                    .collect();
                table.push_str(&format!("{id}  {:.3}  {}\n", t.mean_auc(), per.join(" ")));
            }
            fs::write(dir.join("auc.txt"), table)?;
            write_json(
                &dir.join("auc.json"),
                &AucFile {
                    header: self.header(ArtifactKind::Report),
                    model_order: order,
                    auc: ensemble.iter().map(|t| t.val_auc.clone()).collect(),
                    mean_auc: ensemble.iter().map(|t| t.mean_auc()).collect(),
                },
            )
        })
    }

    pub fn boost_weights(&self) -> Result<Outcome> {
        let corpus = self.corpus()?;
        let classifiers = self.classifiers()?;
        self.stage(Stage::Weights, |dir| {
            let weights = pipeline::boost_weights(&classifiers, &corpus.split(Split::Val), &self.config.pipeline)?;
            for w in &weights.warnings {
                log::warn!("{w}");
            }
            write_json(
                &dir.join("weights.json"),
                &WeightsFile {
                    header: self.header(ArtifactKind::Weights),
                    weights,
                },
            )
        })
    }

    /// Masks for the train and val splits, plus localization quality of the
    /// train masks against the ground truth.
    pub fn gen_doll(&self) -> Result<Outcome> {
        let corpus = self.corpus()?;
        let classifiers = self.classifiers()?;
        let weights = self.weights()?;
        self.stage(Stage::Doll, |dir| {
            let cfg = &self.config.pipeline;
            let names = corpus.config.observation_names();
            for split in [Split::Train, Split::Val] {
                let samples = corpus.split(split);
                let evidence = pipeline::collect_all_evidence(&classifiers, &samples, cfg)?;
                let masks = pipeline::doll_masks(&evidence, &weights, cfg, cfg.aggregation)?;
                if split == Split::Train {
                    let quality = pipeline::localization_quality(&samples, &masks, self.config.seed)?;
                    log::info!(
                        "mask IoU {:.4} vs shifted baseline {:.4} over {} pairs",
                        quality.doll_iou,
                        quality.random_iou,
                        quality.pairs
                    );
                    write_json(
                        &dir.join("quality.json"),
                        &QualityFile {
                            header: self.header(ArtifactKind::Report),
                            split: split.as_str().into(),
                            quality,
                        },
                    )?;
                }
                for (s, planes) in samples.iter().zip(masks) {
                    let mask = DollMask {
                        planes,
                        manifest: DollManifest {
                            observation_names: names.clone(),
                            source_image_id: s.id.clone(),
                            config_digest: self.config_digest.clone(),
                            model_order: weights.model_order.clone(),
                            aggregation: cfg.aggregation,
                            aggregate_index: "model".into(),
                        },
                    };
                    write_doll(&mask, &dir.join(format!("{}.doll", s.id)))?;
                }
            }
            Ok(())
        })
    }

    pub fn pretrain(&self) -> Result<Outcome> {
        let corpus = self.corpus()?;
        let doll_dir = self.require(Stage::Doll)?;
        let load = |split: Split| -> Result<Vec<crate::eval::SegSample>> {
            let samples = corpus.split(split);
            let masks = samples
                .iter()
                .map(|s| Ok(read_doll(&doll_dir.join(format!("{}.doll", s.id)))?.planes))
                .collect::<Result<Vec<_>>>()?;
            Ok(pipeline::to_seg_samples(&samples, &masks))
        };
        let (train, val) = (load(Split::Train)?, load(Split::Val)?);
        self.stage(Stage::Pretrain, |dir| {
            let out = pipeline::pretrain_on(&self.config, &train, &val)?;
            fs::write(dir.join("model.ckpt"), out.checkpoint.to_bytes(&self.config_digest)?)?;
            fs::write(dir.join("history.jsonl"), history_to_jsonl(&out.history)?)?;
            write_json(&dir.join("probe.json"), &json!({ "probe_losses": out.probe_losses }))
        })
    }

    fn backbone_classifier(&self) -> Result<Classifier> {
        let corpus = self.corpus()?;
        self.stage(Stage::BackboneClassifier, |dir| {
            let t = pipeline::train_backbone_classifier(&corpus, &self.config)?;
            fs::write(dir.join("model.ckpt"), t.classifier.to_bytes(&self.config_digest)?)?;
            Ok(())
        })?;
        let path = self.dir(Stage::BackboneClassifier).join("model.ckpt");
        Ok(Classifier::from_bytes(&read_file(&path)?)?.0)
    }

    /// Fine-tunes from `downstream.init` on `downstream.task`. The
    /// classification-backbone init trains its `segnet` classifier on demand.
    pub fn finetune(&self) -> Result<Outcome> {
        let c = &self.config;
        let downstream = self.downstream()?;
        let init = match c.downstream.init {
            FinetuneInit::Doll => {
                let path = self.require(Stage::Pretrain)?.join("model.ckpt");
                let pre = Checkpoint::from_bytes(&read_file(&path)?)?.0;
                pipeline::initial_model(c, FinetuneInit::Doll, c.downstream.task, Some(&pre.model), None)?
            }
            FinetuneInit::Scratch => pipeline::initial_model(c, FinetuneInit::Scratch, c.downstream.task, None, None)?,
            FinetuneInit::ClassifierBackbone => {
                let clf = self.backbone_classifier()?;
                pipeline::initial_model(c, FinetuneInit::ClassifierBackbone, c.downstream.task, None, Some(&clf))?
            }
        };
        self.stage(Stage::Finetune, |dir| {
            let out = pipeline::finetune_task(c, &downstream, c.downstream.task, &init, c.finetune.freeze_backbone)?;
            fs::write(dir.join("best.ckpt"), out.checkpoint.to_bytes(&self.config_digest)?)?;
            fs::write(dir.join("history.jsonl"), history_to_jsonl(&out.history)?)?;
            log::info!(
                "best val mIoU {:.4} at iteration {}",
                out.checkpoint.val_metric,
                out.checkpoint.iteration
            );
            Ok(())
        })
    }

    /// Scores a checkpoint on the downstream test split and writes
    /// `eval/<name>.json`. Defaults to the current fine-tuning checkpoint.
    pub fn eval(&self, checkpoint: Option<&Path>) -> Result<(PathBuf, MetricsReport)> {
        let default = self.dir(Stage::Finetune).join("best.ckpt");
        let path = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => {
                self.require(Stage::Finetune)?;
                default
            }
        };
        let ckpt = Checkpoint::from_bytes(&read_file(&path)?)?.0;
        let name = checkpoint_name(&path);
        let downstream = self.downstream()?;
        let report = pipeline::evaluate_task(
            &self.config,
            &downstream,
            self.config.downstream.task,
            &ckpt.model,
            &format!("{}/{name}", self.config.run_id),
        )?;
        let out = self.root.join("eval").join(format!("{name}.json"));
        fs::create_dir_all(out.parent().unwrap_or(&self.root))?;
        write_json(
            &out,
            &ReportFile {
                header: self.header(ArtifactKind::Report),
                checkpoint: path.display().to_string(),
                report: report.clone(),
            },
        )?;
        Ok((out, report))
    }

    /// Every stage for the current config, then evaluation.
    pub fn run_all(&self) -> Result<MetricsReport> {
        self.gen_data()?;
        self.train_classifiers()?;
        self.boost_weights()?;
        if self.config.downstream.init == FinetuneInit::Doll {
            self.gen_doll()?;
            self.pretrain()?;
        }
        self.finetune()?;
        Ok(self.eval(None)?.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Corpus,
    Downstream,
    Classifiers,
    Weights,
    Doll,
    Pretrain,
    BackboneClassifier,
    Finetune,
}

impl Stage {
    fn name(&self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Downstream => "downstream",
            Stage::Classifiers => "classifiers",
            Stage::Weights => "weights",
            Stage::Doll => "doll",
            Stage::Pretrain => "pretrain",
            Stage::BackboneClassifier => "backbone-classifier",
            Stage::Finetune => "finetune",
        }
    }

    fn command(&self) -> &'static str {
        match self {
            Stage::Corpus | Stage::Downstream => "gen-data",
            Stage::Classifiers => "train-classifiers",
            Stage::Weights => "boost-weights",
            Stage::Doll => "gen-doll",
            Stage::Pretrain => "pretrain",
            Stage::BackboneClassifier | Stage::Finetune => "finetune",
        }
    }
}

fn checkpoint_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    match path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
        Some(parent) if stem == "best" => parent.to_string(),
        _ => stem.to_string(),
    }
}

fn read_stamp(dir: &Path) -> Result<Option<Stamp>> {
    let path = dir.join(STAMP);
    if !path.exists() {
        return Ok(None);
    }
    Ok(serde_json::from_slice(&fs::read(path)?).ok())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = formats::canonical_json(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Compares every evaluation report of the given runs. Writes
/// `table.txt`, `table.csv`, `curves.csv` and `curves.svg` into `out`.
pub fn report(run_dir: &Path, run_ids: &[String], out: &Path) -> Result<Comparison> {
    if run_ids.is_empty() {
        return Err(Error::config("report", "no run ids given"));
    }
    let mut corpus_digest: Option<(String, String)> = None;
    let mut reports = Vec::new();
    let mut curves = Vec::new();
    let mut digests = Vec::new();
    for id in run_ids {
        let root = run_dir.join(id);
        let digest = recorded_digest(&root.join("corpus"))?;
        match &corpus_digest {
            None => corpus_digest = Some((id.clone(), digest)),
            Some((first, d)) if *d != digest => {
                return Err(Error::config(
                    "report",
                    format!("runs `{first}` and `{id}` were generated from different corpora"),
                ))
            }
            Some(_) => {}
        }
        let eval_dir = root.join("eval");
        if !eval_dir.exists() {
            return Err(Error::MissingArtifact(eval_dir));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&eval_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        for f in files {
            let file: ReportFile = serde_json::from_slice(&fs::read(&f)?)?;
            file.header.validate(ArtifactKind::Report)?;
            digests.push(file.header.config_digest.clone());
            let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let history = root.join(&name).join("history.jsonl");
            if history.exists() {
                curves.push((file.report.run_id.clone(), history_from_jsonl(&fs::read_to_string(history)?)?));
            }
            reports.push(file.report);
        }
    }
    let cmp = compare_runs(&reports)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("table.txt"), &cmp.text)?;
    fs::write(out.join("table.csv"), &cmp.csv)?;
    fs::write(out.join("curves.csv"), curves_csv(&curves, "val", "miou"))?;
    fs::write(out.join("curves.svg"), curves_svg(&curves, "val", "miou"))?;
    write_json(
        &out.join("report.json"),
        &json!({
            "header": ArtifactHeader::new(ArtifactKind::Report, formats::sha256_hex(digests.join(",").as_bytes())),
            "runs": run_ids,
            "source_config_digests": digests,
        }),
    )?;
    Ok(cmp)
}

/// Process exit status for an error: 2 config, 3 missing artifact, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::UnknownArch(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Divergence { .. } | Error::Numeric { .. } | Error::NoEvidence => 4,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_names() {
        assert_eq!(checkpoint_name(Path::new("/r/finetune-lung-scratch-full-20shot/best.ckpt")), "finetune-lung-scratch-full-20shot");
        assert_eq!(checkpoint_name(Path::new("/r/other.ckpt")), "other");
    }

    #[test]
    fn missing_upstream_names_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let ws = Workspace::open(tmp.path(), RunConfig::default(), false).unwrap();
        let err = ws.train_classifiers().unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(err.to_string().contains("corpus"));
    }

    #[test]
    fn stage_keys_ignore_unrelated_sections() {
        let tmp = tempfile::tempdir().unwrap();
        let a = Workspace::open(tmp.path(), RunConfig::default(), false).unwrap();
        let mut cfg = RunConfig::default();
        cfg.finetune.iterations = 7;
        cfg.downstream.init = FinetuneInit::Scratch;
        let b = Workspace::open(tmp.path(), cfg, false).unwrap();
        for s in [Stage::Corpus, Stage::Classifiers, Stage::Weights, Stage::Pretrain] {
            assert_eq!(a.key(s).unwrap(), b.key(s).unwrap());
        }
        assert_ne!(a.key(Stage::Finetune).unwrap(), b.key(Stage::Finetune).unwrap());
        assert_ne!(a.config_digest, b.config_digest);
    }
}
