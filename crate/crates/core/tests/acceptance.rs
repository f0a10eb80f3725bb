//! Acceptance suite: one PASS/FAIL line per criterion, each run at its stated
//! tolerance. A failing criterion is reported, not hidden; the process only
//! exits nonzero on failures when `DOLL_ACCEPTANCE_STRICT=1`.
//!
//! The desk-scale experiments (criteria 3-5) use `configs/desk.conf` with
//! seeds 0, 1, 2 for both the run and the corpus.

use std::path::Path;
use std::time::Instant;

use doll::commands::{report, Workspace};
use doll::config::{FinetuneInit, RunConfig, Task};
use doll::datagen::{generate_corpus, Corpus, Split};
use doll::doll::{
    aggregate, binarize, boost_weight, compute_boost_weights, decode_doll, encode_doll, filter_models, masks_from_evidence,
    Aggregation, BoostWeights, DollManifest, DollMask, ImageEvidence, PipelineConfig,
};
use doll::error::Error;
use doll::eval::iterations_to_fraction;
use doll::explain::{integrated_gradients_raw, PolynomialScorer, Scorer};
use doll::formats::sha256_hex;
use doll::models::{build_segmodel, Classifier, SegModel, CLASSIFIER_ARCHS};
use doll::nn::Batch;
use doll::pipeline::{self, LocalizationQuality, Prepared};
use doll::tensor::{Image, Mask, Plane};
use doll::training::Checkpoint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    lines: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Verdict {
            pass: true,
            lines: Vec::new(),
        }
    }

    /// Records one check; the criterion passes only if every check does.
    fn check(&mut self, ok: bool, what: String) {
        self.pass &= ok;
        self.lines.push(format!("[{}] {what}", if ok { "ok" } else { "FAILED" }));
    }

    fn note(&mut self, what: String) {
        self.lines.push(format!("      {what}"));
    }
}

fn print_verdict(id: u8, name: &str, mut v: Verdict, started: Instant, budget_s: f64) -> bool {
    let secs = started.elapsed().as_secs_f64();
    v.check(secs <= budget_s, format!("runtime {secs:.1}s within {budget_s:.0}s"));
    println!("{} criterion {id}: {name}", if v.pass { "PASS" } else { "FAIL" });
    for l in &v.lines {
        println!("    {l}");
    }
    v.pass
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn desk_config(seed: u64) -> RunConfig {
    let text = include_str!("../../../configs/desk.conf");
    let seed = seed.to_string();
    let overrides = [("seed".to_string(), seed.clone()), ("corpus.seed".to_string(), seed)];
    RunConfig::from_text(text, &overrides).expect("desk config")
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    let w0 = (2..=20)
        .map(|k| boost_weight((k - 1) as f64 / k as f64, k).abs())
        .fold(0.0, f64::max);
    v.check(w0 <= 1e-12, format!("max |W((K-1)/K)| over K=2..20 = {w0:.1e}"));

    let mut dev = 0.0f64;
    let mut iterations = 0usize;
    for _ in 0..200 {
        let (m, n, c) = (rng.random_range(1..=6), rng.random_range(1..=40), rng.random_range(1..=4));
        let preds: Vec<Vec<Vec<u8>>> = (0..m)
            .map(|_| (0..n).map(|_| (0..c).map(|_| rng.random_range(0..=1)).collect()).collect())
            .collect();
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..c).map(|_| rng.random_range(0..=1)).collect()).collect();
        let order = (0..m).map(|i| format!("m{i}")).collect();
        let (_, trace) = compute_boost_weights(&preds, &labels, 3, order).unwrap();
        for per_class in &trace {
            for s in per_class {
                dev = dev.max((s.iter().sum::<f64>() - 1.0).abs());
                iterations += 1;
            }
        }
    }
    v.check(dev <= 1e-12, format!("sample weights sum to 1 within {dev:.1e} over {iterations} iterations"));

    let mut agg_err = 0.0f64;
    let mut filter_ok = true;
    for _ in 0..200 {
        let m = rng.random_range(1..=6);
        let tau = rng.random_range(0.0..0.9);
        let probs: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let maps: Vec<Plane> = (0..m)
            .map(|_| Plane::from_data(4, 4, (0..16).map(|_| rng.random_range(0.0..5.0)).collect()).unwrap())
            .collect();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
        let kept = filter_models(&probs, tau);
        let expected_kept: Vec<usize> = (0..m).filter(|&i| probs[i] > tau).collect();
        filter_ok &= kept == expected_kept;
        if kept.is_empty() {
            continue;
        }
        let pairs: Vec<(&Plane, f64)> = kept.iter().map(|&i| (&maps[i], w[i])).collect();
        let got = aggregate(&pairs).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mut acc = 0.0;
                for &i in &kept {
                    acc += w[i] * maps[i].data[y * 4 + x];
                }
                let want = acc / kept.len() as f64;
                agg_err = agg_err.max((got.data[y * 4 + x] - want).abs());
            }
        }
    }
    v.check(filter_ok, "model filter keeps exactly p > tau".into());
    v.check(agg_err <= 1e-9, format!("weighted aggregation vs per-pixel loop on 4x4: max error {agg_err:.1e}"));

    let mut count_ok = true;
    for _ in 0..300 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let n = h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 3.0).collect();
        vals.shuffle(&mut rng);
        let p: f64 = rng.random_range(0.5..99.5);
        let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
        let mask = binarize(&Plane::from_data(h, w, vals).unwrap(), p);
        count_ok &= mask.count() == n - rank;
    }
    v.check(count_ok, "nearest-rank binarization: positives = N - ceil(pN/100) on 300 distinct-valued planes".into());

    let mut scale_ok = true;
    for trial in 0..20 {
        let (m, c) = (4, 3);
        let probs: Vec<Vec<f64>> = (0..m).map(|_| (0..c).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let cfg = PipelineConfig {
            ensemble_size: m,
            ..PipelineConfig::default()
        };
        let maps = probs
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&p| {
                        (p > cfg.tau)
                            .then(|| Plane::from_data(8, 8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
                    })
                    .collect()
            })
            .collect();
        let ev = ImageEvidence {
            id: format!("t{trial}"),
            height: 8,
            width: 8,
            probs,
            maps,
        };
        let weights = BoostWeights {
            values: (0..m).map(|_| (0..c).map(|_| rng.random_range(0.1..3.0)).collect()).collect(),
            model_order: (0..m).map(|i| format!("m{i}")).collect(),
            k: 3,
            warnings: Vec::new(),
        };
        let base = masks_from_evidence(&ev, &weights, &cfg, Aggregation::Boosted).unwrap();
        for s in [1e-3, 0.5, 2.0, 7.0, 1e4] {
            scale_ok &= masks_from_evidence(&ev, &weights.scaled(s), &cfg, Aggregation::Boosted).unwrap() == base;
        }
    }
    v.check(scale_ok, "masks unchanged when all boosting weights are scaled by 1e-3, 0.5, 2, 7, 1e4".into());
    v
}

// ---------------------------------------------------------------- criterion 2

struct Combo<'a> {
    a: f64,
    f: &'a Classifier,
    b: f64,
    g: &'a Classifier,
}

impl Scorer for Combo<'_> {
    fn input_gradients(&self, x: &Batch, classes: &[usize]) -> doll::Result<Vec<Batch>> {
        let gf = self.f.input_gradients(x, classes)?;
        let gg = self.g.input_gradients(x, classes)?;
        Ok(gf
            .into_iter()
            .zip(gg)
            .map(|(mut f, g)| {
                for (fv, gv) in f.data.iter_mut().zip(&g.data) {
                    *fv = self.a * *fv + self.b * gv;
                }
                f
            })
            .collect())
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    Image::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn criterion_2() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);

    let h = 1e-4;
    for arch in CLASSIFIER_ARCHS {
        let clf = Classifier::new(arch, 1, 3, 8, 17).unwrap();
        let img = random_image(&mut rng, 1, 8, 8);
        let mut worst = 0.0f64;
        for c in 0..3 {
            let g = clf.loss_gradient(&img, c).unwrap();
            let loss = |x: &Image| -clf.predict(x).unwrap()[c].ln();
            let mut fd = vec![0.0; img.data.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let (mut up, mut down) = (img.clone(), img.clone());
                up.data[i] += h;
                down.data[i] -= h;
                *slot = (loss(&up) - loss(&down)) / (2.0 * h);
            }
            let scale = fd.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-12);
            let err = g.data.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err);
        }
        v.check(worst < 1e-3, format!("{arch}: input gradient vs central differences, relative error {worst:.1e}"));
    }

    let img = random_image(&mut rng, 2, 5, 5);
    let weights: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
    let linear = PolynomialScorer {
        weights: vec![weights.clone()],
        degree: 1,
    };
    let base = integrated_gradients_raw(&linear, &img, &[0], 1).unwrap().remove(0);
    let mut spread = 0.0f64;
    for t in [2, 5, 10, 100] {
        let m = integrated_gradients_raw(&linear, &img, &[0], t).unwrap().remove(0);
        spread = spread.max(m.data.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    v.check(spread <= 1e-12, format!("linear scorer: attribution identical for T = 1, 2, 5, 10, 100 (spread {spread:.1e})"));

    // f(x) = sum w x^3; the path integral of its gradient from 0 to x is w x^2
    let cubic = PolynomialScorer {
        weights: vec![weights.clone()],
        degree: 3,
    };
    let got = integrated_gradients_raw(&cubic, &img, &[0], 100).unwrap().remove(0);
    let exact: Vec<f64> = img.data.iter().zip(&weights).map(|(x, w)| w * x * x).collect();
    let scale = exact.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let rel = got.data.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
    v.check(rel < 0.01, format!("cubic scorer, T=100: relative error {:.3}% against the analytic path integral (limit 1%)", rel * 100.0));

    let f = Classifier::new("cnn-s", 1, 2, 16, 5).unwrap();
    let g = Classifier::new("mlp", 1, 2, 16, 6).unwrap();
    let img = random_image(&mut rng, 1, 16, 16);
    let (a, b) = (0.7, -1.9);
    let combo = Combo { a, f: &f, b, g: &g };
    let lhs = integrated_gradients_raw(&combo, &img, &[0, 1], 5).unwrap();
    let rf = integrated_gradients_raw(&f, &img, &[0, 1], 5).unwrap();
    let rg = integrated_gradients_raw(&g, &img, &[0, 1], 5).unwrap();
    let mut lin_err = 0.0f64;
    let mut lin_scale = 0.0f64;
    for c in 0..2 {
        for i in 0..img.data.len() {
            let want = a * rf[c].data[i] + b * rg[c].data[i];
            lin_err = lin_err.max((lhs[c].data[i] - want).abs());
            lin_scale = lin_scale.max(want.abs());
        }
    }
    let lin_rel = lin_err / lin_scale.max(1e-300);
    v.check(lin_rel <= 1e-12, format!("attribution of a*f + b*g equals a*IG(f) + b*IG(g), relative error {lin_rel:.1e}"));
    v
}

// ------------------------------------------------------------- criteria 3-6

/// Per-seed state shared by the desk-scale criteria.
struct SeedRun {
    run: RunConfig,
    corpus: Corpus,
    mean_aucs: Vec<f64>,
    quality: LocalizationQuality,
    masks: [(Vec<Vec<Mask>>, Vec<Vec<Mask>>); 2],
    pretrained: [Option<SegModel>; 2],
    backbone_classifier: Option<Classifier>,
    downstream: Corpus,
}

fn mode_index(mode: Aggregation) -> usize {
    match mode {
        Aggregation::Boosted => 0,
        Aggregation::Averaged => 1,
    }
}

fn prepare_seed(seed: u64) -> SeedRun {
    let run = desk_config(seed);
    let prepared = Prepared::new(&run).expect("prepare");
    let boosted = prepared.masks(&run, Aggregation::Boosted).unwrap();
    let averaged = prepared.masks(&run, Aggregation::Averaged).unwrap();
    let quality = pipeline::localization_quality(&prepared.corpus.split(Split::Train), &boosted.0, run.seed).unwrap();
    let downstream = generate_corpus(&pipeline::downstream_corpus_config(&run)).unwrap();
    SeedRun {
        mean_aucs: prepared.ensemble.iter().map(|t| t.mean_auc()).collect(),
        quality,
        masks: [boosted, averaged],
        pretrained: [None, None],
        backbone_classifier: None,
        corpus: prepared.corpus,
        downstream,
        run,
    }
}

impl SeedRun {
    fn pretrained(&mut self, mode: Aggregation) -> SegModel {
        let i = mode_index(mode);
        if self.pretrained[i].is_none() {
            let (train_masks, val_masks) = &self.masks[i];
            let train = pipeline::to_seg_samples(&self.corpus.split(Split::Train), train_masks);
            let val = pipeline::to_seg_samples(&self.corpus.split(Split::Val), val_masks);
            let out = pipeline::pretrain_on(&self.run, &train, &val).expect("pretrain");
            self.pretrained[i] = Some(out.checkpoint.model);
        }
        self.pretrained[i].clone().unwrap()
    }

    fn downstream_arm(&mut self, init: FinetuneInit, mode: Aggregation, task: Task) -> pipeline::DownstreamResult {
        let pre = (init == FinetuneInit::Doll).then(|| self.pretrained(mode));
        if init == FinetuneInit::ClassifierBackbone && self.backbone_classifier.is_none() {
            let t = pipeline::train_backbone_classifier(&self.corpus, &self.run).unwrap();
            self.backbone_classifier = Some(t.classifier);
        }
        let model = pipeline::initial_model(&self.run, init, task, pre.as_ref(), self.backbone_classifier.as_ref()).unwrap();
        let freeze = init == FinetuneInit::Doll;
        pipeline::run_downstream(&self.run, &self.downstream, task, &model, freeze, init.as_str()).unwrap()
    }
}

fn criterion_3(seeds: &[SeedRun]) -> Verdict {
    let mut v = Verdict::new();
    for s in seeds {
        let n = s.corpus.samples.len();
        v.check(
            n == 2000 && s.corpus.config.image_size == 64 && s.corpus.config.n_observations == 4 && s.mean_aucs.len() == 5,
            format!(
                "seed {}: {n} images, {}x{}, C={}, M={}",
                s.run.seed,
                s.corpus.config.image_size,
                s.corpus.config.image_size,
                s.corpus.config.n_observations,
                s.mean_aucs.len()
            ),
        );
        let worst = s.mean_aucs.iter().cloned().fold(f64::INFINITY, f64::min);
        let aucs: Vec<String> = s.mean_aucs.iter().map(|a| format!("{a:.3}")).collect();
        v.check(worst >= 0.75, format!("seed {}: classifier mean val AUC [{}] all >= 0.75", s.run.seed, aucs.join(", ")));
        v.note(format!(
            "seed {}: mask IoU {:.4}, shifted equal-area mask IoU {:.4}, ratio {:.2}, {} pairs, empty positive planes {:.1}%",
            s.run.seed,
            s.quality.doll_iou,
            s.quality.random_iou,
            s.quality.doll_iou / s.quality.random_iou,
            s.quality.pairs,
            100.0 * s.quality.empty_positive_planes
        ));
    }
    let doll = mean(&seeds.iter().map(|s| s.quality.doll_iou).collect::<Vec<_>>());
    let random = mean(&seeds.iter().map(|s| s.quality.random_iou).collect::<Vec<_>>());
    v.check(
        doll >= 2.0 * random,
        format!("mean over seeds: mask IoU {doll:.4} >= 2 x random {random:.4} (ratio {:.2})", doll / random),
    );
    v
}

struct Arm {
    miou: f64,
    it90: f64,
}

fn arm_summary(r: &pipeline::DownstreamResult, iterations: usize) -> Arm {
    Arm {
        miou: r.test.aggregates.miou,
        it90: iterations_to_fraction(&r.outcome.history, "val", "miou", 0.9).unwrap_or(iterations) as f64,
    }
}

fn criterion_4(seeds: &mut [SeedRun], results: &mut Vec<[f64; 2]>) -> Verdict {
    let mut v = Verdict::new();
    let mut arms: [Vec<Arm>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let inits = [FinetuneInit::Doll, FinetuneInit::Scratch, FinetuneInit::ClassifierBackbone];
    for s in seeds.iter_mut() {
        let iterations = s.run.finetune.iterations;
        let mut row = Vec::new();
        for (k, init) in inits.iter().enumerate() {
            let r = s.downstream_arm(*init, Aggregation::Boosted, Task::Multi);
            let a = arm_summary(&r, iterations);
            row.push(format!("{} {:.4} (90% at {})", init.as_str(), a.miou, a.it90));
            if k == 0 {
                results.push([a.miou, f64::NAN]);
            }
            arms[k].push(a);
        }
        v.note(format!("seed {}: test mIoU {}", s.run.seed, row.join(", ")));
    }
    let m = |k: usize| mean(&arms[k].iter().map(|a| a.miou).collect::<Vec<_>>());
    let it = |k: usize| mean(&arms[k].iter().map(|a| a.it90).collect::<Vec<_>>());
    let (a, b, c) = (m(0), m(1), m(2));
    v.check(a >= b + 0.02, format!("(a) DoLL frozen {a:.4} >= (b) scratch {b:.4} + 0.02"));
    v.check(a >= c, format!("(a) DoLL frozen {a:.4} >= (c) classifier backbone {c:.4}"));
    v.check(
        it(0) <= 0.5 * it(1),
        format!("(a) reaches 90% of its final val mIoU at iteration {:.0} <= half of (b)'s {:.0}", it(0), it(1)),
    );
    v
}

fn criterion_5(seeds: &mut [SeedRun], multi_boosted: &[[f64; 2]]) -> Verdict {
    let mut v = Verdict::new();
    let mut strictly_better = false;
    for task in Task::ALL {
        let mut boosted = Vec::new();
        let mut averaged = Vec::new();
        for (i, s) in seeds.iter_mut().enumerate() {
            let b = match (task, multi_boosted.get(i)) {
                (Task::Multi, Some(r)) => r[0],
                _ => s.downstream_arm(FinetuneInit::Doll, Aggregation::Boosted, task).test.aggregates.miou,
            };
            let a = s.downstream_arm(FinetuneInit::Doll, Aggregation::Averaged, task).test.aggregates.miou;
            v.note(format!("seed {} {}: boosted {b:.4}, averaged {a:.4}", s.run.seed, task.as_str()));
            boosted.push(b);
            averaged.push(a);
        }
        let (b, a) = (mean(&boosted), mean(&averaged));
        strictly_better |= b > a;
        v.check(b >= a - 0.005, format!("{}: boosted {b:.4} >= averaged {a:.4} - 0.005", task.as_str()));
    }
    v.check(strictly_better, "boosted strictly better on at least one task".into());
    v
}

fn criterion_6(seed: &mut SeedRun) -> Verdict {
    let mut v = Verdict::new();
    let pre = seed.pretrained(Aggregation::Boosted);
    let init = pre.replace_head(1, 99).unwrap();
    v.check(init.backbone_digest() == pre.backbone_digest(), "replace_head keeps the backbone digest".into());
    v.check(init.head_digest() != pre.head_digest(), "replace_head re-initializes the head".into());

    let run = &seed.run;
    let frozen = pipeline::finetune_task(run, &seed.downstream, Task::Lung, &init, true).unwrap();
    v.check(
        frozen.checkpoint.model.backbone_digest() == init.backbone_digest()
            && frozen.final_model.backbone_digest() == init.backbone_digest(),
        format!("frozen fine-tune, {} iterations: backbone digest unchanged", run.finetune.iterations),
    );
    let backbone_names = init.params.names_with_tag(doll::nn::Tag::Backbone);
    v.check(
        frozen.optimizer_state.iter().all(|n| !backbone_names.contains(n)),
        "optimizer state holds no backbone entries".into(),
    );
    v.check(
        frozen.final_model.head_digest() != init.head_digest(),
        "frozen fine-tune updates the head".into(),
    );
    let best = frozen
        .history
        .iter()
        .filter(|r| r.split == "val" && r.metric == "miou")
        .map(|r| r.value)
        .fold(f64::NEG_INFINITY, f64::max);
    v.check(frozen.checkpoint.val_metric == best, "selected checkpoint has the highest val mIoU in the history".into());

    let short = RunConfig {
        finetune: doll::training::FinetuneConfig {
            iterations: 20,
            eval_every: 10,
            ..run.finetune.clone()
        },
        ..run.clone()
    };
    let full = pipeline::finetune_task(&short, &seed.downstream, Task::Lung, &init, false).unwrap();
    v.check(full.final_model.backbone_digest() != init.backbone_digest(), "unfrozen fine-tune changes the backbone".into());
    v
}

// ---------------------------------------------------------------- criterion 7

fn golden(name: &str, bytes: &[u8], v: &mut Verdict) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("DOLL_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, bytes).unwrap();
    }
    match std::fs::read(&path) {
        Ok(want) => v.check(want == bytes, format!("{name} matches the golden file ({} bytes)", want.len())),
        Err(_) => v.check(false, format!("golden file {} is missing (run with DOLL_BLESS=1)", path.display())),
    }
}

fn is_format_error(r: doll::Result<impl Sized>) -> Option<u64> {
    match r {
        Err(Error::Format { offset, .. }) => Some(offset),
        _ => None,
    }
}

fn criterion_7(seed: Option<&SeedRun>) -> Verdict {
    let mut v = Verdict::new();
    let digest = sha256_hex(b"acceptance");

    // golden artifacts from fixed seeds, independent of the desk runs
    let seg = build_segmodel("segnet-s", 2, 1, 7).unwrap();
    let seg_bytes = seg.to_bytes(&digest, 3, "val_miou", 0.25).unwrap();
    golden("segmodel.ckpt", &seg_bytes, &mut v);
    let clf = Classifier::new("cnn-s", 1, 3, 16, 7).unwrap();
    let clf_bytes = clf.to_bytes(&digest).unwrap();
    golden("classifier.ckpt", &clf_bytes, &mut v);
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let planes: Vec<Mask> = (0..3)
        .map(|_| Mask::from_bits(9, 13, (0..117).map(|_| rng.random_bool(0.3)).collect()).unwrap())
        .collect();
    let toy = DollMask {
        planes,
        manifest: DollManifest {
            observation_names: vec!["a".into(), "b".into(), "c".into()],
            source_image_id: "img-0".into(),
            config_digest: digest.clone(),
            model_order: vec!["m0-cnn-s".into(), "m1-mlp".into()],
            aggregation: Aggregation::Boosted,
            aggregate_index: "model".into(),
        },
    };
    let doll_bytes = encode_doll(&toy).unwrap();
    golden("mask.doll", &doll_bytes, &mut v);

    let seg_again = SegModel::from_bytes(&seg_bytes).unwrap().0;
    let ck = Checkpoint::from_bytes(&seg_bytes).unwrap().0;
    v.check(
        seg_again.to_bytes(&digest, 3, "val_miou", 0.25).unwrap() == seg_bytes && ck.to_bytes(&digest).unwrap() == seg_bytes,
        "segmentation checkpoint: encode, decode, encode is byte-identical".into(),
    );
    v.check(
        Classifier::from_bytes(&clf_bytes).unwrap().0.to_bytes(&digest).unwrap() == clf_bytes,
        "classifier checkpoint: encode, decode, encode is byte-identical".into(),
    );

    // real masks from the desk corpus
    let mut n_masks = 0;
    let mut doll_ok = decode_doll(&doll_bytes).unwrap() == toy;
    if let Some(s) = seed {
        let samples = s.corpus.split(Split::Train);
        for (sample, planes) in samples.iter().zip(&s.masks[0].0).take(200) {
            let mask = DollMask {
                planes: planes.clone(),
                manifest: DollManifest {
                    source_image_id: sample.id.clone(),
                    observation_names: s.corpus.config.observation_names(),
                    ..toy.manifest.clone()
                },
            };
            let bytes = encode_doll(&mask).unwrap();
            let back = decode_doll(&bytes).unwrap();
            doll_ok &= back == mask && encode_doll(&back).unwrap() == bytes;
            n_masks += 1;
        }
    }
    v.check(doll_ok, format!("DOLL1: toy plus {n_masks} desk masks round-trip byte- and value-identically"));

    let mut corrupt_ok = true;
    let mut detail = Vec::new();
    for (label, bytes, decode) in [
        ("DOLL1", doll_bytes.clone(), 0u8),
        ("checkpoint", seg_bytes.clone(), 1u8),
    ] {
        let run = |b: &[u8]| -> Option<u64> {
            if decode == 0 {
                is_format_error(decode_doll(b))
            } else {
                is_format_error(SegModel::from_bytes(b))
            }
        };
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xff;
        let mut bad_version = bytes.clone();
        bad_version[4] = 0x7f;
        let truncated = &bytes[..bytes.len() - 3];
        let mut trailing = bytes.clone();
        trailing.push(0);
        let offsets = [run(&bad_magic), run(&bad_version), run(truncated), run(&trailing), run(&bytes[..6])];
        corrupt_ok &= offsets.iter().all(Option::is_some);
        detail.push(format!("{label} offsets {offsets:?}"));
    }
    v.check(
        corrupt_ok,
        format!("corrupt magic, version, truncation and trailing bytes rejected with offsets ({})", detail.join("; ")),
    );

    // two complete runs of one config in separate directories
    let text = include_str!("../../../configs/smoke.conf");
    let tables: Vec<String> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            let mut tables = String::new();
            for init in ["doll", "scratch", "classifier-backbone"] {
                let freeze = if init == "doll" { "true" } else { "false" };
                let cfg = RunConfig::from_text(
                    text,
                    &[
                        ("downstream.init".into(), init.into()),
                        ("finetune.freeze_backbone".into(), freeze.into()),
                    ],
                )
                .unwrap();
                Workspace::open(tmp.path(), cfg, false).unwrap().run_all().unwrap();
            }
            let cmp = report(tmp.path(), &["smoke".into()], &tmp.path().join("report")).unwrap();
            tables.push_str(&cmp.csv);
            tables.push_str(&std::fs::read_to_string(tmp.path().join("report/curves.csv")).unwrap());
            tables
        })
        .collect();
    v.check(
        tables[0] == tables[1],
        format!("two end-to-end runs of configs/smoke.conf give identical metric tables and curves ({} bytes)", tables[0].len()),
    );
    v
}

fn main() {
    let strict = std::env::var("DOLL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<u8>> = std::env::var("DOLL_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u8| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut all = Vec::new();

    if wanted(1) {
        let t = Instant::now();
        all.push(print_verdict(1, "math kernels against independent oracles", criterion_1(), t, 60.0));
    }
    if wanted(2) {
        let t = Instant::now();
        all.push(print_verdict(2, "attribution suite", criterion_2(), t, 120.0));
    }

    let desk = [3, 4, 5, 6].iter().any(|&i| wanted(i));
    let mut seeds = Vec::new();
    if desk {
        let t = Instant::now();
        for &s in &SEEDS {
            seeds.push(prepare_seed(s));
        }
        all.push(print_verdict(3, "mask localization on the desk corpus, 3 seeds", criterion_3(&seeds), t, 600.0));
    }
    let mut multi_boosted = Vec::new();
    if wanted(4) {
        let t = Instant::now();
        let v = criterion_4(&mut seeds, &mut multi_boosted);
        all.push(print_verdict(4, "20-shot downstream: DoLL frozen vs scratch vs classifier backbone", v, t, 1800.0));
    }
    if wanted(5) {
        let t = Instant::now();
        let v = criterion_5(&mut seeds, &multi_boosted);
        all.push(print_verdict(5, "boosted vs averaged aggregation ablation", v, t, 1200.0));
    }
    if wanted(6) {
        let t = Instant::now();
        let v = criterion_6(&mut seeds[0]);
        all.push(print_verdict(6, "freeze contract", v, t, 600.0));
    }
    if wanted(7) {
        let t = Instant::now();
        all.push(print_verdict(7, "formats and end-to-end determinism", criterion_7(seeds.first()), t, 600.0));
    }

    let failed = all.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", all.len() - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
