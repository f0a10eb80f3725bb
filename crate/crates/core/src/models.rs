//! Model zoo: small multi-label classifiers (the weak learners) and a
//! segmentation network with an explicit backbone/head boundary.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, ImageSample, Split};
use crate::error::{Error, Result};
use crate::formats::{self, ArtifactHeader, ArtifactKind, CheckpointHeader};
use crate::nn::ops::{self, ConvSpec};
use crate::nn::{Adam, Batch, Grads, ParamStore, Tag};
use crate::seeding::rng_for;
use crate::tensor::{Image, Mask, Plane};

pub const CLASSIFIER_ARCHS: [&str; 5] = ["cnn-s", "cnn-m", "cnn-d", "mlp", "segnet"];
pub const SEGMENTATION_ARCHS: [&str; 2] = ["segnet", "segnet-s"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random shift of up to an eighth of the image, zero filled.
    pub augment_crop: bool,
    pub augment_flip: bool,
    /// Random half-turn. Quarter turns would swap the orientation-coded
    /// observations, so they are not offered.
    pub augment_rotate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
            augment_crop: false,
            augment_flip: true,
            augment_rotate: false,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: 30 epochs at lr 0.01, batch 128.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 128,
            augment_crop: true,
            augment_flip: true,
            augment_rotate: true,
            ..Self::default()
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config(format!("{prefix}.epochs"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{prefix}.batch_size"), "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{prefix}.learning_rate"), "must be positive"));
        }
        Ok(())
    }
}

/// Per-sample augmentation draw, applied identically to an image and its masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Augment {
    pub flip: bool,
    pub rotate: bool,
    pub shift: (isize, isize),
}

impl Augment {
    pub fn draw(cfg: &TrainConfig, size: usize, rng: &mut impl Rng) -> Self {
        let max = (size / 8) as i64;
        Augment {
            flip: cfg.augment_flip && rng.random_bool(0.5),
            rotate: cfg.augment_rotate && rng.random_bool(0.5),
            shift: if cfg.augment_crop && max > 0 {
                (
                    rng.random_range(-max..=max) as isize,
                    rng.random_range(-max..=max) as isize,
                )
            } else {
                (0, 0)
            },
        }
    }

    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut sy, mut sx) = (y as isize - self.shift.0, x as isize - self.shift.1);
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            return None;
        }
        if self.rotate {
            sy = h as isize - 1 - sy;
            sx = w as isize - 1 - sx;
        }
        if self.flip {
            sx = w as isize - 1 - sx;
        }
        Some((sy as usize, sx as usize))
    }

    pub fn is_identity(&self) -> bool {
        *self == Augment::default()
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let (c, h, w) = img.dims();
        let mut out = Image::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if let Some((sy, sx)) = self.source(y, x, h, w) {
                        out.data[(ch * h + y) * w + x] = img.data[(ch * h + sy) * w + sx];
                    }
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, m: &Mask) -> Mask {
        if self.is_identity() {
            return m.clone();
        }
        let mut out = Mask::empty(m.height, m.width);
        for y in 0..m.height {
            for x in 0..m.width {
                if let Some((sy, sx)) = self.source(y, x, m.height, m.width) {
                    out.set(y, x, m.get(sy, sx));
                }
            }
        }
        out
    }
}

/// Stack of convolution + ReLU layers named `{prefix}{i}`.
#[derive(Clone, Debug, PartialEq)]
struct ConvStack {
    prefix: String,
    specs: Vec<ConvSpec>,
}

struct StackCache {
    inputs: Vec<Batch>,
    outputs: Vec<Batch>,
}

impl ConvStack {
    fn name(&self, i: usize) -> String {
        format!("{}{}", self.prefix, i + 1)
    }

    fn init(&self, params: &mut ParamStore, tag: Tag, seed: u64) {
        for (i, spec) in self.specs.iter().enumerate() {
            params.init_conv(&self.name(i), spec, tag, seed);
        }
    }

    fn forward(&self, params: &ParamStore, x: &Batch) -> StackCache {
        let mut inputs = Vec::with_capacity(self.specs.len());
        let mut outputs: Vec<Batch> = Vec::with_capacity(self.specs.len());
        for (i, spec) in self.specs.iter().enumerate() {
            let input = if i == 0 { x.clone() } else { outputs[i - 1].clone() };
            let name = self.name(i);
            let z = ops::conv2d_forward(
                &input,
                params.data(&format!("{name}.weight")),
                params.data(&format!("{name}.bias")),
                spec,
            );
            outputs.push(ops::relu_forward(&z));
            inputs.push(input);
        }
        StackCache { inputs, outputs }
    }

    /// Backpropagates `grad_out` from the last layer. `extra[i]`, when set,
    /// is added to the gradient arriving at layer `i`'s output.
    fn backward(
        &self,
        params: &ParamStore,
        cache: &StackCache,
        grad_out: Option<Batch>,
        mut extra: Vec<Option<Batch>>,
        mut grads: Option<&mut Grads>,
        want_input: bool,
    ) -> Option<Batch> {
        extra.resize(self.specs.len(), None);
        let mut g = grad_out;
        for i in (0..self.specs.len()).rev() {
            let mut gi = match (g.take(), extra[i].take()) {
                (Some(a), Some(b)) => add(a, &b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            gi = ops::relu_backward(&cache.outputs[i], &gi);
            let name = self.name(i);
            let wname = format!("{name}.weight");
            let bname = format!("{name}.bias");
            let weight = params.data(&wname);
            let need_input = i > 0 || want_input;
            g = match grads.as_deref_mut() {
                Some(grads) => {
                    let mut gw = std::mem::take(grads.get_mut(&wname).expect("grad slot"));
                    let mut gb = std::mem::take(grads.get_mut(&bname).expect("grad slot"));
                    let gx = ops::conv2d_backward(
                        &cache.inputs[i],
                        weight,
                        &self.specs[i],
                        &gi,
                        Some((&mut gw, &mut gb)),
                        need_input,
                    );
                    grads.insert(wname, gw);
                    grads.insert(bname, gb);
                    gx
                }
                None => ops::conv2d_backward(&cache.inputs[i], weight, &self.specs[i], &gi, None, need_input),
            };
        }
        if want_input {
            g
        } else {
            None
        }
    }
}

fn add(mut a: Batch, b: &Batch) -> Batch {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    a
}

/// Backbone of the segmentation network, shared with the `segnet`
/// classifier so classification pre-training can seed it.
#[derive(Clone, Debug, PartialEq)]
struct SegBackbone {
    stack: ConvStack,
}

struct BackboneCache {
    stack: StackCache,
}

impl SegBackbone {
    fn new(in_ch: usize, widths: [usize; 4]) -> Self {
        let [w1, w2, w3, w4] = widths;
        SegBackbone {
            stack: ConvStack {
                prefix: "backbone.conv".into(),
                specs: vec![
                    ConvSpec::k3(in_ch, w1, 1),
                    ConvSpec::k3(w1, w2, 2),
                    ConvSpec::k3(w2, w3, 2),
                    ConvSpec::k3(w3, w4, 1),
                ],
            },
        }
    }

    fn feature_channels(&self) -> usize {
        let s = &self.stack.specs;
        s[0].out_ch + s[1].out_ch + s[3].out_ch
    }

    fn check_input(&self, x: &Batch) -> Result<()> {
        if x.h % 4 != 0 || x.w % 4 != 0 {
            return Err(Error::shape("height and width divisible by 4", format!("{}x{}", x.h, x.w)));
        }
        Ok(())
    }

    fn forward(&self, params: &ParamStore, x: &Batch) -> BackboneCache {
        BackboneCache {
            stack: self.stack.forward(params, x),
        }
    }

    /// Full-resolution features: shallow, mid (×2) and deep (×4) maps.
    fn features(&self, cache: &BackboneCache) -> Batch {
        let o = &cache.stack.outputs;
        let mid = ops::upsample_nearest(&o[1], 2);
        let deep = ops::upsample_nearest(&o[3], 4);
        ops::concat_channels(&[&o[0], &mid, &deep])
    }

    fn backward_from_features(
        &self,
        params: &ParamStore,
        cache: &BackboneCache,
        grad_features: &Batch,
        grads: Option<&mut Grads>,
        want_input: bool,
    ) -> Option<Batch> {
        let s = &self.stack.specs;
        let parts = ops::split_channels(grad_features, &[s[0].out_ch, s[1].out_ch, s[3].out_ch]);
        let g_shallow = parts[0].clone();
        let g_mid = ops::upsample_nearest_backward(&parts[1], 2);
        let g_deep = ops::upsample_nearest_backward(&parts[2], 4);
        self.stack.backward(
            params,
            &cache.stack,
            Some(g_deep),
            vec![Some(g_shallow), Some(g_mid), None, None],
            grads,
            want_input,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
enum ClassifierBody {
    Convs(ConvStack),
    Mlp { in_dim: usize, hidden: usize },
    Segnet(SegBackbone),
}

/// A multi-label classifier with per-class sigmoid outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch_id: String,
    pub params: ParamStore,
    pub n_classes: usize,
    pub input_channels: usize,
    pub image_size: usize,
    pub seed: u64,
    body: ClassifierBody,
}

enum BodyCache {
    Convs(StackCache),
    Mlp { input: Batch, hidden: Vec<f64> },
    Segnet(BackboneCache),
}

struct ClassifierCache {
    body: BodyCache,
    pooled: Vec<f64>,
    pooled_dim: usize,
    logits: Vec<f64>,
    n: usize,
}

fn classifier_body(arch_id: &str, in_ch: usize, image_size: usize) -> Result<ClassifierBody> {
    let stack = |specs: Vec<ConvSpec>| {
        ClassifierBody::Convs(ConvStack {
            prefix: "features.conv".into(),
            specs,
        })
    };
    Ok(match arch_id {
        "cnn-s" => stack(vec![
            ConvSpec::k3(in_ch, 4, 2),
            ConvSpec::k3(4, 8, 2),
            ConvSpec::k3(8, 8, 2),
        ]),
        "cnn-m" => stack(vec![
            ConvSpec::k3(in_ch, 8, 2),
            ConvSpec::k3(8, 16, 2),
            ConvSpec::k3(16, 16, 2),
        ]),
        "cnn-d" => stack(vec![
            ConvSpec::k3(in_ch, 6, 2),
            ConvSpec::k3(6, 8, 1),
            ConvSpec::k3(8, 12, 2),
            ConvSpec::k3(12, 12, 2),
        ]),
        "mlp" => ClassifierBody::Mlp {
            in_dim: in_ch * image_size * image_size,
            hidden: 32,
        },
        "segnet" => ClassifierBody::Segnet(SegBackbone::new(in_ch, SEGNET_WIDTHS)),
        other => return Err(Error::UnknownArch(other.to_string())),
    })
}

const SEGNET_WIDTHS: [usize; 4] = [8, 16, 16, 16];
const SEGNET_S_WIDTHS: [usize; 4] = [4, 8, 8, 8];

impl Classifier {
    pub fn new(arch_id: &str, input_channels: usize, n_classes: usize, image_size: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::config("n_classes", "must be positive"));
        }
        let body = classifier_body(arch_id, input_channels, image_size)?;
        let mut params = ParamStore::new();
        let pooled = match &body {
            ClassifierBody::Convs(stack) => {
                stack.init(&mut params, Tag::Backbone, seed);
                stack.specs.last().unwrap().out_ch
            }
            ClassifierBody::Mlp { in_dim, hidden } => {
                params.init_dense("features.fc1", *in_dim, *hidden, Tag::Backbone, seed);
                *hidden
            }
            ClassifierBody::Segnet(bb) => {
                bb.stack.init(&mut params, Tag::Backbone, seed);
                bb.stack.specs.last().unwrap().out_ch
            }
        };
        params.init_dense("classifier.fc", pooled, n_classes, Tag::Head, seed);
        Ok(Classifier {
            arch_id: arch_id.to_string(),
            params,
            n_classes,
            input_channels,
            image_size,
            seed,
            body,
        })
    }

    fn check_batch(&self, x: &Batch) -> Result<()> {
        if x.c != self.input_channels || x.h != self.image_size || x.w != self.image_size {
            return Err(Error::shape(
                format!("{}x{}x{}", self.input_channels, self.image_size, self.image_size),
                format!("{}x{}x{}", x.c, x.h, x.w),
            ));
        }
        if let ClassifierBody::Segnet(bb) = &self.body {
            bb.check_input(x)?;
        }
        Ok(())
    }

    fn forward(&self, x: &Batch) -> Result<ClassifierCache> {
        self.check_batch(x)?;
        let (body, pooled, dim) = match &self.body {
            ClassifierBody::Convs(stack) => {
                let cache = stack.forward(&self.params, x);
                let last = cache.outputs.last().unwrap();
                let pooled = ops::global_avg_pool(last);
                let dim = last.c;
                (BodyCache::Convs(cache), pooled, dim)
            }
            ClassifierBody::Mlp { in_dim, hidden } => {
                let z = ops::dense_forward(
                    &x.data,
                    x.n,
                    *in_dim,
                    self.params.data("features.fc1.weight"),
                    self.params.data("features.fc1.bias"),
                );
                let h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
                (
                    BodyCache::Mlp {
                        input: x.clone(),
                        hidden: h.clone(),
                    },
                    h,
                    *hidden,
                )
            }
            ClassifierBody::Segnet(bb) => {
                let cache = bb.forward(&self.params, x);
                let last = cache.stack.outputs.last().unwrap();
                let pooled = ops::global_avg_pool(last);
                let dim = last.c;
                (BodyCache::Segnet(cache), pooled, dim)
            }
        };
        let logits = ops::dense_forward(
            &pooled,
            x.n,
            dim,
            self.params.data("classifier.fc.weight"),
            self.params.data("classifier.fc.bias"),
        );
        Ok(ClassifierCache {
            body,
            pooled,
            pooled_dim: dim,
            logits,
            n: x.n,
        })
    }

    fn backward(
        &self,
        cache: &ClassifierCache,
        grad_logits: &[f64],
        mut grads: Option<&mut Grads>,
        want_input: bool,
    ) -> Option<Batch> {
        let c = self.n_classes;
        let g_pooled = {
            let pg = grads.as_deref_mut().map(|g| {
                (
                    std::mem::take(g.get_mut("classifier.fc.weight").unwrap()),
                    std::mem::take(g.get_mut("classifier.fc.bias").unwrap()),
                )
            });
            let (gp, pg) = match pg {
                Some((mut gw, mut gb)) => {
                    let gp = ops::dense_backward(
                        &cache.pooled,
                        cache.n,
                        cache.pooled_dim,
                        self.params.data("classifier.fc.weight"),
                        c,
                        grad_logits,
                        Some((&mut gw, &mut gb)),
                        true,
                    );
                    (gp, Some((gw, gb)))
                }
                None => (
                    ops::dense_backward(
                        &cache.pooled,
                        cache.n,
                        cache.pooled_dim,
                        self.params.data("classifier.fc.weight"),
                        c,
                        grad_logits,
                        None,
                        true,
                    ),
                    None,
                ),
            };
            if let (Some(g), Some((gw, gb))) = (grads.as_deref_mut(), pg) {
                g.insert("classifier.fc.weight".into(), gw);
                g.insert("classifier.fc.bias".into(), gb);
            }
            gp.unwrap()
        };
        match (&self.body, &cache.body) {
            (ClassifierBody::Convs(stack), BodyCache::Convs(sc)) => {
                let last = sc.outputs.last().unwrap();
                let g = ops::global_avg_pool_backward(&g_pooled, last.n, last.c, last.h, last.w);
                stack.backward(&self.params, sc, Some(g), vec![], grads, want_input)
            }
            (ClassifierBody::Segnet(bb), BodyCache::Segnet(bc)) => {
                let last = bc.stack.outputs.last().unwrap();
                let g = ops::global_avg_pool_backward(&g_pooled, last.n, last.c, last.h, last.w);
                bb.stack.backward(&self.params, &bc.stack, Some(g), vec![], grads, want_input)
            }
            (ClassifierBody::Mlp { in_dim, hidden }, BodyCache::Mlp { input, hidden: h }) => {
                let gz: Vec<f64> = g_pooled
                    .iter()
                    .zip(h)
                    .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                    .collect();
                let weight = self.params.data("features.fc1.weight");
                let gx = match grads {
                    Some(g) => {
                        let mut gw = std::mem::take(g.get_mut("features.fc1.weight").unwrap());
                        let mut gb = std::mem::take(g.get_mut("features.fc1.bias").unwrap());
                        let gx = ops::dense_backward(
                            &input.data,
                            input.n,
                            *in_dim,
                            weight,
                            *hidden,
                            &gz,
                            Some((&mut gw, &mut gb)),
                            want_input,
                        );
                        g.insert("features.fc1.weight".into(), gw);
                        g.insert("features.fc1.bias".into(), gb);
                        gx
                    }
                    None => ops::dense_backward(&input.data, input.n, *in_dim, weight, *hidden, &gz, None, want_input),
                };
                gx.map(|d| Batch { data: d, ..*input })
            }
            _ => unreachable!("cache does not match body"),
        }
    }

    /// Per-class probabilities for a batch, one row per image.
    pub fn predict_batch(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(vec![]);
        }
        let cache = self.forward(&Batch::from_images(images))?;
        Ok(cache
            .logits
            .chunks(self.n_classes)
            .map(|row| row.iter().map(|z| ops::sigmoid(*z)).collect())
            .collect())
    }

    pub fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Gradient of `−ln p_c` (binary cross entropy against a positive target)
    /// with respect to the input image.
    pub fn loss_gradient(&self, image: &Image, class_index: usize) -> Result<Image> {
        let x = Batch::from_images(&[image]);
        let g = self.loss_gradients_batch(&x, &[class_index])?.remove(0).image(0);
        if !g.is_finite() {
            return Err(Error::numeric(format!("input gradient of class {class_index}")));
        }
        Ok(g)
    }

    /// For every class in `classes`, the input gradient of `−ln p_c` at each
    /// image of `x`. One forward pass is shared across classes. Values are
    /// not checked for finiteness here.
    pub fn loss_gradients_batch(&self, x: &Batch, classes: &[usize]) -> Result<Vec<Batch>> {
        for &c in classes {
            if c >= self.n_classes {
                return Err(Error::config("class_index", format!("{c} out of range 0..{}", self.n_classes)));
            }
        }
        let cache = self.forward(x)?;
        let mut out = Vec::with_capacity(classes.len());
        for &c in classes {
            let mut g = vec![0.0; x.n * self.n_classes];
            for i in 0..x.n {
                // d(-ln σ(z))/dz = σ(z) - 1
                g[i * self.n_classes + c] = ops::sigmoid(cache.logits[i * self.n_classes + c]) - 1.0;
            }
            out.push(self.backward(&cache, &g, None, true).expect("input gradient requested"));
        }
        Ok(out)
    }

    /// Summed per-class BCE over the batch and its parameter gradient
    /// (averaged over images).
    fn loss_and_grads(&self, x: &Batch, targets: &[f64]) -> Result<(f64, Grads)> {
        let cache = self.forward(x)?;
        let mut loss = 0.0;
        let mut g = vec![0.0; cache.logits.len()];
        for (i, (z, t)) in cache.logits.iter().zip(targets).enumerate() {
            if !z.is_finite() {
                return Ok((f64::NAN, Grads::new()));
            }
            loss += bce_from_logit(*z, *t);
            g[i] = (ops::sigmoid(*z) - t) / x.n as f64;
        }
        let mut grads = self.params.zero_grads();
        self.backward(&cache, &g, Some(&mut grads), false);
        Ok((loss / x.n as f64, grads))
    }

    pub fn digest(&self) -> String {
        self.params.digest(None)
    }

    pub fn to_bytes(&self, config_digest: &str) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            artifact: ArtifactHeader::new(ArtifactKind::Classifier, config_digest),
            arch_id: self.arch_id.clone(),
            seed: self.seed,
            in_channels: self.input_channels,
            out_channels: self.n_classes,
            iteration: 0,
            metric_name: "image_size".into(),
            val_metric: self.image_size as f64,
            arrays: formats::array_entries(&self.params),
        };
        formats::encode_checkpoint(&header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        let (header, params) = formats::decode_checkpoint(bytes)?;
        header.artifact.validate(ArtifactKind::Classifier)?;
        let image_size = header.val_metric as usize;
        let mut clf = Classifier::new(&header.arch_id, header.in_channels, header.out_channels, image_size, header.seed)?;
        if formats::array_entries(&clf.params) != header.arrays {
            return Err(Error::format(0, "array table does not match the architecture"));
        }
        clf.params = params;
        Ok((clf, header))
    }
}

/// Per-element binary cross entropy from a logit, with the probability
/// clipped to `[ε, 1-ε]`.
pub fn bce_from_logit(z: f64, target: f64) -> f64 {
    let floor = BCE_EPS.ln();
    let log_p = ops::log_sigmoid(z).max(floor);
    let log_q = ops::log_sigmoid(-z).max(floor);
    -target * log_p - (1.0 - target) * log_q
}

pub const BCE_EPS: f64 = 1e-7;

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l == 1)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    /// Validation AUC per class; `None` when a class has a single label value.
    pub val_auc: Vec<Option<f64>>,
    pub epoch_losses: Vec<f64>,
}

impl TrainedClassifier {
    pub fn mean_auc(&self) -> f64 {
        let v: Vec<f64> = self.val_auc.iter().flatten().copied().collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Trains a classifier on the corpus train split with summed per-class
/// binary cross entropy and Adam, then scores the val split.
pub fn train_classifier(corpus: &Corpus, arch_id: &str, cfg: &TrainConfig) -> Result<TrainedClassifier> {
    cfg.validate("classifier")?;
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("train or val split".into()));
    }
    let (ch, size) = (train[0].image.channels, train[0].image.height);
    let mut clf = Classifier::new(arch_id, ch, corpus.config.n_observations, size, cfg.seed)?;
    let trainable: Vec<String> = clf.params.names().cloned().collect();
    let mut opt = Adam::new(&clf.params, &trainable, cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = rng_for(cfg.seed, &format!("classifier-epoch/{epoch}"));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Image> = chunk
                .iter()
                .map(|&i| Augment::draw(cfg, size, &mut rng).apply_image(&train[i].image))
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let targets: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| train[i].labels.iter().map(|l| *l as f64))
                .collect();
            let (loss, grads) = clf.loss_and_grads(&Batch::from_images(&refs), &targets)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    lr: cfg.learning_rate,
                });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut clf.params, &grads);
        }
        if !clf.params.iter().all(|(_, p)| p.data.iter().all(|v| v.is_finite())) {
            return Err(Error::Divergence {
                epoch,
                lr: cfg.learning_rate,
            });
        }
        let mean = total / train.len() as f64;
        log::debug!("{arch_id} seed {} epoch {epoch}: loss {mean:.4}", cfg.seed);
        epoch_losses.push(mean);
    }
    let val_auc = validation_auc(&clf, &val)?;
    Ok(TrainedClassifier {
        classifier: clf,
        val_auc,
        epoch_losses,
    })
}

pub fn validation_auc(clf: &Classifier, samples: &[&ImageSample]) -> Result<Vec<Option<f64>>> {
    let mut probs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        probs.extend(clf.predict_batch(&imgs)?);
    }
    Ok((0..clf.n_classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let labels: Vec<u8> = samples.iter().map(|s| s.labels[c]).collect();
            auc(&scores, &labels)
        })
        .collect())
}

/// Segmentation network: a tagged backbone producing full-resolution
/// features and a light per-pixel head (the adapter).
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub arch_id: String,
    pub params: ParamStore,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
    backbone: SegBackbone,
    hidden: usize,
}

pub struct SegForward {
    backbone: BackboneCache,
    features: Batch,
    hidden: Batch,
    pub logits: Batch,
}

impl SegModel {
    fn head_specs(&self) -> [ConvSpec; 2] {
        [
            ConvSpec::k1(self.backbone.feature_channels(), self.hidden),
            ConvSpec::k1(self.hidden, self.out_channels),
        ]
    }

    pub fn head_scalar_count(&self) -> usize {
        self.params.scalar_count(Some(Tag::Head))
    }

    pub fn backbone_scalar_count(&self) -> usize {
        self.params.scalar_count(Some(Tag::Backbone))
    }

    pub fn backbone_digest(&self) -> String {
        self.params.digest(Some(Tag::Backbone))
    }

    pub fn head_digest(&self) -> String {
        self.params.digest(Some(Tag::Head))
    }

    fn init_head(&mut self, seed: u64) {
        for name in self.params.names_with_tag(Tag::Head) {
            self.params.remove(&name);
        }
        let [h1, h2] = self.head_specs();
        self.params.init_conv("head.conv1", &h1, Tag::Head, seed);
        self.params.init_conv("head.out", &h2, Tag::Head, seed);
    }

    fn check(&self, x: &Batch) -> Result<()> {
        if x.c != self.in_channels {
            return Err(Error::shape(format!("{} input channels", self.in_channels), x.c));
        }
        self.backbone.check_input(x)
    }

    /// Backbone features for `x`; the head consumes these unchanged.
    pub fn features(&self, x: &Batch) -> Result<Batch> {
        self.check(x)?;
        let cache = self.backbone.forward(&self.params, x);
        Ok(self.backbone.features(&cache))
    }

    fn head_forward(&self, features: &Batch) -> (Batch, Batch) {
        let [h1, h2] = self.head_specs();
        let hidden = ops::relu_forward(&ops::conv2d_forward(
            features,
            self.params.data("head.conv1.weight"),
            self.params.data("head.conv1.bias"),
            &h1,
        ));
        let logits = ops::conv2d_forward(
            &hidden,
            self.params.data("head.out.weight"),
            self.params.data("head.out.bias"),
            &h2,
        );
        (hidden, logits)
    }

    /// Head-only backward; returns the gradient at the features when asked.
    fn head_backward(
        &self,
        features: &Batch,
        hidden: &Batch,
        grad_logits: &Batch,
        grads: &mut Grads,
        want_features: bool,
    ) -> Option<Batch> {
        let [h1, h2] = self.head_specs();
        let mut take = |n: &str| std::mem::take(grads.get_mut(n).expect("head grad slot"));
        let (mut gw2, mut gb2, mut gw1, mut gb1) = (
            take("head.out.weight"),
            take("head.out.bias"),
            take("head.conv1.weight"),
            take("head.conv1.bias"),
        );
        let g_hidden = ops::conv2d_backward(
            hidden,
            self.params.data("head.out.weight"),
            &h2,
            grad_logits,
            Some((&mut gw2, &mut gb2)),
            true,
        )
        .unwrap();
        let g_hidden = ops::relu_backward(hidden, &g_hidden);
        let g_feat = ops::conv2d_backward(
            features,
            self.params.data("head.conv1.weight"),
            &h1,
            &g_hidden,
            Some((&mut gw1, &mut gb1)),
            want_features,
        );
        grads.insert("head.out.weight".into(), gw2);
        grads.insert("head.out.bias".into(), gb2);
        grads.insert("head.conv1.weight".into(), gw1);
        grads.insert("head.conv1.bias".into(), gb1);
        g_feat
    }

    pub fn forward(&self, x: &Batch) -> Result<SegForward> {
        self.check(x)?;
        let backbone = self.backbone.forward(&self.params, x);
        let features = self.backbone.features(&backbone);
        let (hidden, logits) = self.head_forward(&features);
        Ok(SegForward {
            backbone,
            features,
            hidden,
            logits,
        })
    }

    /// Forward from precomputed backbone features (frozen-backbone training).
    pub fn forward_from_features(&self, features: &Batch) -> SegForward {
        let (hidden, logits) = self.head_forward(features);
        SegForward {
            backbone: BackboneCache {
                stack: StackCache {
                    inputs: vec![],
                    outputs: vec![],
                },
            },
            features: features.clone(),
            hidden,
            logits,
        }
    }

    /// Parameter gradients for `grad_logits`. Backbone gradients are only
    /// computed when `train_backbone` is set; otherwise their slots stay
    /// absent from the returned map.
    pub fn backward(&self, fwd: &SegForward, grad_logits: &Batch, train_backbone: bool) -> Grads {
        let mut grads: Grads = if train_backbone {
            self.params.zero_grads()
        } else {
            self.params
                .names_with_tag(Tag::Head)
                .into_iter()
                .map(|n| {
                    let len = self.params.get(&n).data.len();
                    (n, vec![0.0; len])
                })
                .collect()
        };
        let g_feat = self.head_backward(&fwd.features, &fwd.hidden, grad_logits, &mut grads, train_backbone);
        if let Some(g) = g_feat {
            self.backbone
                .backward_from_features(&self.params, &fwd.backbone, &g, Some(&mut grads), false);
        }
        grads
    }

    /// Input gradient of `Σ coef · logits`; used for gradient checks.
    pub fn input_gradient(&self, x: &Batch, grad_logits: &Batch) -> Result<Batch> {
        let fwd = self.forward(x)?;
        let mut grads = self.params.zero_grads();
        let g_feat = self
            .head_backward(&fwd.features, &fwd.hidden, grad_logits, &mut grads, true)
            .unwrap();
        Ok(self
            .backbone
            .backward_from_features(&self.params, &fwd.backbone, &g_feat, None, true)
            .unwrap())
    }

    /// Per-pixel probabilities, `out_channels` planes per image.
    pub fn predict(&self, image: &Image) -> Result<Vec<Plane>> {
        let fwd = self.forward(&Batch::from_images(&[image]))?;
        let hw = image.plane_len();
        Ok(fwd
            .logits
            .data
            .chunks(hw)
            .map(|z| Plane {
                height: image.height,
                width: image.width,
                data: z.iter().map(|v| ops::sigmoid(*v)).collect(),
            })
            .collect())
    }

    /// Swaps in a freshly initialized head with `out_channels` outputs.
    /// Backbone arrays are untouched.
    pub fn replace_head(&self, out_channels: usize, seed: u64) -> Result<SegModel> {
        if out_channels == 0 {
            return Err(Error::config("out_channels", "must be at least 1"));
        }
        let mut m = self.clone();
        m.out_channels = out_channels;
        m.seed = seed;
        m.init_head(seed);
        Ok(m)
    }

    /// Builds a segmentation model whose backbone is copied from a `segnet`
    /// classifier; the head is freshly initialized.
    pub fn from_classifier_backbone(clf: &Classifier, out_channels: usize, seed: u64) -> Result<SegModel> {
        if clf.arch_id != "segnet" {
            return Err(Error::UnknownArch(format!(
                "{} has no segmentation backbone (expected segnet)",
                clf.arch_id
            )));
        }
        let mut m = build_segmodel("segnet", out_channels, clf.input_channels, seed)?;
        for name in m.params.names_with_tag(Tag::Backbone) {
            m.params.get_mut(&name).data = clf.params.data(&name).to_vec();
        }
        Ok(m)
    }

    pub fn to_bytes(&self, config_digest: &str, iteration: usize, metric_name: &str, val_metric: f64) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            artifact: ArtifactHeader::new(ArtifactKind::Segmodel, config_digest),
            arch_id: self.arch_id.clone(),
            seed: self.seed,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            iteration,
            metric_name: metric_name.to_string(),
            val_metric,
            arrays: formats::array_entries(&self.params),
        };
        formats::encode_checkpoint(&header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, CheckpointHeader)> {
        let (header, params) = formats::decode_checkpoint(bytes)?;
        header.artifact.validate(ArtifactKind::Segmodel)?;
        let mut m = build_segmodel(&header.arch_id, header.out_channels, header.in_channels, header.seed)?;
        if formats::array_entries(&m.params) != header.arrays {
            return Err(Error::format(0, "array table does not match the architecture"));
        }
        m.params = params;
        Ok((m, header))
    }
}

pub fn build_segmodel(arch_id: &str, out_channels: usize, in_channels: usize, seed: u64) -> Result<SegModel> {
    if out_channels == 0 {
        return Err(Error::config("out_channels", "must be at least 1"));
    }
    let (widths, hidden) = match arch_id {
        "segnet" => (SEGNET_WIDTHS, 8),
        "segnet-s" => (SEGNET_S_WIDTHS, 4),
        other => return Err(Error::UnknownArch(other.to_string())),
    };
    let backbone = SegBackbone::new(in_channels, widths);
    let mut params = ParamStore::new();
    backbone.stack.init(&mut params, Tag::Backbone, seed);
    let mut m = SegModel {
        arch_id: arch_id.to_string(),
        params,
        in_channels,
        out_channels,
        seed,
        backbone,
        hidden,
    };
    m.init_head(seed);
    Ok(m)
}
