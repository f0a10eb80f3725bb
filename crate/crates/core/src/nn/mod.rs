//! Minimal differentiable building blocks: a batch tensor, a named
//! parameter store with backbone/head tags, and an Adam optimizer.

pub mod ops;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seeding::rng_for;
use crate::tensor::Image;

pub use ops::ConvSpec;

/// `n × c × h × w` batch, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Batch {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "batch size");
        Batch { n, c, h, w, data }
    }

    pub fn from_images(images: &[&Image]) -> Self {
        let (c, h, w) = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            assert_eq!(img.dims(), (c, h, w), "images in a batch must share a shape");
            data.extend_from_slice(&img.data);
        }
        Batch {
            n: images.len(),
            c,
            h,
            w,
            data,
        }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn image(&self, i: usize) -> Image {
        Image {
            channels: self.c,
            height: self.h,
            width: self.w,
            data: self.sample(i).to_vec(),
        }
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Batch {
        Batch {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }
}

/// Which side of the freeze boundary a parameter lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub tag: Tag,
    pub data: Vec<f64>,
}

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

pub type Grads = BTreeMap<String, Vec<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    /// He-normal weights, zero bias, drawn from a stream keyed by `(seed, name)`.
    pub fn init_conv(&mut self, name: &str, spec: &ConvSpec, tag: Tag, seed: u64) {
        let fan_in = spec.patch_len();
        let weight = he_normal(spec.weight_len(), fan_in, seed, &format!("{name}.weight"));
        self.insert(
            format!("{name}.weight"),
            Param {
                shape: vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel],
                tag,
                data: weight,
            },
        );
        self.insert(
            format!("{name}.bias"),
            Param {
                shape: vec![spec.out_ch],
                tag,
                data: vec![0.0; spec.out_ch],
            },
        );
    }

    pub fn init_dense(&mut self, name: &str, in_dim: usize, out_dim: usize, tag: Tag, seed: u64) {
        let weight = he_normal(in_dim * out_dim, in_dim, seed, &format!("{name}.weight"));
        self.insert(
            format!("{name}.weight"),
            Param {
                shape: vec![out_dim, in_dim],
                tag,
                data: weight,
            },
        );
        self.insert(
            format!("{name}.bias"),
            Param {
                shape: vec![out_dim],
                tag,
                data: vec![0.0; out_dim],
            },
        );
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.get(name).data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn names_with_tag(&self, tag: Tag) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of all arrays carrying `tag`.
    pub fn scalar_count(&self, tag: Option<Tag>) -> usize {
        self.params
            .values()
            .filter(|p| tag.is_none_or(|t| p.tag == t))
            .map(|p| p.data.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params
            .iter()
            .map(|(n, p)| (n.clone(), vec![0.0; p.data.len()]))
            .collect()
    }

    /// SHA-256 over name, tag, shape and little-endian values of every array
    /// matching `tag` (all arrays when `None`), in name order.
    pub fn digest(&self, tag: Option<Tag>) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in &self.params {
            if tag.is_some_and(|t| p.tag != t) {
                continue;
            }
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update([p.tag as u8]);
            hasher.update((p.shape.len() as u64).to_le_bytes());
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn he_normal(len: usize, fan_in: usize, seed: u64, label: &str) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = rng_for(seed, label);
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Adam over an explicit set of parameter names. Names outside the set are
/// never touched and never get optimizer state.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: &ParamStore, trainable: &[String], lr: f64) -> Self {
        let moments = trainable
            .iter()
            .map(|n| {
                let len = params.get(n).data.len();
                (n.clone(), (vec![0.0; len], vec![0.0; len]))
            })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn state_names(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, (m, v)) in self.moments.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let p = &mut params.get_mut(name).data;
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_changes_on_single_bit_flip() {
        let mut store = ParamStore::new();
        store.init_conv("c", &ConvSpec::k3(1, 2, 1), Tag::Backbone, 3);
        let before = store.digest(None);
        let w = &mut store.get_mut("c.weight").data;
        w[4] = f64::from_bits(w[4].to_bits() ^ 1);
        assert_ne!(before, store.digest(None));
        assert_eq!(before.len(), 64);
    }

    #[test]
    fn adam_skips_untracked_parameters() {
        let mut store = ParamStore::new();
        store.init_dense("a", 2, 2, Tag::Backbone, 1);
        store.init_dense("b", 2, 2, Tag::Head, 1);
        let trainable = store.names_with_tag(Tag::Head);
        let mut opt = Adam::new(&store, &trainable, 0.1);
        let grads: Grads = store.names().map(|n| (n.clone(), vec![1.0; store.get(n).data.len()])).collect();
        let bb = store.digest(Some(Tag::Backbone));
        let head = store.digest(Some(Tag::Head));
        opt.step(&mut store, &grads);
        assert_eq!(bb, store.digest(Some(Tag::Backbone)));
        assert_ne!(head, store.digest(Some(Tag::Head)));
        assert!(opt.state_names().all(|n| n.starts_with("b.")));
    }
}
