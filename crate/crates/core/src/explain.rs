//! Path-gradient attributions from a black baseline along a straight line.
//!
//! For `T` steps the map is `(1/T) Σ_{t=1..T} ∇L(t/T · X)`, the gradient of
//! the loss with respect to its input evaluated at the scaled image. There
//! is no `(X − baseline)` factor, so completeness does not hold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::nn::Batch;
use crate::tensor::{Image, Plane};

/// Anything with per-class input gradients of a scalar loss.
pub trait Scorer {
    /// One batch of input gradients per entry of `classes`, each shaped like `x`.
    fn input_gradients(&self, x: &Batch, classes: &[usize]) -> Result<Vec<Batch>>;
}

impl Scorer for Classifier {
    fn input_gradients(&self, x: &Batch, classes: &[usize]) -> Result<Vec<Batch>> {
        self.loss_gradients_batch(x, classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub values: Plane,
    pub model_id: usize,
    pub class_index: usize,
    pub steps: usize,
}

fn path_batch(image: &Image, steps: usize) -> Batch {
    let scaled: Vec<Image> = (1..=steps).map(|t| image.scaled(t as f64 / steps as f64)).collect();
    let refs: Vec<&Image> = scaled.iter().collect();
    Batch::from_images(&refs)
}

/// Signed per-channel maps for each class in `classes`, sharing the forward
/// passes along the path.
pub fn integrated_gradients_raw(
    scorer: &impl Scorer,
    image: &Image,
    classes: &[usize],
    steps: usize,
) -> Result<Vec<Image>> {
    if steps == 0 {
        return Err(Error::config("pipeline.steps", "must be at least 1"));
    }
    let x = path_batch(image, steps);
    let grads = scorer.input_gradients(&x, classes)?;
    grads
        .into_iter()
        .zip(classes)
        .map(|(g, &c)| {
            let mut acc = Image::zeros(image.channels, image.height, image.width);
            for t in 0..steps {
                let step = g.sample(t);
                if let Some(bad) = step.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "gradient of class {c} at step {} (element {bad})",
                        t + 1
                    )));
                }
                for (a, v) in acc.data.iter_mut().zip(step) {
                    *a += v;
                }
            }
            for a in acc.data.iter_mut() {
                *a /= steps as f64;
            }
            Ok(acc)
        })
        .collect()
}

/// Collapses channels by summing absolute values.
pub fn abs_reduce(raw: &Image) -> Plane {
    let mut out = Plane::zeros(raw.height, raw.width);
    for c in 0..raw.channels {
        for (o, v) in out.data.iter_mut().zip(raw.channel(c)) {
            *o += v.abs();
        }
    }
    out
}

pub fn integrated_gradients(
    scorer: &impl Scorer,
    image: &Image,
    class_index: usize,
    steps: usize,
) -> Result<AttributionMap> {
    let raw = integrated_gradients_raw(scorer, image, &[class_index], steps)?.remove(0);
    Ok(AttributionMap {
        values: abs_reduce(&raw),
        model_id: 0,
        class_index,
        steps,
    })
}

/// Max-norm distance between the signed `steps`-step and `reference`-step maps.
pub fn riemann_error(
    scorer: &impl Scorer,
    image: &Image,
    class_index: usize,
    steps: usize,
    reference: usize,
) -> Result<f64> {
    if reference <= steps {
        return Err(Error::config("reference", "must exceed steps"));
    }
    let a = integrated_gradients_raw(scorer, image, &[class_index], steps)?.remove(0);
    let b = integrated_gradients_raw(scorer, image, &[class_index], reference)?.remove(0);
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `L_c(x) = Σ_j w[c][j] · x_j^degree`, a closed-form scorer for checks.
#[derive(Clone, Debug, PartialEq)]
pub struct PolynomialScorer {
    pub weights: Vec<Vec<f64>>,
    pub degree: i32,
}

impl Scorer for PolynomialScorer {
    fn input_gradients(&self, x: &Batch, classes: &[usize]) -> Result<Vec<Batch>> {
        classes
            .iter()
            .map(|&c| {
                let w = self
                    .weights
                    .get(c)
                    .ok_or_else(|| Error::config("class_index", format!("{c} out of range")))?;
                if w.len() != x.sample_len() {
                    return Err(Error::shape(w.len(), x.sample_len()));
                }
                let k = self.degree as f64;
                let mut g = x.clone();
                for i in 0..x.n {
                    for (gv, wj) in g.sample_mut(i).iter_mut().zip(w) {
                        *gv = if self.degree == 0 { 0.0 } else { k * wj * gv.powi(self.degree - 1) };
                    }
                }
                Ok(g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Classifier;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_data(1, h, w, (0..h * w).map(|i| (i as f64 + 1.0) / (h * w) as f64).collect()).unwrap()
    }

    #[test]
    fn linear_scorer_gives_abs_weights_for_every_t() {
        let w = vec![0.5, -2.0, 0.0, 3.0];
        let s = PolynomialScorer {
            weights: vec![w.clone()],
            degree: 1,
        };
        let img = ramp(2, 2);
        for t in [1, 2, 5, 17] {
            let m = integrated_gradients(&s, &img, 0, t).unwrap();
            let want: Vec<f64> = w.iter().map(|v| v.abs()).collect();
            assert_eq!(m.values.data, want);
            assert_eq!(riemann_error(&s, &img, 0, t, t + 3).unwrap(), 0.0);
        }
    }

    #[test]
    fn quadratic_at_five_steps_is_one_point_two_x() {
        let img = ramp(3, 3);
        let s = PolynomialScorer {
            weights: vec![vec![1.0; 9]],
            degree: 2,
        };
        let raw = integrated_gradients_raw(&s, &img, &[0], 5).unwrap().remove(0);
        for (g, x) in raw.data.iter().zip(&img.data) {
            assert!((g - 1.2 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_error_shrinks_with_steps() {
        let img = ramp(3, 3);
        let s = PolynomialScorer {
            weights: vec![vec![1.0; 9]],
            degree: 2,
        };
        let e5 = riemann_error(&s, &img, 0, 5, 1000).unwrap();
        let e50 = riemann_error(&s, &img, 0, 50, 1000).unwrap();
        assert!(e5 >= e50);
    }

    #[test]
    fn pure_cubic_right_endpoint_error_is_closed_form() {
        // ∫ 3α²x² dα = x²; the right-endpoint sum overshoots by (3T+1)/(2T²).
        let img = ramp(2, 3);
        let s = PolynomialScorer {
            weights: vec![vec![1.0; 6]],
            degree: 3,
        };
        for t in [10usize, 100, 151] {
            let raw = integrated_gradients_raw(&s, &img, &[0], t).unwrap().remove(0);
            let tf = t as f64;
            for (g, x) in raw.data.iter().zip(&img.data) {
                let rel = (g - x * x) / (x * x);
                assert!((rel - (3.0 * tf + 1.0) / (2.0 * tf * tf)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_image_attribution_is_gradient_at_zero() {
        let clf = Classifier::new("cnn-s", 1, 2, 8, 1).unwrap();
        let zero = Image::zeros(1, 8, 8);
        let g = clf.loss_gradient(&zero, 1).unwrap();
        let m = integrated_gradients(&clf, &zero, 1, 5).unwrap();
        for (a, b) in m.values.data.iter().zip(&g.data) {
            assert!((a - b.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_channel_maps_sum_absolute_channels() {
        let clf = Classifier::new("cnn-m", 3, 2, 8, 4).unwrap();
        let img = ramp(8, 8).replicate(3);
        let raw = integrated_gradients_raw(&clf, &img, &[0], 3).unwrap().remove(0);
        let m = integrated_gradients(&clf, &img, 0, 3).unwrap();
        for i in 0..64 {
            let want: f64 = (0..3).map(|c| raw.data[c * 64 + i].abs()).sum();
            assert_eq!(m.values.data[i], want);
        }
    }

    #[test]
    fn classes_share_forward_but_match_single_calls() {
        let clf = Classifier::new("cnn-d", 1, 3, 16, 2).unwrap();
        let img = ramp(16, 16);
        let both = integrated_gradients_raw(&clf, &img, &[0, 2], 5).unwrap();
        let single = integrated_gradients_raw(&clf, &img, &[2], 5).unwrap();
        assert_eq!(both[1], single[0]);
    }

    #[test]
    fn zero_steps_rejected() {
        let s = PolynomialScorer {
            weights: vec![vec![1.0; 4]],
            degree: 1,
        };
        assert!(integrated_gradients(&s, &ramp(2, 2), 0, 0).is_err());
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut img = ramp(2, 2);
        img.data[1] = f64::NAN;
        let lin = PolynomialScorer {
            weights: vec![vec![1.0; 4]],
            degree: 2,
        };
        match integrated_gradients(&lin, &img, 0, 4) {
            Err(Error::Numeric { context }) => assert!(context.contains("step 1"), "{context}"),
            other => panic!("{other:?}"),
        }
    }
}
