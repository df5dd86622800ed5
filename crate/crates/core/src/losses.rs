//! The compound rim objective: detection, smoothed focal reading loss with
//! baseline rescaling, total variation, and their combination.

use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::diff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Aabb;
use crate::victims::{crop_and_resize, detect, read_plate, Alphabet, VictimWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { delta: 1e-8, epsilon: 0.01, alpha: 0.25, gamma: 2.0, zeta: 2.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.delta > 0.0
            && (0.0..1.0).contains(&self.epsilon)
            && self.alpha > 0.0
            && self.gamma >= 0.0
            && self.zeta >= 0.0
            && [self.delta, self.epsilon, self.alpha, self.gamma, self.zeta].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid loss config {self:?}")))
        }
    }
}

/// Target string and its `L×V` one-hot grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSpec {
    pub text: String,
    pub one_hot: Tensor<f64>,
}

impl TargetSpec {
    pub fn new(text: &str, alphabet: &Alphabet, max_len: usize) -> Result<Self> {
        Ok(Self { text: text.to_string(), one_hot: alphabet.one_hot(text, max_len)? })
    }

    pub fn smoothed<T: Real>(&self, epsilon: f64) -> Tensor<T> {
        smooth_targets(&self.one_hot, epsilon).cast()
    }
}

/// `T(1 − ε) + ε/V`, with `V` the row width.
pub fn smooth_targets<T: Real>(t: &Tensor<T>, epsilon: f64) -> Tensor<T> {
    let v = t.shape()[t.shape().len() - 1] as f64;
    let (keep, add) = (T::from_f64(1.0 - epsilon), T::from_f64(epsilon / v));
    t.map(|x| x * keep + add)
}

/// Differentiable intersection-over-union of a predicted `[x0, y0, x1, y1]` box with a fixed box.
pub fn iou<'t, T: Real>(bbox: Var<'t, T>, a: &Aabb) -> Result<Var<'t, T>> {
    let tape = bbox.tape();
    let c = |v: f64| tape.constant(Tensor::scalar(T::from_f64(v)));
    let zero = c(0.0);
    let (bx0, by0, bx1, by1) = (bbox.at(0)?, bbox.at(1)?, bbox.at(2)?, bbox.at(3)?);
    let iw = bx1.minimum(&c(a.x_max))?.sub(&bx0.maximum(&c(a.x_min))?)?.maximum(&zero)?;
    let ih = by1.minimum(&c(a.y_max))?.sub(&by0.maximum(&c(a.y_min))?)?.maximum(&zero)?;
    let inter = iw.mul(&ih)?;
    let area_b = bx1.sub(&bx0)?.maximum(&zero)?.mul(&by1.sub(&by0)?.maximum(&zero)?)?;
    let union = area_b.add_scalar(T::from_f64(a.area())).sub(&inter)?;
    inter.div(&union)
}

/// `−IoU(B, A) / (conf + δ)`.
pub fn detection_loss<'t, T: Real>(bbox: Var<'t, T>, confidence: Var<'t, T>, a: &Aabb, cfg: &LossConfig) -> Result<Var<'t, T>> {
    if !(a.area() > 0.0) {
        return Err(Error::Argument(format!("target box {a:?} has no area")));
    }
    iou(bbox, a)?.neg().div(&confidence.add_scalar(T::from_f64(cfg.delta)))
}

/// `Σ_l −α (1 − p_t)^γ log(p_t + δ)` with `p_t = Σ_v T_smooth · O`.
pub fn focal_loss<'t, T: Real>(probs: Var<'t, T>, t_smooth: &Tensor<T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    if probs.shape() != t_smooth.shape() {
        return Err(Error::Shape(format!("probabilities {:?} vs targets {:?}", probs.shape(), t_smooth.shape())));
    }
    let tape = probs.tape();
    let pt = probs.mul(&tape.constant(t_smooth.clone()))?.row_sum()?;
    let log = pt.add_scalar(T::from_f64(cfg.delta)).log();
    let per_pos = if cfg.gamma == 0.0 {
        log
    } else {
        let q = pt.rsub_scalar(T::one()).maximum(&tape.constant(Tensor::zeros(pt.shape())))?;
        let w = if cfg.gamma == 2.0 { q.square()? } else { q.powf(T::from_f64(cfg.gamma)) };
        w.mul(&log)?
    };
    Ok(per_pos.sum().mul_scalar(T::from_f64(-cfg.alpha)))
}

/// `focal / (baseline + δ)`.
pub fn ocr_loss<'t, T: Real>(focal: Var<'t, T>, baseline: f64, cfg: &LossConfig) -> Var<'t, T> {
    focal.mul_scalar(T::from_f64(1.0 / (baseline + cfg.delta)))
}

/// Mean squared difference over all horizontal and vertical neighbour pairs.
pub fn tv_loss<'t, T: Real>(patch: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = patch.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("tv_loss expects C×h×w, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let pairs = c * (h * (w - 1) + (h - 1) * w);
    if pairs == 0 {
        return Ok(patch.tape().scalar(T::zero()));
    }
    let (mut lo, mut hi) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if x + 1 < w {
                    lo.push(i);
                    hi.push(i + 1);
                }
                if y + 1 < h {
                    lo.push(i);
                    hi.push(i + w);
                }
            }
        }
    }
    let a = patch.gather(Rc::new(lo), vec![pairs])?;
    let b = patch.gather(Rc::new(hi), vec![pairs])?;
    Ok(a.sub(&b)?.square()?.sum().mul_scalar(T::from_f64(1.0 / pairs as f64)))
}

/// `(det + ocr)/2 + ζ·tv`.
pub fn compound_loss<'t, T: Real>(det: Var<'t, T>, ocr: Var<'t, T>, tv: Var<'t, T>, cfg: &LossConfig) -> Result<Var<'t, T>> {
    det.add(&ocr)?.mul_scalar(T::from_f64(0.5)).add(&tv.mul_scalar(T::from_f64(cfg.zeta)))
}

/// Mean focal loss of the unmodified images against `target`.
pub fn baseline_focal(images: &[LabeledImage], victims: &VictimWeights, target: &TargetSpec, cfg: &LossConfig) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Argument("baseline needs at least one image".into()));
    }
    let ts: Tensor<f32> = target.smoothed(cfg.epsilon);
    let per: Vec<Option<(f64, bool)>> = images
        .par_iter()
        .map(|li| {
            let tape = Tape::new();
            let x = tape.constant(li.image.clone());
            let det = detect(victims, x)?;
            let found = det.detection().found;
            let m = &victims.meta;
            match crop_and_resize(x, det.bbox, m.crop_h, m.crop_w) {
                Ok(crop) => {
                    let probs = read_plate(victims, crop)?;
                    Ok(Some((focal_loss(probs, &ts, cfg)?.item() as f64, found)))
                }
                Err(Error::DegenerateBox(_)) => Ok(None),
                Err(e) => Err(e.with_item(&li.id)),
            }
        })
        .collect::<Result<_>>()?;
    if !per.iter().flatten().any(|(_, found)| *found) {
        return Err(Error::DegenerateBaseline(format!("no detections among {} images", images.len())));
    }
    let vals: Vec<f64> = per.iter().flatten().map(|(v, _)| *v).collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}
