use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nets::{detector_forward, reader_logits, read_image, VictimMeta, VictimWeights};
use crate::dataset::LabeledImage;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimTrainConfig {
    pub det_epochs: usize,
    pub ocr_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of positives held out for the clean-accuracy check.
    pub holdout_fraction: f64,
    /// Reader training stops once held-out exact-match accuracy reaches this.
    pub target_accuracy: f64,
    /// Training fails if held-out accuracy ends below this.
    pub accuracy_floor: f64,
    /// Per-edge crop jitter during reader training, as a fraction of box size.
    pub box_jitter: f64,
    /// Extra constant-colour negatives for the detector.
    pub constant_negatives: usize,
    pub box_weight: f64,
}

impl Default for VictimTrainConfig {
    fn default() -> Self {
        Self {
            det_epochs: 30,
            ocr_epochs: 40,
            batch: 32,
            lr: 2e-3,
            holdout_fraction: 0.1,
            target_accuracy: 0.98,
            accuracy_floor: 0.95,
            box_jitter: 0.06,
            constant_negatives: 24,
            box_weight: 20.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VictimReport {
    pub det_epochs_run: usize,
    pub ocr_epochs_run: usize,
    pub det_loss: Vec<f64>,
    pub ocr_loss: Vec<f64>,
    pub holdout_size: usize,
    pub holdout_accuracy: f64,
    pub holdout_mean_iou: f64,
    pub holdout_min_confidence: f64,
    pub negative_max_confidence: f64,
}

enum DetItem<'a> {
    Plate(&'a LabeledImage),
    Empty(&'a Tensor<f32>),
}

/// Supervised training of detector then reader. Deterministic in `seed`.
pub fn train_victims(
    positives: &[LabeledImage],
    negatives: &[Tensor<f32>],
    meta: VictimMeta,
    cfg: &VictimTrainConfig,
    seed: u64,
) -> Result<(VictimWeights, VictimReport)> {
    if positives.is_empty() {
        return Err(Error::Argument("victim training needs at least one labeled image".into()));
    }
    if cfg.batch == 0 || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Argument(format!("bad victim training config {cfg:?}")));
    }
    let want = [3, meta.height, meta.width];
    for p in positives {
        if p.image.shape() != want {
            return Err(Error::Argument(format!("{}: image {:?}, expected {want:?}", p.id, p.image.shape())));
        }
        meta.alphabet.encode(&p.text, meta.max_len).map_err(|e| e.with_item(&p.id))?;
    }
    if let Some(n) = negatives.iter().find(|n| n.shape() != want) {
        return Err(Error::Argument(format!("negative image {:?}, expected {want:?}", n.shape())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..positives.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if positives.len() >= 2 { ((positives.len() as f64 * cfg.holdout_fraction) as usize).max(1) } else { 0 };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let holdout: Vec<&LabeledImage> = hold_idx.iter().map(|&i| &positives[i]).collect();
    let train: Vec<&LabeledImage> = train_idx.iter().map(|&i| &positives[i]).collect();

    let constants: Vec<Tensor<f32>> = (0..cfg.constant_negatives)
        .map(|_| {
            let v: f32 = rng.gen_range(0.0..=1.0);
            Tensor::full(want.to_vec(), if rng.gen_bool(0.25) { 0.0 } else { v })
        })
        .collect();
    let mut weights = VictimWeights::init(meta, rng.gen())?;
    let mut report = VictimReport { holdout_size: holdout.len(), ..Default::default() };

    let mut det_items: Vec<DetItem> = train.iter().map(|p| DetItem::Plate(p)).collect();
    det_items.extend(negatives.iter().chain(&constants).map(DetItem::Empty));
    let det_names = names(&weights, "det.");
    let mut opt = AdamW::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    for epoch in 0..cfg.det_epochs {
        opt.cfg.lr = step_lr(cfg.lr, epoch, cfg.det_epochs);
        let mut idx: Vec<usize> = (0..det_items.len()).collect();
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in idx.chunks(cfg.batch) {
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> =
                batch.par_iter().map(|&i| detector_step(&weights, &det_names, &det_items[i], cfg)).collect();
            total += apply_batch(&mut weights, &det_names, &mut opt, results)?;
        }
        report.det_loss.push(total / det_items.len() as f64);
        report.det_epochs_run = epoch + 1;
        let (iou, min_conf) = detector_holdout(&weights, &holdout)?;
        log::info!("detector epoch {} loss {:.4} holdout IoU {iou:.3} min conf {min_conf:.3}", epoch + 1, total / det_items.len() as f64);
        if !holdout.is_empty() && iou >= 0.85 && min_conf >= 0.97 && epoch + 1 >= cfg.det_epochs / 2 {
            break;
        }
    }

    let ocr_names = names(&weights, "ocr.");
    let mut opt = AdamW::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    for epoch in 0..cfg.ocr_epochs {
        opt.cfg.lr = step_lr(cfg.lr, epoch, cfg.ocr_epochs);
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in idx.chunks(cfg.batch) {
            let jitters: Vec<[f64; 4]> =
                batch.iter().map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..=1.0) * cfg.box_jitter)).collect();
            let results: Vec<Result<(f64, Vec<Tensor<f32>>)>> = batch
                .par_iter()
                .zip(&jitters)
                .map(|(&i, j)| reader_step(&weights, &ocr_names, train[i], j))
                .collect();
            total += apply_batch(&mut weights, &ocr_names, &mut opt, results)?;
        }
        report.ocr_loss.push(total / train.len() as f64);
        report.ocr_epochs_run = epoch + 1;
        let acc = holdout_accuracy(&weights, &holdout)?;
        report.holdout_accuracy = acc;
        log::info!("reader epoch {} loss {:.4} holdout accuracy {acc:.3}", epoch + 1, total / train.len() as f64);
        if !holdout.is_empty() && acc >= cfg.target_accuracy {
            break;
        }
    }

    let (iou, min_conf) = detector_holdout(&weights, &holdout)?;
    report.holdout_mean_iou = iou;
    report.holdout_min_confidence = min_conf;
    report.negative_max_confidence = negatives
        .iter()
        .chain(&constants)
        .map(|n| read_image(&weights, n).map(|r| r.detection.confidence))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if !holdout.is_empty() && report.holdout_accuracy < cfg.accuracy_floor {
        return Err(Error::AccuracyFloor(format!(
            "held-out exact-match accuracy {:.3} < {:.3} after {} reader epochs (mean IoU {:.3}, min confidence {:.3})",
            report.holdout_accuracy, cfg.accuracy_floor, report.ocr_epochs_run, iou, min_conf
        )));
    }
    Ok((weights, report))
}

fn step_lr(base: f64, epoch: usize, total: usize) -> f64 {
    let f = epoch as f64 / total.max(1) as f64;
    if f < 0.6 {
        base
    } else if f < 0.85 {
        base * 0.3
    } else {
        base * 0.1
    }
}

fn names(w: &VictimWeights, prefix: &str) -> Vec<String> {
    w.tensors().keys().filter(|k| k.starts_with(prefix)).cloned().collect()
}

fn apply_batch(
    weights: &mut VictimWeights,
    names: &[String],
    opt: &mut AdamW,
    results: Vec<Result<(f64, Vec<Tensor<f32>>)>>,
) -> Result<f64> {
    let n = results.len() as f32;
    let mut sum: Option<Vec<Tensor<f32>>> = None;
    let mut total = 0.0;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = sum.expect("non-empty batch");
    grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v /= n));
    let tensors = weights.tensors_mut();
    let mut params: Vec<&mut [f32]> = Vec::with_capacity(names.len());
    for (k, t) in tensors.iter_mut() {
        if names.binary_search(k).is_ok() {
            params.push(t.data_mut());
        }
    }
    let g: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
    opt.step(&mut params, &g);
    Ok(total)
}

fn detector_step(
    weights: &VictimWeights,
    names: &[String],
    item: &DetItem,
    cfg: &VictimTrainConfig,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let tape = Tape::new();
    let p = weights.bind(&tape, "det.", true);
    let m = &weights.meta;
    let (image, target) = match item {
        DetItem::Plate(li) => (&li.image, Some(li.plate.bounding_box())),
        DetItem::Empty(t) => (*t, None),
    };
    let x = tape.leaf_rc(Rc::new(image.clone()), false);
    let det = detector_forward(m, &p, x)?;
    let loss = match target {
        Some(b) => {
            let scale = [m.width, m.height, m.width, m.height];
            let t = Tensor::from_fn(vec![4], |i| (b.to_array()[i].clamp(0.0, scale[i] as f64) / scale[i] as f64) as f32);
            let inv = Tensor::from_fn(vec![4], |i| 1.0 / scale[i] as f32);
            let diff = det.bbox.mul(&tape.constant(inv))?.sub(&tape.constant(t))?;
            // -log σ(z) = softplus(-z)
            diff.square()?.sum().mul_scalar(cfg.box_weight as f32).add(&det.logit.neg().softplus())?
        }
        None => det.logit.softplus(),
    };
    let grads = tape.backward(loss)?;
    let out = names.iter().map(|n| grads.wrt(*p.iter().find(|(k, _)| *k == n).expect("bound").1)).collect();
    Ok((loss.item() as f64, out))
}

fn reader_step(weights: &VictimWeights, names: &[String], li: &LabeledImage, jitter: &[f64; 4]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let m = &weights.meta;
    let tape = Tape::new();
    let p = weights.bind(&tape, "ocr.", true);
    let b = li.plate.bounding_box();
    let (bw, bh) = (b.width(), b.height());
    let bx = [
        b.x_min + jitter[0] * bw,
        b.y_min + jitter[1] * bh,
        b.x_max + jitter[2] * bw,
        b.y_max + jitter[3] * bh,
    ];
    let x = tape.leaf_rc(Rc::new(li.image.clone()), false);
    let bbox = tape.constant(Tensor::from_vec(bx.iter().map(|&v| v as f32).collect()));
    let crop = x.crop_resize(&bbox, m.crop_h, m.crop_w)?;
    let probs = reader_logits(m, &p, crop)?.softmax_rows()?;
    let target = m.alphabet.encode(&li.text, m.max_len)?;
    let idx: Vec<usize> = target.iter().enumerate().map(|(r, &k)| r * m.vocab + k).collect();
    let picked = probs.gather(Rc::new(idx), vec![m.max_len])?;
    let loss = picked.add_scalar(1e-9).log().mean().neg();
    let grads = tape.backward(loss)?;
    let out = names.iter().map(|n| grads.wrt(*p.iter().find(|(k, _)| *k == n).expect("bound").1)).collect();
    Ok((loss.item() as f64, out))
}

fn detector_holdout(weights: &VictimWeights, holdout: &[&LabeledImage]) -> Result<(f64, f64)> {
    if holdout.is_empty() {
        return Ok((0.0, 0.0));
    }
    let dets: Vec<(f64, f64)> = holdout
        .par_iter()
        .map(|li| read_image(weights, &li.image).map(|r| (r.detection.bbox.iou(&li.plate.bounding_box()), r.detection.confidence)))
        .collect::<Result<_>>()?;
    let iou = dets.iter().map(|d| d.0).sum::<f64>() / dets.len() as f64;
    let min_conf = dets.iter().map(|d| d.1).fold(1.0, f64::min);
    Ok((iou, min_conf))
}

/// Fraction of images whose full detect-crop-read pipeline returns the exact text.
pub fn holdout_accuracy(weights: &VictimWeights, images: &[&LabeledImage]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = images
        .par_iter()
        .map(|li| read_image(weights, &li.image).map(|r| r.detection.found && r.text == li.text))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / images.len() as f64)
}
