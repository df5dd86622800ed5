//! Patch optimization: logistic-parameterized patch, adaptive-moment steps,
//! plateau learning-rate halving and early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::diff::{sigmoid, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{composite, Aabb, CompositeOptions, Compositing, Quad};
use crate::losses::{baseline_focal, compound_loss, detection_loss, focal_loss, ocr_loss, tv_loss, LossConfig, TargetSpec};
use crate::optim::{AdamConfig, AdamW};
use crate::victims::{crop_and_resize, detect, read_plate, Alphabet, VictimWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Disrupt,
    Impersonate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub improvement_tol: f64,
    pub rim_scale: f64,
    pub rho_max: f64,
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    pub mode: AttackMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub literal_eq4: bool,
    pub compositing: Compositing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 100,
            batch: 64,
            plateau_patience: 5,
            early_stop_patience: 20,
            improvement_tol: 1e-6,
            rim_scale: 1.6,
            rho_max: 0.2,
            patch_h: 256,
            patch_w: 512,
            channels: 3,
            mode: AttackMode::Disrupt,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            literal_eq4: false,
            compositing: Compositing::Homography,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.epochs >= 1
            && self.batch >= 1
            && self.plateau_patience >= 1
            && self.early_stop_patience >= 1
            && self.improvement_tol >= 0.0
            && self.rim_scale > 0.0
            && (0.0..=crate::geometry::RHO_MAX).contains(&self.rho_max)
            && self.patch_h >= 1
            && self.patch_w >= 1
            && self.channels >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid training config {self:?}")))
        }
    }

    /// ρ used for validation: none in the brightness-factor reading, the
    /// mean draw under the literal formula (ρ = 0 would black the patch out).
    pub fn val_rho(&self) -> f64 {
        if self.literal_eq4 {
            self.rho_max / 2.0
        } else {
            0.0
        }
    }
}

/// Patch stored as unconstrained logits; pixels are their logistic image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub logits: Tensor<f32>,
}

impl Patch {
    pub fn pixels(&self) -> Tensor<f32> {
        self.logits.map(sigmoid)
    }

    pub fn from_pixels(pixels: &Tensor<f32>) -> Self {
        let logits = pixels.map(|p| {
            let p = p.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        });
        Self { logits }
    }
}

/// Logits uniform in `±√(6 / (2·h·w))`.
pub fn init_patch(h: usize, w: usize, channels: usize, seed: u64) -> Result<Patch> {
    if h == 0 || w == 0 || channels == 0 {
        return Err(Error::Argument(format!("patch dimensions must be positive, got {channels}x{h}x{w}")));
    }
    let a = (6.0 / (2.0 * (h * w) as f64)).sqrt() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Patch { logits: Tensor::from_fn(vec![channels, h, w], |_| rng.gen_range(-a..=a)) })
}

/// Disrupt: a random string that differs from `truth`. Impersonate: `truth`
/// with exactly two positions changed.
pub fn make_target(truth: &str, mode: AttackMode, alphabet: &Alphabet, max_len: usize, seed: u64) -> Result<TargetSpec> {
    alphabet.encode(truth, max_len)?;
    let syms = alphabet.symbols();
    if syms.len() < 2 {
        return Err(Error::Argument("alphabet needs two symbols to build a differing target".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = match mode {
        AttackMode::Disrupt => loop {
            let s: String = (0..max_len).map(|_| syms[rng.gen_range(0..syms.len())]).collect();
            if s != truth {
                break s;
            }
        },
        AttackMode::Impersonate => {
            let mut chars: Vec<char> = truth.chars().collect();
            if chars.len() < 2 {
                return Err(Error::Argument(format!("impersonation needs at least two symbols in {truth:?}")));
            }
            for pos in rand::seq::index::sample(&mut rng, chars.len(), 2) {
                let old = chars[pos];
                let others: Vec<char> = syms.iter().copied().filter(|&c| c != old).collect();
                chars[pos] = others[rng.gen_range(0..others.len())];
            }
            chars.into_iter().collect()
        }
    };
    TargetSpec::new(&text, alphabet, max_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochCap,
    EarlyStop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrEvent {
    /// 1-based epoch after whose validation the rate was halved.
    pub epoch: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Validation-driven learning-rate halving and early stopping.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    pub lr: f64,
    plateau_patience: usize,
    stop_patience: usize,
    tol: f64,
    best: f64,
    since_best: usize,
    since_change: usize,
    epoch: usize,
    pub events: Vec<LrEvent>,
}

impl PlateauScheduler {
    pub fn new(lr: f64, plateau_patience: usize, stop_patience: usize, tol: f64) -> Self {
        Self {
            lr,
            plateau_patience,
            stop_patience,
            tol,
            best: f64::INFINITY,
            since_best: 0,
            since_change: 0,
            epoch: 0,
            events: Vec::new(),
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Record one epoch's validation loss.
    pub fn observe(&mut self, val: f64) -> ScheduleStep {
        self.epoch += 1;
        let mut step = ScheduleStep::default();
        if val < self.best - self.tol {
            self.best = val;
            self.since_best = 0;
            self.since_change = 0;
            step.improved = true;
            return step;
        }
        self.since_best += 1;
        self.since_change += 1;
        if self.since_change >= self.plateau_patience {
            self.lr *= 0.5;
            self.since_change = 0;
            self.events.push(LrEvent { epoch: self.epoch, lr: self.lr });
            step.halved = true;
        }
        if self.since_best >= self.stop_patience {
            step.stop = true;
        }
        step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub final_patch: Patch,
    pub best_patch: Patch,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub curve: Vec<EpochRecord>,
    pub lr_events: Vec<LrEvent>,
    pub stop: StopReason,
    pub baseline: f64,
    pub target: TargetSpec,
}

/// Everything one image's loss depends on besides the patch.
pub struct LossContext<'a, T: Real = f32> {
    pub victims: &'a VictimWeights<T>,
    pub target_smooth: Tensor<T>,
    pub baseline: f64,
    pub loss: LossConfig,
    pub rim_scale: f64,
    pub literal_eq4: bool,
    pub compositing: Compositing,
}

impl<'a> LossContext<'a, f32> {
    pub fn new(victims: &'a VictimWeights, target: &TargetSpec, baseline: f64, loss: &LossConfig, cfg: &TrainConfig) -> Self {
        Self {
            victims,
            target_smooth: target.smoothed(loss.epsilon),
            baseline,
            loss: *loss,
            rim_scale: cfg.rim_scale,
            literal_eq4: cfg.literal_eq4,
            compositing: cfg.compositing,
        }
    }
}

impl<T: Real> LossContext<'_, T> {
    pub fn options(&self, rho: f64) -> CompositeOptions {
        CompositeOptions { rim_scale: self.rim_scale, rho, literal_eq4: self.literal_eq4, mode: self.compositing }
    }
}

fn clip_box(b: &Aabb, w: usize, h: usize) -> Aabb {
    Aabb::new(b.x_min.max(0.0), b.y_min.max(0.0), b.x_max.min(w as f64), b.y_max.min(h as f64))
}

/// Detection and reading losses for one image with the patch composited at darkening `rho`.
pub fn rim_terms<'t, T: Real>(
    pixels: Var<'t, T>,
    image: &Tensor<T>,
    plate: &Quad,
    rho: f64,
    ctx: &LossContext<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let comp = composite(image, pixels, plate, &ctx.options(rho))?;
    let m = &ctx.victims.meta;
    // The rim box is clipped to the frame, where the predicted box lives.
    let a = clip_box(&comp.rim.bounding_box(), m.width, m.height);
    let det = detect(ctx.victims, comp.image)?;
    let l_det = detection_loss(det.bbox, det.confidence, &a, &ctx.loss)?;
    let crop = crop_and_resize(comp.image, det.bbox, m.crop_h, m.crop_w)?;
    let probs = read_plate(ctx.victims, crop)?;
    let l_ocr = ocr_loss(focal_loss(probs, &ctx.target_smooth, &ctx.loss)?, ctx.baseline, &ctx.loss);
    Ok((l_det, l_ocr))
}

/// Full compound loss of one image, total variation included.
pub fn compound_objective<'t, T: Real>(
    pixels: Var<'t, T>,
    image: &Tensor<T>,
    plate: &Quad,
    rho: f64,
    ctx: &LossContext<T>,
) -> Result<Var<'t, T>> {
    let (l_det, l_ocr) = rim_terms(pixels, image, plate, rho, ctx)?;
    compound_loss(l_det, l_ocr, tv_loss(pixels)?, &ctx.loss)
}

/// `(L_det + L_OCR) / 2`; the total-variation term is added once per batch.
fn image_objective<'t>(pixels: Var<'t, f32>, li: &LabeledImage, rho: f64, ctx: &LossContext) -> Result<Var<'t, f32>> {
    let (l_det, l_ocr) = rim_terms(pixels, &li.image, &li.plate, rho, ctx)?;
    compound_loss(l_det, l_ocr, pixels.tape().scalar(0.0), &ctx.loss)
}

fn image_value_and_grad(logits: &Tensor<f32>, li: &LabeledImage, rho: f64, ctx: &LossContext) -> Result<(f64, Tensor<f32>)> {
    let tape = Tape::new();
    let x = tape.param(logits.clone());
    let loss = image_objective(x.sigmoid(), li, rho, ctx).map_err(|e| e.with_item(&li.id))?;
    let g = tape.backward(loss)?;
    Ok((loss.item() as f64, g.wrt(x)))
}

fn tv_term(logits: &Tensor<f32>, zeta: f64, with_grad: bool) -> Result<(f64, Option<Tensor<f32>>)> {
    let tape = Tape::new();
    let x = if with_grad { tape.param(logits.clone()) } else { tape.constant(logits.clone()) };
    let l = tv_loss(x.sigmoid())?.mul_scalar(zeta as f32);
    let g = if with_grad { Some(tape.backward(l)?.wrt(x)) } else { None };
    Ok((l.item() as f64, g))
}

/// Mean compound loss over `images` at a fixed `rho`, without gradients.
pub fn dataset_loss(patch: &Patch, images: &[LabeledImage], rho: f64, ctx: &LossContext) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Argument("loss over an empty image set".into()));
    }
    let per: Vec<f64> = images
        .par_iter()
        .map(|li| {
            let tape = Tape::new();
            let x = tape.constant(patch.logits.clone());
            image_objective(x.sigmoid(), li, rho, ctx).map(|v| v.item() as f64).map_err(|e| e.with_item(&li.id))
        })
        .collect::<Result<_>>()?;
    let (tv, _) = tv_term(&patch.logits, ctx.loss.zeta, false)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64 + tv)
}

/// Optimize a rim patch against `victims` for `target`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    victims: &VictimWeights,
    target: &TargetSpec,
    loss: &LossConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    loss.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train_set.len(),
            val_set.len()
        )));
    }
    let baseline = baseline_focal(train_set, victims, target, loss)?;
    let ctx = LossContext::new(victims, target, baseline, loss, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut patch = init_patch(cfg.patch_h, cfg.patch_w, cfg.channels, rng.gen())?;
    let mut opt = AdamW::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    });
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_patience, cfg.early_stop_patience, cfg.improvement_tol);
    let mut best = (patch.clone(), 0usize, f64::INFINITY);
    let mut curve = Vec::new();
    let mut stop = StopReason::EpochCap;

    for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        opt.cfg.lr = lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let rhos: Vec<f64> = batch.iter().map(|_| rng.gen_range(0.0..=cfg.rho_max)).collect();
            let per: Vec<(f64, Tensor<f32>)> = batch
                .par_iter()
                .zip(&rhos)
                .map(|(&i, &rho)| image_value_and_grad(&patch.logits, &train_set[i], rho, &ctx))
                .collect::<Result<_>>()?;
            let n = batch.len() as f32;
            let mut grad = Tensor::zeros(patch.logits.shape().to_vec());
            let mut batch_loss = 0.0;
            for (l, g) in &per {
                batch_loss += l;
                grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b / n);
            }
            let (tv, tv_grad) = tv_term(&patch.logits, loss.zeta, true)?;
            grad.data_mut().iter_mut().zip(tv_grad.expect("requested").data()).for_each(|(a, b)| *a += b);
            total += batch_loss + tv * batch.len() as f64;
            opt.step(&mut [patch.logits.data_mut()], &[grad.data()]);
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = dataset_loss(&patch, val_set, cfg.val_rho(), &ctx)?;
        curve.push(EpochRecord { epoch, train_loss, val_loss, lr });
        log::info!("epoch {epoch} train {train_loss:.5} val {val_loss:.5} lr {lr}");
        let step = sched.observe(val_loss);
        if step.improved {
            best = (patch.clone(), epoch, val_loss);
        }
        if step.stop {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    Ok(TrainResult {
        final_patch: patch,
        best_patch: best.0,
        best_epoch: best.1,
        best_val_loss: best.2,
        curve,
        lr_events: sched.events,
        stop,
        baseline,
        target: target.clone(),
    })
}

/// Total variation of a patch's pixels.
pub fn patch_tv(patch: &Patch) -> Result<f64> {
    Ok(tv_term(&patch.logits, 1.0, false)?.0)
}
