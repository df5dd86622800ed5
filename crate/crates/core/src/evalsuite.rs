//! Read-outcome classification, edit distances, attack metrics against a
//! shared control, and the four-way ablation harness.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Exclusion, LabeledImage};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{composite_pixels, CompositeOptions, Compositing};
use crate::losses::{LossConfig, TargetSpec};
use crate::trainer::{patch_tv, train, EpochRecord, Patch, StopReason, TrainConfig};
use crate::victims::{read_image, CameraPose, VictimWeights};

/// Edit distance used when detection fails.
pub const FAILED_EDIT_DISTANCE: usize = 7;

/// Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    CorrectRead,
    IncorrectRead,
    Impersonation,
    FailedDetection,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::CorrectRead, Outcome::IncorrectRead, Outcome::Impersonation, Outcome::FailedDetection];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::CorrectRead => "correct_read",
            Outcome::IncorrectRead => "incorrect_read",
            Outcome::Impersonation => "impersonation",
            Outcome::FailedDetection => "failed_detection",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Csv(format!("unknown outcome category {s:?}")))
    }
}

pub fn classify_outcome(decoded: &str, found: bool, truth: &str, target: &str) -> Result<Outcome> {
    if truth == target {
        return Err(Error::Argument(format!("target equals the true plate {truth:?}")));
    }
    Ok(if !found {
        Outcome::FailedDetection
    } else if decoded == truth {
        Outcome::CorrectRead
    } else if decoded == target {
        Outcome::Impersonation
    } else {
        Outcome::IncorrectRead
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub pose: Option<CameraPose>,
    pub category: Outcome,
    pub confidence: f64,
    pub ed_t: usize,
    pub ed_i: usize,
    pub decoded: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoHomography,
    NoTv,
    Neither,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] =
        [AblationVariant::Full, AblationVariant::NoHomography, AblationVariant::NoTv, AblationVariant::Neither];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoHomography => "no_homography",
            AblationVariant::NoTv => "no_tv",
            AblationVariant::Neither => "neither",
        }
    }

    pub fn drops_homography(self) -> bool {
        matches!(self, AblationVariant::NoHomography | AblationVariant::Neither)
    }

    pub fn drops_tv(self) -> bool {
        matches!(self, AblationVariant::NoTv | AblationVariant::Neither)
    }

    /// Training and loss configuration for this variant.
    pub fn configure(self, base: &TrainConfig, loss: &LossConfig) -> (TrainConfig, LossConfig) {
        let mut cfg = base.clone();
        let mut loss = *loss;
        if self.drops_homography() {
            cfg.compositing = Compositing::Rectangular;
        }
        if self.drops_tv() {
            loss.zeta = 0.0;
        }
        (cfg, loss)
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown ablation variant {s:?}")))
    }
}

/// How patches are placed on evaluation images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCompositing {
    /// Perspective placement for every variant, as a printed rim would appear.
    #[default]
    Homography,
    /// Rectangular placement for variants trained without homographies.
    FollowVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rim_scale: f64,
    /// Darkening applied to the patch at evaluation time.
    pub rho: f64,
    pub literal_eq4: bool,
    pub compositing: EvalCompositing,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { rim_scale: 1.6, rho: 0.0, literal_eq4: false, compositing: EvalCompositing::Homography }
    }
}

impl EvalConfig {
    fn options(&self, variant: AblationVariant) -> CompositeOptions {
        let mode = match self.compositing {
            EvalCompositing::FollowVariant if variant.drops_homography() => Compositing::Rectangular,
            _ => Compositing::Homography,
        };
        CompositeOptions { rim_scale: self.rim_scale, rho: self.rho, literal_eq4: self.literal_eq4, mode }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub correct_read: usize,
    pub incorrect_read: usize,
    pub impersonation: usize,
    pub failed_detection: usize,
}

impl OutcomeCounts {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            *c.slot(r.category) += 1;
        }
        c
    }

    fn slot(&mut self, o: Outcome) -> &mut usize {
        match o {
            Outcome::CorrectRead => &mut self.correct_read,
            Outcome::IncorrectRead => &mut self.incorrect_read,
            Outcome::Impersonation => &mut self.impersonation,
            Outcome::FailedDetection => &mut self.failed_detection,
        }
    }

    pub fn get(&self, o: Outcome) -> usize {
        let mut c = *self;
        *c.slot(o)
    }

    pub fn total(&self) -> usize {
        self.correct_read + self.incorrect_read + self.impersonation + self.failed_detection
    }
}

/// Aggregates of one condition (control or attack).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub n: usize,
    pub counts: OutcomeCounts,
    pub correct_read_rate: f64,
    pub incorrect_read_rate: f64,
    pub impersonation_rate: f64,
    pub failed_detection_rate: f64,
    pub mean_confidence: f64,
    pub mean_ed_t: f64,
    pub mean_ed_i: f64,
}

impl ConditionSummary {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let counts = OutcomeCounts::from_records(records);
        let n = records.len();
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            n,
            counts,
            correct_read_rate: rate(counts.correct_read),
            incorrect_read_rate: rate(counts.incorrect_read),
            impersonation_rate: rate(counts.impersonation),
            failed_detection_rate: rate(counts.failed_detection),
            mean_confidence: mean(&|r| r.confidence),
            mean_ed_t: mean(&|r| r.ed_t as f64),
            mean_ed_i: mean(&|r| r.ed_i as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub variant: Option<AblationVariant>,
    pub target: String,
    pub control: ConditionSummary,
    pub attack: ConditionSummary,
    /// Percent; absent when the control reads nothing correctly.
    pub correct_read_reduction_pct: Option<f64>,
    /// Successful impersonations over all evaluated images.
    pub asr: f64,
    pub control_asr: f64,
    /// Percent, over images the control detected; absent when there are none.
    pub confidence_reduction_pct: Option<f64>,
    pub confidence_reduction_n: usize,
    pub excluded: Vec<Exclusion>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub control_records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

fn check_image(li: &LabeledImage, victims: &VictimWeights, target: &str) -> std::result::Result<(), String> {
    let m = &victims.meta;
    if li.image.shape() != [3, m.height, m.width] {
        return Err(format!("image shape {:?} does not match victim input 3x{}x{}", li.image.shape(), m.height, m.width));
    }
    if let Err(e) = m.alphabet.encode(&li.text, m.max_len) {
        return Err(e.to_string());
    }
    if li.text == target {
        return Err(format!("true plate equals the target {target:?}"));
    }
    Ok(())
}

fn record(li: &LabeledImage, image: &Tensor<f32>, victims: &VictimWeights, target: &str) -> Result<EvalRecord> {
    let reading = read_image(victims, image)?;
    let found = reading.detection.found;
    let category = classify_outcome(&reading.text, found, &li.text, target)?;
    let (confidence, ed_t, ed_i) = if found {
        (reading.detection.confidence, levenshtein(&reading.text, &li.text), levenshtein(&reading.text, target))
    } else {
        (0.0, FAILED_EDIT_DISTANCE, FAILED_EDIT_DISTANCE)
    };
    Ok(EvalRecord { id: li.id.clone(), pose: li.pose.clone(), category, confidence, ed_t, ed_i, decoded: reading.text })
}

/// Split a dataset into the images evaluation can use and further exclusions.
fn usable<'a>(dataset: &'a Dataset, victims: &VictimWeights, target: &str) -> (Vec<&'a LabeledImage>, Vec<Exclusion>) {
    let mut excluded = dataset.excluded.clone();
    let mut ok = Vec::new();
    for li in &dataset.images {
        match check_image(li, victims, target) {
            Ok(()) => ok.push(li),
            Err(reason) => excluded.push(Exclusion { id: li.id.clone(), reason }),
        }
    }
    (ok, excluded)
}

fn run_condition(
    patch: Option<&Tensor<f32>>,
    variant: AblationVariant,
    images: &[&LabeledImage],
    victims: &VictimWeights,
    target: &str,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>> {
    let opts = cfg.options(variant);
    images
        .par_iter()
        .map(|li| {
            let out = match patch {
                Some(p) => record(li, &composite_pixels(&li.image, p, &li.plate, &opts)?, victims, target),
                None => record(li, &li.image, victims, target),
            };
            out.map_err(|e| e.with_item(&li.id))
        })
        .collect()
}

/// Records of the unmodified images.
pub fn control_records(dataset: &Dataset, victims: &VictimWeights, target: &str) -> Result<Vec<EvalRecord>> {
    let (images, _) = usable(dataset, victims, target);
    run_condition(None, AblationVariant::Full, &images, victims, target, &EvalConfig::default())
}

pub fn summarize(
    variant: Option<AblationVariant>,
    target: &str,
    records: &[EvalRecord],
    control: &[EvalRecord],
    excluded: Vec<Exclusion>,
) -> Result<EvalSummary> {
    if records.len() != control.len() || records.iter().zip(control).any(|(a, c)| a.id != c.id) {
        return Err(Error::Argument("attack and control records cover different images".into()));
    }
    let attack_s = ConditionSummary::from_records(records);
    let control_s = ConditionSummary::from_records(control);
    let correct_read_reduction_pct = (control_s.correct_read_rate > 0.0)
        .then(|| 100.0 * (control_s.correct_read_rate - attack_s.correct_read_rate) / control_s.correct_read_rate);
    let ratios: Vec<f64> = records
        .iter()
        .zip(control)
        .filter(|(_, c)| c.confidence > 0.0)
        .map(|(a, c)| (c.confidence - a.confidence) / c.confidence)
        .collect();
    let confidence_reduction_pct = (!ratios.is_empty()).then(|| 100.0 * ratios.iter().sum::<f64>() / ratios.len() as f64);
    Ok(EvalSummary {
        variant,
        target: target.to_string(),
        asr: attack_s.impersonation_rate,
        control_asr: control_s.impersonation_rate,
        control: control_s,
        attack: attack_s,
        correct_read_reduction_pct,
        confidence_reduction_pct,
        confidence_reduction_n: ratios.len(),
        excluded,
    })
}

/// Evaluate against precomputed control records of the same dataset.
pub fn evaluate_with_control(
    patch: Option<&Tensor<f32>>,
    variant: AblationVariant,
    dataset: &Dataset,
    victims: &VictimWeights,
    target: &str,
    cfg: &EvalConfig,
    control: &[EvalRecord],
) -> Result<EvalReport> {
    let (images, excluded) = usable(dataset, victims, target);
    if images.is_empty() {
        return Err(Error::Argument(format!("no usable evaluation images ({} excluded)", excluded.len())));
    }
    let records = run_condition(patch, variant, &images, victims, target, cfg)?;
    let summary = summarize(patch.map(|_| variant), target, &records, control, excluded)?;
    Ok(EvalReport { records, control_records: control.to_vec(), summary })
}

/// Evaluate patch pixels (or the control when absent) on every usable image.
pub fn evaluate(
    patch: Option<&Tensor<f32>>,
    variant: AblationVariant,
    dataset: &Dataset,
    victims: &VictimWeights,
    target: &str,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let control = control_records(dataset, victims, target)?;
    evaluate_with_control(patch, variant, dataset, victims, target, cfg, &control)
}

const CSV_HEADER: [&str; 9] = ["id", "d", "theta", "height", "category", "C_D", "ED_T", "ED_I", "decoded"];

pub fn records_to_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let p = r.pose.as_ref();
        w.write_record([
            r.id.clone(),
            opt(p.map(|p| p.distance_m)),
            opt(p.map(|p| p.angle_deg)),
            opt(p.and_then(|p| p.height_m)),
            r.category.to_string(),
            r.confidence.to_string(),
            r.ed_t.to_string(),
            r.ed_i.to_string(),
            r.decoded.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.to_string()))
}

pub fn records_from_csv(bytes: &[u8]) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Csv(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::Csv(e.to_string()))?;
        let ctx = |what: &str| Error::Csv(format!("row {}: bad {what}", line + 1));
        let num = |i: usize, what: &str| -> Result<Option<f64>> {
            let s = &row[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| ctx(what))
            }
        };
        let (d, theta, height) = (num(1, "d")?, num(2, "theta")?, num(3, "height")?);
        let pose = match (d, theta) {
            (Some(d), Some(t)) => Some(CameraPose { distance_m: d, angle_deg: t, height_m: height }),
            (None, None) if height.is_none() => None,
            _ => return Err(ctx("pose: d and theta must both be present or both absent")),
        };
        out.push(EvalRecord {
            id: row[0].to_string(),
            pose,
            category: row[4].parse()?,
            confidence: num(5, "C_D")?.ok_or_else(|| ctx("C_D"))?,
            ed_t: row[6].parse().map_err(|_| ctx("ED_T"))?,
            ed_i: row[7].parse().map_err(|_| ctx("ED_I"))?,
            decoded: row[8].to_string(),
        });
    }
    Ok(out)
}

/// One variant's training and evaluation outcome.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub train_config: TrainConfig,
    pub loss_config: LossConfig,
    pub summary: Option<EvalSummary>,
    pub error: Option<String>,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: Option<StopReason>,
    pub tv_final: Option<f64>,
    pub tv_best: Option<f64>,
    #[serde(skip)]
    pub best_patch: Option<Patch>,
    #[serde(skip)]
    pub final_patch: Option<Patch>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub target: String,
    pub control: ConditionSummary,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Comparison table, one row per variant.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        w.write_record([
            "variant",
            "correct_read_rate",
            "correct_read_reduction_pct",
            "asr",
            "confidence_reduction_pct",
            "incorrect_read_rate",
            "failed_detection_rate",
            "mean_ed_t",
            "mean_ed_i",
            "epochs",
            "best_epoch",
            "tv_final",
            "error",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let c = &self.control;
        w.write_record([
            "control".to_string(),
            c.correct_read_rate.to_string(),
            "0".into(),
            c.impersonation_rate.to_string(),
            "0".into(),
            c.incorrect_read_rate.to_string(),
            c.failed_detection_rate.to_string(),
            c.mean_ed_t.to_string(),
            c.mean_ed_i.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let s = r.summary.as_ref();
            let a = s.map(|s| &s.attack);
            w.write_record([
                r.variant.as_str().to_string(),
                opt(a.map(|a| a.correct_read_rate)),
                opt(s.and_then(|s| s.correct_read_reduction_pct)),
                opt(s.map(|s| s.asr)),
                opt(s.and_then(|s| s.confidence_reduction_pct)),
                opt(a.map(|a| a.incorrect_read_rate)),
                opt(a.map(|a| a.failed_detection_rate)),
                opt(a.map(|a| a.mean_ed_t)),
                opt(a.map(|a| a.mean_ed_i)),
                r.curve.len().to_string(),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
                opt(r.tv_final),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Csv(e.to_string()))
    }
}

/// Data shared by every ablation variant.
pub struct AblationInputs<'a> {
    pub train: &'a [LabeledImage],
    pub val: &'a [LabeledImage],
    pub test: &'a Dataset,
    pub victims: &'a VictimWeights,
    pub target: &'a TargetSpec,
}

/// Train and evaluate each variant with the same seeds and a shared control.
/// A failing variant records its error and the others still run.
pub fn run_ablation(
    inputs: &AblationInputs,
    base: &TrainConfig,
    loss: &LossConfig,
    eval: &EvalConfig,
    variants: &[AblationVariant],
) -> Result<AblationReport> {
    let target = inputs.target.text.as_str();
    let control = control_records(inputs.test, inputs.victims, target)?;
    let mut rows = Vec::new();
    for &variant in variants {
        let (cfg, loss_v) = variant.configure(base, loss);
        log::info!("ablation variant {}", variant.as_str());
        let mut row = AblationRow {
            variant,
            train_config: cfg.clone(),
            loss_config: loss_v,
            summary: None,
            error: None,
            curve: Vec::new(),
            best_epoch: None,
            stop: None,
            tv_final: None,
            tv_best: None,
            best_patch: None,
            final_patch: None,
        };
        let outcome = train(&cfg, inputs.train, inputs.val, inputs.victims, inputs.target, &loss_v).and_then(|r| {
            row.curve = r.curve.clone();
            row.best_epoch = Some(r.best_epoch);
            row.stop = Some(r.stop);
            row.tv_final = Some(patch_tv(&r.final_patch)?);
            row.tv_best = Some(patch_tv(&r.best_patch)?);
            let report =
                evaluate_with_control(Some(&r.best_patch.pixels()), variant, inputs.test, inputs.victims, target, eval, &control)?;
            row.best_patch = Some(r.best_patch);
            row.final_patch = Some(r.final_patch);
            Ok(report.summary)
        });
        match outcome {
            Ok(s) => row.summary = Some(s),
            Err(e) => {
                log::warn!("ablation variant {} failed: {e}", variant.as_str());
                row.error = Some(e.to_string());
            }
        }
        rows.push(row);
    }
    Ok(AblationReport { target: target.to_string(), control: ConditionSummary::from_records(&control), rows })
}
