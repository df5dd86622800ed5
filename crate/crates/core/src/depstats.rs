//! Distance correlation between evaluation metrics and camera geometry, with
//! a permutation null, its quantile noise floor and the normalized ratio.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::{EvalRecord, Outcome, FAILED_EDIT_DISTANCE};

pub const MIN_SAMPLE: usize = 4;

/// Paired observations: metric values `x`, camera parameter values `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Argument(format!("sample lengths differ: {} vs {}", x.len(), y.len())));
        }
        if x.len() < MIN_SAMPLE {
            return Err(Error::SampleSize { need: MIN_SAMPLE, got: x.len() });
        }
        if !x.iter().chain(&y).all(|v| v.is_finite()) {
            return Err(Error::Argument("sample contains non-finite values".into()));
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Double-centred distance matrix, row-major `n×n`.
fn centred(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut d: Vec<f64> = (0..n * n).map(|k| (v[k / n] - v[k % n]).abs()).collect();
    let row: Vec<f64> = d.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] += grand - row[i] - row[j];
        }
    }
    d
}

fn mean_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / a.len() as f64
}

/// Sample state reused across permutations of `y`.
struct Centred {
    n: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    /// `sqrt(dVar(x)·dVar(y))`, or 0 when either is degenerate.
    norm: f64,
}

impl Centred {
    fn new(s: &Sample) -> Self {
        let (a, b) = (centred(&s.x), centred(&s.y));
        let (vx, vy) = (mean_product(&a, &a), mean_product(&b, &b));
        // Constant inputs leave only rounding noise in the centred matrix.
        let scale = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        let degenerate = |var: f64, v: &[f64]| var <= (1e-12 * scale(v)).powi(2);
        let norm = if degenerate(vx, &s.x) || degenerate(vy, &s.y) { 0.0 } else { (vx * vy).sqrt() };
        Self { n: s.len(), a, b, norm }
    }

    fn dcor_with(&self, perm: Option<&[usize]>) -> f64 {
        if self.norm == 0.0 {
            return 0.0;
        }
        let n = self.n;
        let cov = match perm {
            None => mean_product(&self.a, &self.b),
            Some(p) => {
                let mut s = 0.0;
                for i in 0..n {
                    let (ar, br) = (&self.a[i * n..(i + 1) * n], &self.b[p[i] * n..(p[i] + 1) * n]);
                    s += ar.iter().zip(p).map(|(x, &pj)| x * br[pj]).sum::<f64>();
                }
                s / (n * n) as f64
            }
        };
        (cov.max(0.0) / self.norm).sqrt().min(1.0)
    }
}

pub fn distance_correlation(s: &Sample) -> f64 {
    Centred::new(s).dcor_with(None)
}

/// dCor of `x` against `n_perm` seeded shuffles of `y`, sorted ascending.
pub fn permutation_null(s: &Sample, n_perm: usize, seed: u64) -> Vec<f64> {
    let c = Centred::new(s);
    let mut null: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut p: Vec<usize> = (0..c.n).collect();
            p.shuffle(&mut rng);
            c.dcor_with(Some(&p))
        })
        .collect();
    null.sort_by(f64::total_cmp);
    null
}

/// Empirical `alpha`-quantile of a sorted sample, interpolating at rank `alpha·(m−1)`.
pub fn noise_floor(null: &[f64], alpha: f64) -> Result<f64> {
    if null.is_empty() {
        return Err(Error::Argument("noise floor of an empty null distribution".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Argument(format!("quantile level {alpha} outside (0, 1]")));
    }
    if null.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("null distribution must be sorted ascending".into()));
    }
    let r = alpha * (null.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = (lo + 1).min(null.len() - 1);
    let frac = r - lo as f64;
    Ok(null[lo] + frac * (null[hi] - null[lo]))
}

pub fn dependence_ratio(dcor: f64, delta_alpha: f64) -> Result<f64> {
    if !(delta_alpha > 0.0) {
        return Err(Error::Argument(format!("noise floor must be positive, got {delta_alpha}")));
    }
    Ok(dcor / delta_alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "C_D")]
    Confidence,
    #[serde(rename = "ED_T")]
    EditTruth,
    #[serde(rename = "ED_I")]
    EditTarget,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Confidence, Metric::EditTruth, Metric::EditTarget];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Confidence => "C_D",
            Metric::EditTruth => "ED_T",
            Metric::EditTarget => "ED_I",
        }
    }

    /// Metric value with the failed-detection fill applied.
    pub fn value(self, r: &EvalRecord) -> f64 {
        let failed = r.category == Outcome::FailedDetection;
        match self {
            Metric::Confidence if failed => 0.0,
            Metric::Confidence => r.confidence,
            _ if failed => FAILED_EDIT_DISTANCE as f64,
            Metric::EditTruth => r.ed_t as f64,
            Metric::EditTarget => r.ed_i as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Parameter {
    #[serde(rename = "d")]
    Distance,
    #[serde(rename = "theta")]
    Angle,
}

impl Parameter {
    pub const ALL: [Parameter; 2] = [Parameter::Distance, Parameter::Angle];

    pub fn as_str(self) -> &'static str {
        match self {
            Parameter::Distance => "d",
            Parameter::Angle => "theta",
        }
    }

    pub fn value(self, r: &EvalRecord) -> Option<f64> {
        let p = r.pose.as_ref()?;
        let v = match self {
            Parameter::Distance => p.distance_m,
            Parameter::Angle => p.angle_deg,
        };
        v.is_finite().then_some(v)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Samples per (metric, parameter) pair; parameters with too few usable
/// records are absent and listed in `skipped`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<(Metric, Parameter, Sample)>,
    /// Records lacking each parameter.
    pub missing: Vec<(Parameter, usize)>,
    pub skipped: Vec<Parameter>,
}

pub fn build_samples(records: &[EvalRecord]) -> Result<SampleSet> {
    let mut samples = Vec::new();
    let mut missing = Vec::new();
    let mut skipped = Vec::new();
    let mut best = 0;
    for p in Parameter::ALL {
        let usable: Vec<(&EvalRecord, f64)> = records.iter().filter_map(|r| p.value(r).map(|v| (r, v))).collect();
        missing.push((p, records.len() - usable.len()));
        best = best.max(usable.len());
        if usable.len() < MIN_SAMPLE {
            skipped.push(p);
            continue;
        }
        for m in Metric::ALL {
            let x = usable.iter().map(|(r, _)| m.value(r)).collect();
            let y = usable.iter().map(|(_, v)| *v).collect();
            samples.push((m, p, Sample::new(x, y)?));
        }
    }
    if samples.is_empty() {
        return Err(Error::SampleSize { need: MIN_SAMPLE, got: best });
    }
    samples.sort_by_key(|(m, p, _)| (*p, *m));
    Ok(SampleSet { samples, missing, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub n_perm: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self { n_perm: 10_000, alpha: 0.99, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceRow {
    pub metric: Metric,
    pub parameter: Parameter,
    pub n: usize,
    pub dcor: f64,
    pub delta_alpha: f64,
    /// Absent when the noise floor is zero (degenerate sample).
    pub r_alpha: Option<f64>,
    pub d_dcor: Option<f64>,
    pub d_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub config: StatsConfig,
    pub rows: Vec<DependenceRow>,
    pub missing: Vec<(Parameter, usize)>,
    pub skipped: Vec<Parameter>,
}

fn pair_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn analyze(records: &[EvalRecord], cfg: &StatsConfig) -> Result<DependenceReport> {
    if cfg.n_perm == 0 {
        return Err(Error::Argument("at least one permutation is required".into()));
    }
    let set = build_samples(records)?;
    let mut rows = Vec::new();
    for (k, (metric, parameter, s)) in set.samples.iter().enumerate() {
        let dcor = distance_correlation(s);
        let null = permutation_null(s, cfg.n_perm, pair_seed(cfg.seed, k));
        let delta_alpha = noise_floor(&null, cfg.alpha)?;
        let r_alpha = dependence_ratio(dcor, delta_alpha).ok();
        rows.push(DependenceRow {
            metric: *metric,
            parameter: *parameter,
            n: s.len(),
            dcor,
            delta_alpha,
            r_alpha,
            d_dcor: None,
            d_r: None,
        });
    }
    Ok(DependenceReport { config: *cfg, rows, missing: set.missing, skipped: set.skipped })
}

/// Attack minus control for every pair; both reports must cover the same pairs.
pub fn dependence_deltas(attack: &DependenceReport, control: &DependenceReport) -> Result<DependenceReport> {
    let key = |r: &DependenceRow| (r.metric, r.parameter);
    let mut a: Vec<_> = attack.rows.iter().map(key).collect();
    let mut c: Vec<_> = control.rows.iter().map(key).collect();
    a.sort();
    c.sort();
    if a != c {
        return Err(Error::Argument(format!("reports cover different pairs: {a:?} vs {c:?}")));
    }
    let mut out = attack.clone();
    for row in &mut out.rows {
        let ctl = control.rows.iter().find(|r| key(r) == key(row)).expect("pair sets match");
        row.d_dcor = Some(row.dcor - ctl.dcor);
        row.d_r = match (row.r_alpha, ctl.r_alpha) {
            (Some(x), Some(y)) => Some(x - y),
            _ => None,
        };
    }
    Ok(out)
}

impl DependenceReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let deltas = self.rows.iter().any(|r| r.d_dcor.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        let mut header = vec!["X", "Y", "dCor", "delta_alpha", "R_alpha"];
        if deltas {
            header.extend(["d_dcor", "d_R"]);
        }
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.metric.to_string(),
                r.parameter.to_string(),
                r.dcor.to_string(),
                r.delta_alpha.to_string(),
                opt(r.r_alpha),
            ];
            if deltas {
                rec.extend([opt(r.d_dcor), opt(r.d_r)]);
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Csv(e.to_string()))
    }
}
