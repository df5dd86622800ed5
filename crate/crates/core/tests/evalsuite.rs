mod common;

use platerim_core::dataset::{Dataset, Exclusion};
use platerim_core::diff::Tensor;
use platerim_core::evalsuite::{
    classify_outcome, evaluate, levenshtein, records_from_csv, records_to_csv, run_ablation, summarize, AblationInputs,
    AblationVariant, EvalCompositing, EvalConfig, EvalRecord, Outcome, OutcomeCounts,
};
use platerim_core::geometry::Compositing;
use platerim_core::losses::LossConfig;
use platerim_core::trainer::{make_target, AttackMode, TrainConfig};
use platerim_core::victims::{Alphabet, CameraPose};

use common::{confident_victims, toy_images};

/// Textbook recursion, no tables.
fn lev_reference(a: &[u8], b: &[u8]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = lev_reference(ra, rb) + usize::from(x != y);
            sub.min(lev_reference(ra, b) + 1).min(lev_reference(a, rb) + 1)
        }
    }
}

fn all_strings(max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        frontier = frontier.iter().flat_map(|s| ["a", "b", "c"].map(|c| format!("{s}{c}"))).collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

#[test]
fn levenshtein_exhaustive_small_alphabet() {
    let all = all_strings(4);
    assert_eq!(all.len(), 121);
    for a in &all {
        for b in &all {
            assert_eq!(levenshtein(a, b), lev_reference(a.as_bytes(), b.as_bytes()), "{a:?} {b:?}");
        }
    }
}

#[test]
fn levenshtein_examples() {
    assert_eq!(levenshtein("AB12CD3", "AB12CD3"), 0);
    assert_eq!(levenshtein("", "AB12CD3"), 7);
    assert_eq!(levenshtein("kitten", "sitting"), 3);
}

#[test]
fn outcome_classification() {
    assert_eq!(classify_outcome("ABC", true, "ABC", "ABD").unwrap(), Outcome::CorrectRead);
    assert_eq!(classify_outcome("ABD", true, "ABC", "ABD").unwrap(), Outcome::Impersonation);
    assert_eq!(classify_outcome("XYZ", true, "ABC", "ABD").unwrap(), Outcome::IncorrectRead);
    assert_eq!(classify_outcome("ABC", false, "ABC", "ABD").unwrap(), Outcome::FailedDetection);
    assert!(classify_outcome("ABC", true, "ABC", "ABC").is_err());
    for o in Outcome::ALL {
        assert_eq!(o.to_string().parse::<Outcome>().unwrap(), o);
    }
}

fn rec(id: &str, category: Outcome, confidence: f64) -> EvalRecord {
    EvalRecord {
        id: id.into(),
        pose: Some(CameraPose::new(2.0, 10.0)),
        category,
        confidence,
        ed_t: 0,
        ed_i: 2,
        decoded: String::new(),
    }
}

#[test]
fn summary_metrics_by_hand() {
    let control = vec![
        rec("a", Outcome::CorrectRead, 0.8),
        rec("b", Outcome::CorrectRead, 0.5),
        rec("c", Outcome::IncorrectRead, 0.4),
        rec("d", Outcome::FailedDetection, 0.0),
    ];
    let attack = vec![
        rec("a", Outcome::Impersonation, 0.4),
        rec("b", Outcome::CorrectRead, 0.5),
        rec("c", Outcome::FailedDetection, 0.0),
        rec("d", Outcome::FailedDetection, 0.0),
    ];
    let s = summarize(Some(AblationVariant::Full), "T", &attack, &control, vec![]).unwrap();
    assert_eq!(s.control.correct_read_rate, 0.5);
    assert_eq!(s.attack.correct_read_rate, 0.25);
    assert!((s.correct_read_reduction_pct.unwrap() - 50.0).abs() < 1e-12);
    assert_eq!(s.asr, 0.25);
    // (0.5 + 0 + 1) / 3, the image the control missed excluded.
    assert_eq!(s.confidence_reduction_n, 3);
    assert!((s.confidence_reduction_pct.unwrap() - 50.0).abs() < 1e-12);
    let rates = s.attack.correct_read_rate + s.attack.incorrect_read_rate + s.attack.impersonation_rate + s.attack.failed_detection_rate;
    assert!((rates - 1.0).abs() < 1e-12);

    let s = summarize(None, "T", &control, &control, vec![]).unwrap();
    assert_eq!(s.correct_read_reduction_pct, Some(0.0));
    assert_eq!(s.confidence_reduction_pct, Some(0.0));

    let nothing: Vec<_> = control.iter().map(|r| EvalRecord { category: Outcome::IncorrectRead, ..r.clone() }).collect();
    let s = summarize(None, "T", &nothing, &nothing, vec![]).unwrap();
    assert_eq!(s.correct_read_reduction_pct, None);
    let json = serde_json::to_string(&s).unwrap();
    assert!(json.contains("\"correct_read_reduction_pct\":null"));
    assert!(!json.contains("NaN"));

    assert!(summarize(None, "T", &attack[..2], &control, vec![]).is_err());
}

#[test]
fn csv_round_trip_and_columns() {
    let mut records = vec![rec("a,1", Outcome::CorrectRead, 0.8125), rec("b", Outcome::FailedDetection, 0.0)];
    records[1].pose = None;
    records[1].ed_t = 7;
    records[1].ed_i = 7;
    records[0].pose = Some(CameraPose { distance_m: 2.5, angle_deg: -15.0, height_m: Some(0.25) });
    records[0].decoded = "AB12CD3".into();
    let bytes = records_to_csv(&records).unwrap();
    let text = String::from_utf8(bytes.clone()).unwrap();
    assert!(text.starts_with("id,d,theta,height,category,C_D,ED_T,ED_I,decoded\n"));
    assert!(text.contains("b,,,,failed_detection,0,7,7,"));
    assert_eq!(records_from_csv(&bytes).unwrap(), records);
    assert!(records_from_csv(b"id,d\n1,2\n").is_err());
}

fn setup() -> (platerim_core::victims::VictimWeights, Dataset) {
    (confident_victims(64, 3), Dataset::new(toy_images(10, 64, 21)))
}

#[test]
fn control_against_control() {
    let (victims, data) = setup();
    let r = evaluate(None, AblationVariant::Full, &data, &victims, "ZZ99ZZ9", &EvalConfig::default()).unwrap();
    assert_eq!(r.records, r.control_records);
    assert_eq!(r.summary.asr, r.summary.control_asr);
    assert!(r.summary.variant.is_none());
    for rec in &r.records {
        if rec.category == Outcome::FailedDetection {
            assert_eq!((rec.confidence, rec.ed_t, rec.ed_i), (0.0, 7, 7));
        }
        assert!(rec.ed_t <= 7 && rec.ed_i <= 7);
    }
}

#[test]
fn gray_patch_smoke_and_idempotence() {
    let (victims, mut data) = setup();
    let mut odd = data.images[0].clone();
    odd.id = "wrong-size".into();
    odd.image = Tensor::zeros(vec![3, 32, 32]);
    data.images.push(odd);
    data.excluded.push(Exclusion { id: "unlabeled".into(), reason: "no corners".into() });
    let gray = Tensor::full(vec![3, 16, 32], 0.5f32);
    let cfg = EvalConfig::default();
    let a = evaluate(Some(&gray), AblationVariant::Full, &data, &victims, "ZZ99ZZ9", &cfg).unwrap();
    assert_eq!(a.records.len(), 10);
    assert_eq!(OutcomeCounts::from_records(&a.records).total(), 10);
    let ids: Vec<_> = a.summary.excluded.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, vec!["unlabeled", "wrong-size"]);
    let b = evaluate(Some(&gray), AblationVariant::Full, &data, &victims, "ZZ99ZZ9", &cfg).unwrap();
    assert_eq!(records_to_csv(&a.records).unwrap(), records_to_csv(&b.records).unwrap());
    assert_eq!(serde_json::to_vec(&a.summary).unwrap(), serde_json::to_vec(&b.summary).unwrap());

    let rect = EvalConfig { compositing: EvalCompositing::FollowVariant, ..cfg };
    let c = evaluate(Some(&gray), AblationVariant::NoHomography, &data, &victims, "ZZ99ZZ9", &rect).unwrap();
    assert_eq!(c.records.len(), 10);
}

#[test]
fn target_equal_to_truth_excludes_images() {
    let (victims, data) = setup();
    let r = evaluate(None, AblationVariant::Full, &data, &victims, "AB12CD3", &EvalConfig::default());
    assert!(r.is_err());
}

#[test]
fn variants_configure_training() {
    let base = TrainConfig::default();
    let loss = LossConfig::default();
    let (c, l) = AblationVariant::NoTv.configure(&base, &loss);
    assert_eq!((l.zeta, c.compositing), (0.0, Compositing::Homography));
    let (c, l) = AblationVariant::Neither.configure(&base, &loss);
    assert_eq!((l.zeta, c.compositing), (0.0, Compositing::Rectangular));
    let (c, l) = AblationVariant::NoHomography.configure(&base, &loss);
    assert_eq!((l.zeta, c.compositing), (2.5, Compositing::Rectangular));
    assert_eq!(AblationVariant::Full.configure(&base, &loss), (base, loss));
    for v in AblationVariant::ALL {
        assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
    }
}

#[test]
fn ablation_rows_share_one_control() {
    let victims = confident_victims(64, 3);
    let images = toy_images(14, 64, 22);
    let test = Dataset::new(images[10..].to_vec());
    let target = make_target("AB12CD3", AttackMode::Disrupt, &Alphabet::default(), 7, 5).unwrap();
    let inputs = AblationInputs { train: &images[..8], val: &images[8..10], test: &test, victims: &victims, target: &target };
    let base = TrainConfig { epochs: 2, batch: 4, patch_h: 16, patch_w: 32, ..TrainConfig::default() };
    let report = run_ablation(&inputs, &base, &LossConfig::default(), &EvalConfig::default(), &AblationVariant::ALL).unwrap();
    assert_eq!(report.rows.len(), 4);
    for row in &report.rows {
        assert!(row.error.is_none(), "{:?}", row.error);
        let s = row.summary.as_ref().unwrap();
        assert_eq!(s.control, report.control);
        assert_eq!(row.curve.len(), 2);
    }
    assert_eq!(report.row(AblationVariant::NoTv).unwrap().loss_config.zeta, 0.0);
    let csv = String::from_utf8(report.to_csv().unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("control,"));
    let json = serde_json::to_string(&report).unwrap();
    assert!(!json.contains("NaN"));

    // A failing variant is recorded and the rest still run.
    let bad = TrainConfig { patch_h: 0, ..base };
    let report = run_ablation(&inputs, &bad, &LossConfig::default(), &EvalConfig::default(), &[AblationVariant::Full]).unwrap();
    assert!(report.rows[0].error.is_some());
}
