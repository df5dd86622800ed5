use platerim_core::diff::{finite_diff_check, Tape, Tensor};
use platerim_core::geometry::Aabb;
use platerim_core::losses::{
    compound_loss, detection_loss, focal_loss, iou, ocr_loss, smooth_targets, tv_loss, LossConfig, TargetSpec,
};
use platerim_core::victims::Alphabet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn tv_brute(p: &Tensor<f64>) -> f64 {
    let s = p.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let at = |ch: usize, y: usize, x: usize| p.data()[(ch * h + y) * w + x];
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    sum += (at(ch, y, x + 1) - at(ch, y, x)).powi(2);
                    n += 1;
                }
                if y + 1 < h {
                    sum += (at(ch, y + 1, x) - at(ch, y, x)).powi(2);
                    n += 1;
                }
            }
        }
    }
    sum / n as f64
}

fn tv_of(p: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    tv_loss(tape.constant(p.clone())).unwrap().item()
}

/// Per-position reference in plain f64 arithmetic.
fn focal_reference(probs: &[Vec<f64>], target: &[usize], cfg: &LossConfig) -> f64 {
    let v = probs[0].len() as f64;
    probs
        .iter()
        .zip(target)
        .map(|(row, &t)| {
            let pt: f64 = row
                .iter()
                .enumerate()
                .map(|(j, o)| {
                    let ts = if j == t { 1.0 - cfg.epsilon + cfg.epsilon / v } else { cfg.epsilon / v };
                    ts * o
                })
                .sum();
            -cfg.alpha * (1.0 - pt).powf(cfg.gamma) * (pt + cfg.delta).ln()
        })
        .sum()
}

fn focal_of(probs: &Tensor<f64>, target: &TargetSpec, cfg: &LossConfig) -> f64 {
    let tape = Tape::new();
    focal_loss(tape.constant(probs.clone()), &target.smoothed(cfg.epsilon), cfg).unwrap().item()
}

fn random_probs(l: usize, v: usize, seed: u64) -> Tensor<f64> {
    let raw = random(&[l, v], 0.01, 1.0, seed);
    let mut out = raw.clone();
    for r in 0..l {
        let s: f64 = raw.data()[r * v..(r + 1) * v].iter().sum();
        for j in 0..v {
            out.data_mut()[r * v + j] = raw.data()[r * v + j] / s;
        }
    }
    out
}

#[test]
fn tv_matches_brute_force_on_random_patches() {
    for seed in 0..100 {
        let p = random(&[3, 8, 8], 0.0, 1.0, seed);
        assert!((tv_of(&p) - tv_brute(&p)).abs() < 1e-6, "seed {seed}");
    }
}

#[test]
fn tv_checkerboard_and_ramp() {
    let board = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!((tv_of(&board) - 1.0).abs() < 1e-12);
    assert!((tv_brute(&board) - 1.0).abs() < 1e-12);
    let ramp = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
    assert!((tv_of(&ramp) - 1.0 / 9.0).abs() < 1e-12);
}

#[test]
fn tv_zero_for_constant_channels_and_single_pixel() {
    let mut p = Tensor::<f64>::zeros(vec![3, 5, 6]);
    for (i, v) in p.data_mut().iter_mut().enumerate() {
        *v = (i / 30) as f64 * 0.3;
    }
    assert_eq!(tv_of(&p), 0.0);
    assert_eq!(tv_of(&Tensor::<f64>::ones(vec![2, 1, 1])), 0.0);
    let tape = Tape::new();
    assert!(tv_loss(tape.constant(Tensor::<f64>::ones(vec![4, 4]))).is_err());
}

#[test]
fn tv_gradient_passes_at_two_step_sizes() {
    let p = random(&[3, 8, 8], 0.0, 1.0, 11);
    let coarse = finite_diff_check(|_, x| tv_loss(x), &p, 1e-3, 100, 1).unwrap();
    let fine = finite_diff_check(|_, x| tv_loss(x), &p, 1e-5, 100, 1).unwrap();
    assert!(fine < 1e-4, "{fine:e}");
    assert!(coarse < 1e-4, "{coarse:e}");
}

#[test]
fn focal_uniform_probabilities() {
    let alphabet = Alphabet::default();
    let cfg = LossConfig::default();
    let v = alphabet.vocab();
    assert_eq!(v, 37);
    let target = TargetSpec::new("AB12CD3", &alphabet, 7).unwrap();
    let probs = Tensor::from_fn(vec![7, v], |_| 1.0 / v as f64);
    let per = focal_of(&probs, &target, &cfg) / 7.0;
    let pt = 1.0 / 37.0;
    let expected = -0.25 * (1.0 - pt) * (1.0 - pt) * (pt + 1e-8f64).ln();
    assert!((per - expected).abs() < 1e-9);
    assert!((per - 0.8546).abs() < 5e-5, "{per}");
}

#[test]
fn focal_matches_reference_on_random_inputs() {
    let alphabet = Alphabet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, gamma) in [0.0, 1.0, 2.0, 3.5].into_iter().cycle().take(40).enumerate() {
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        let text: String = (0..7).map(|_| alphabet.symbols()[rng.gen_range(0..36)]).collect();
        let target = TargetSpec::new(&text, &alphabet, 7).unwrap();
        let idx: Vec<usize> = text.chars().map(|c| alphabet.index(c).unwrap()).collect();
        let probs = random_probs(7, 37, k as u64);
        let rows: Vec<Vec<f64>> = probs.data().chunks(37).map(|r| r.to_vec()).collect();
        let got = focal_of(&probs, &target, &cfg);
        let want = focal_reference(&rows, &idx, &cfg);
        assert!((got - want).abs() < 1e-6, "gamma {gamma}: {got} vs {want}");
    }
}

#[test]
fn focal_decreases_in_pt() {
    let cfg = LossConfig { epsilon: 0.0, ..LossConfig::default() };
    let alphabet = Alphabet::default();
    let target = TargetSpec::new("A", &alphabet, 1).unwrap();
    let mut prev = f64::INFINITY;
    for k in 1..=100 {
        let pt = k as f64 / 100.0;
        let mut row = vec![(1.0 - pt) / 36.0; 37];
        row[0] = pt;
        let probs = Tensor::new(vec![1, 37], row).unwrap();
        let l = focal_of(&probs, &target, &cfg);
        assert!(l >= 0.0);
        assert!(l < prev || (k == 100 && l <= prev), "pt {pt}");
        prev = l;
    }
}

#[test]
fn focal_gradient_passes_finite_differences() {
    let alphabet = Alphabet::default();
    let cfg = LossConfig::default();
    let target = TargetSpec::new("XY7", &alphabet, 3).unwrap();
    let ts = target.smoothed::<f64>(cfg.epsilon);
    let probs = random_probs(3, 37, 9);
    let err = finite_diff_check(|_, x| focal_loss(x, &ts, &cfg), &probs, 1e-6, 100, 2).unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn focal_shape_mismatch_is_error() {
    let alphabet = Alphabet::default();
    let cfg = LossConfig::default();
    let target = TargetSpec::new("XY7", &alphabet, 3).unwrap();
    let tape = Tape::new();
    let probs = tape.constant(Tensor::<f64>::ones(vec![4, 37]));
    assert!(focal_loss(probs, &target.smoothed(cfg.epsilon), &cfg).is_err());
}

#[test]
fn smoothing_examples() {
    let alphabet = Alphabet::default();
    let t = TargetSpec::new("K9", &alphabet, 7).unwrap();
    assert_eq!(smooth_targets(&t.one_hot, 0.0), t.one_hot);
    let s = smooth_targets(&t.one_hot, 0.01);
    let k = alphabet.index('K').unwrap();
    assert!((s.data()[k] - 0.990270).abs() < 1e-6);
    for row in s.data().chunks(37) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Short strings pad the remaining rows.
    let pad = alphabet.pad();
    for r in 2..7 {
        assert_eq!(t.one_hot.data()[r * 37 + pad], 1.0);
    }
}

fn det_value(b: [f64; 4], conf: f64, a: &Aabb) -> f64 {
    let tape = Tape::new();
    let bbox = tape.constant(Tensor::new(vec![4], b.to_vec()).unwrap());
    let c = tape.constant(Tensor::scalar(conf));
    detection_loss(bbox, c, a, &LossConfig::default()).unwrap().item()
}

#[test]
fn detection_endpoints() {
    let a = Aabb::new(10.0, 20.0, 50.0, 40.0);
    assert!((det_value(a.to_array(), 1.0, &a) + 1.0).abs() < 1e-6);
    assert_eq!(det_value([60.0, 0.0, 70.0, 10.0], 0.3, &a), 0.0);
    assert!((det_value(a.to_array(), 0.5, &a) + 2.0).abs() < 1e-6);
    let err = {
        let tape = Tape::new();
        let bbox = tape.constant(Tensor::new(vec![4], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let c = tape.constant(Tensor::scalar(1.0));
        detection_loss(bbox, c, &Aabb::new(3.0, 3.0, 3.0, 9.0), &LossConfig::default()).is_err()
    };
    assert!(err);
}

#[test]
fn iou_matches_box_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut corner = || {
            let (x0, y0) = (rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0));
            Aabb::new(x0, y0, x0 + rng.gen_range(1.0..40.0), y0 + rng.gen_range(1.0..40.0))
        };
        let (a, b) = (corner(), corner());
        let tape = Tape::new();
        let bv = tape.constant(Tensor::new(vec![4], b.to_array().to_vec()).unwrap());
        let got = iou(bv, &a).unwrap().item();
        assert!((got - b.iou(&a)).abs() < 1e-12);
    }
}

#[test]
fn detection_gradient_passes_finite_differences() {
    let a = Aabb::new(10.0, 20.0, 50.0, 40.0);
    let cfg = LossConfig::default();
    // Box partly overlapping A, then the confidence.
    let x = Tensor::new(vec![5], vec![15.0, 12.0, 61.0, 35.0, 0.7]).unwrap();
    let err = finite_diff_check(
        |_, x| {
            let bbox = x.gather(std::rc::Rc::new(vec![0, 1, 2, 3]), vec![4])?;
            detection_loss(bbox, x.at(4)?, &a, &cfg)
        },
        &x,
        1e-5,
        5,
        0,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn ocr_and_compound_examples() {
    let cfg = LossConfig::default();
    let tape = Tape::new();
    let s = |v: f64| tape.scalar(v);
    assert!((ocr_loss(s(3.0), 3.0, &cfg).item() - 1.0).abs() < 1e-6);
    assert_eq!(ocr_loss(s(0.0), 3.0, &cfg).item(), 0.0);
    assert!((ocr_loss(s(6.0), 3.0, &cfg).item() - 2.0).abs() < 1e-6);
    assert!((ocr_loss(s(1e-3), 0.0, &cfg).item() - 1e5).abs() < 1e-3 * 1e5);
    let l = compound_loss(s(-1.0), s(0.6), s(0.1), &cfg).unwrap().item();
    assert!((l - (-0.2 + 0.25)).abs() < 1e-12);
    let no_tv = LossConfig { zeta: 0.0, ..cfg };
    assert_eq!(compound_loss(s(-1.0), s(0.6), s(0.1), &no_tv).unwrap().item(), -0.2);
}

#[test]
fn config_validation() {
    assert!(LossConfig::default().validate().is_ok());
    for bad in [
        LossConfig { delta: 0.0, ..Default::default() },
        LossConfig { epsilon: 1.0, ..Default::default() },
        LossConfig { alpha: 0.0, ..Default::default() },
        LossConfig { gamma: -1.0, ..Default::default() },
        LossConfig { zeta: f64::NAN, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn tv_is_nonnegative(seed in any::<u64>(), c in 1usize..4, h in 1usize..7, w in 1usize..7) {
        let p = random(&[c, h, w], -2.0, 2.0, seed);
        let v = tv_of(&p);
        prop_assert!(v >= 0.0);
        if h * w > 1 {
            prop_assert!((v - tv_brute(&p)).abs() < 1e-9);
        }
    }
}
