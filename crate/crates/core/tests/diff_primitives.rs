use std::rc::Rc;

use platerim_core::diff::{concat, finite_diff_check, gradient, SampleMap, Tape, Tensor, Var};
use platerim_core::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Contract the output with a fixed random weighting so every output
/// coordinate contributes a distinct amount.
fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = random(&y.shape(), -1.0, 1.0, seed ^ 0xabcd);
    let w = y.tape().constant(w);
    Ok(y.mul(&w)?.sum())
}

fn check<F>(name: &str, x: &Tensor<f64>, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let n = x.numel().min(100);
    let err = finite_diff_check(f, x, 1e-5, n, 7).unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn elementwise_primitives_pass_finite_differences() {
    let x = random(&[120], 0.2, 1.8, 1);
    let other = random(&[120], 0.5, 1.5, 2);
    check("add", &x, |t, x| project(x.add(&t.constant(other.clone()))?.square()?, 3));
    check("sub", &x, |t, x| project(t.constant(other.clone()).sub(&x)?.square()?, 3));
    check("mul", &x, |t, x| project(x.mul(&t.constant(other.clone()))?.mul(&x)?, 3));
    check("div", &x, |t, x| project(t.constant(other.clone()).div(&x)?, 3));
    check("scalar", &x, |_, x| project(x.mul_scalar(-2.5).add_scalar(0.3).square()?, 3));
    check("powf", &x, |_, x| project(x.powf(2.7), 3));
    check("log", &x, |_, x| project(x.log(), 3));
    check("exp", &x, |_, x| project(x.exp(), 3));
    check("sigmoid", &x, |_, x| project(x.add_scalar(-1.0).mul_scalar(3.0).sigmoid(), 3));
    check("silu", &x, |_, x| project(x.add_scalar(-1.0).mul_scalar(3.0).silu(), 3));
    check("softplus", &x, |_, x| project(x.add_scalar(-1.0).mul_scalar(4.0).softplus(), 3));
    check("mean", &x, |_, x| Ok(x.square()?.mean()));
}

#[test]
fn clamp_and_extrema_pass_away_from_kinks() {
    // Values kept at least 0.05 from the clamp bounds and from each other.
    let x = Tensor::from_fn(vec![100], |i| -1.0 + 0.02 * i as f64 + 0.01);
    let other = Tensor::from_fn(vec![100], |i| if i % 2 == 0 { 5.0 } else { -5.0 });
    check("clamp", &x, |_, x| project(x.clamp(-0.5, 0.5).square()?, 4));
    check("maximum", &x, |t, x| project(x.maximum(&t.constant(other.clone()))?.square()?, 4));
    check("minimum", &x, |t, x| project(x.minimum(&t.constant(other.clone()))?.square()?, 4));
}

#[test]
fn clamp_blocks_gradient_at_and_outside_bounds() {
    let x = Tensor::from_vec(vec![-1.0f64, 0.0, 0.5, 1.0, 2.0]);
    let g = gradient(|_, x| Ok(x.clamp(0.0, 1.0).sum()), &x).unwrap();
    assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn structural_primitives_pass_finite_differences() {
    let x = random(&[6, 20], -1.0, 1.0, 5);
    let w = random(&[20, 5], -1.0, 1.0, 6);
    check("matmul lhs", &x, |t, x| project(x.matmul(&t.constant(w.clone()))?, 8));
    check("matmul rhs", &w, |t, w| project(t.constant(x.clone()).matmul(&w)?.square()?, 8));
    check("transpose", &x, |_, x| project(x.transpose()?.square()?, 8));
    check("row_sum", &x, |_, x| project(x.row_sum()?.square()?, 8));
    check("softmax_rows", &x, |_, x| project(x.mul_scalar(3.0).softmax_rows()?.log(), 8));
    check("reshape", &x, |_, x| project(x.reshape(vec![120])?.exp(), 8));
    let idx = Rc::new((0..60).map(|i| (i * 7) % 120).collect::<Vec<_>>());
    check("gather", &x, |_, x| project(x.gather(idx.clone(), vec![60])?.square()?, 8));
    check("concat", &x, |_, x| {
        let a = x.at(3)?;
        let b = x.sum();
        project(concat(&[a, b, x.at(17)?.exp()])?.square()?, 8)
    });
}

#[test]
fn convolution_passes_finite_differences() {
    let x = random(&[3, 9, 11], -1.0, 1.0, 10);
    let w = random(&[4, 3, 3, 3], -0.5, 0.5, 11);
    let b = random(&[4], -0.5, 0.5, 12);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        check("conv input", &x, |t, x| {
            project(x.conv2d(&t.constant(w.clone()), Some(&t.constant(b.clone())), stride, pad)?.silu(), 13)
        });
        check("conv weight", &w, |t, w| {
            project(t.constant(x.clone()).conv2d(&w, Some(&t.constant(b.clone())), stride, pad)?.silu(), 13)
        });
        check("conv bias", &b, |t, b| {
            project(t.constant(x.clone()).conv2d(&t.constant(w.clone()), Some(&b), stride, pad)?.silu(), 13)
        });
    }
}

#[test]
fn convolution_matches_direct_sum() {
    let x = random(&[2, 5, 6], -1.0, 1.0, 20);
    let w = random(&[3, 2, 3, 3], -1.0, 1.0, 21);
    let tape = Tape::new();
    let y = tape.constant(x.clone()).conv2d(&tape.constant(w.clone()), None, 2, 1).unwrap();
    let y = y.value();
    assert_eq!(y.shape(), &[3, 3, 3]);
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                s += w.data()[((o * 2 + c) * 3 + ky) * 3 + kx]
                                    * x.data()[(c * 5 + iy as usize) * 6 + ix as usize];
                            }
                        }
                    }
                }
                let got = y.data()[(o * 3 + oy) * 3 + ox];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bilinear_sample_passes_finite_differences() {
    let src = random(&[2, 7, 9], 0.0, 1.0, 30);
    let map = Rc::new(SampleMap::bilinear_zeros(7, 9, 10, 12, |x, y| {
        Some((x as f64 * 0.83 - 0.7 + 0.01 * y as f64, y as f64 * 0.71 - 0.4))
    }));
    check("sample", &src, |_, s| project(s.sample(map.clone())?.square()?, 31));
}

#[test]
fn crop_resize_passes_finite_differences_in_image_and_box() {
    let img = random(&[3, 16, 20], 0.0, 1.0, 40);
    let bx = Tensor::from_vec(vec![3.3, 2.7, 15.1, 12.9]);
    check("crop image", &img, |t, i| project(i.crop_resize(&t.constant(bx.clone()), 6, 10)?, 41));
    check("crop box", &bx, |t, b| project(t.constant(img.clone()).crop_resize(&b, 6, 10)?, 41));
}

#[test]
fn linearity_of_gradient() {
    let x = random(&[50], 0.1, 2.0, 50);
    let (a, b) = (1.7, -0.6);
    fn f(x: Var<'_, f64>) -> Result<Var<'_, f64>> {
        Ok(x.log().square()?.sum())
    }
    fn g(x: Var<'_, f64>) -> Result<Var<'_, f64>> {
        Ok(x.sigmoid().mul(&x)?.sum())
    }
    let combined = gradient(|_, x| Ok(f(x)?.mul_scalar(a).add(&g(x)?.mul_scalar(b))?), &x).unwrap();
    let gf = gradient(|_, x| f(x), &x).unwrap();
    let gg = gradient(|_, x| g(x), &x).unwrap();
    for i in 0..50 {
        let want = a * gf.data()[i] + b * gg.data()[i];
        assert!((combined.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let x = random(&[3, 12, 12], 0.0, 1.0, 60).cast::<f32>();
    let w = random(&[5, 3, 3, 3], -0.3, 0.3, 61).cast::<f32>();
    let run = || {
        gradient(
            |t, x| Ok(x.conv2d(&t.constant(w.clone()), None, 2, 1)?.silu().square()?.sum()),
            &x,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn sum_of_squares_gradient(xs in proptest::collection::vec(-100.0f64..100.0, 1..40)) {
        let x = Tensor::from_vec(xs.clone());
        let g = gradient(|_, x| Ok(x.square()?.sum()), &x).unwrap();
        for (gi, xi) in g.data().iter().zip(&xs) {
            prop_assert!((gi - 2.0 * xi).abs() < 1e-9);
        }
    }
}
