use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Gradient of a scalar-valued function with respect to its input.
pub fn gradient<T, F>(loss_fn: F, params: &Tensor<T>) -> Result<Tensor<T>>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    value_and_gradient(loss_fn, params).map(|(_, g)| g)
}

pub fn value_and_gradient<T, F>(loss_fn: F, params: &Tensor<T>) -> Result<(T, Tensor<T>)>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let x = tape.param(params.clone());
    let loss = loss_fn(&tape, x)?;
    let grads = tape.backward(loss)?;
    Ok((loss.item(), grads.wrt(x)))
}

/// Forward value only, with the input held constant.
pub fn evaluate<T, F>(loss_fn: &F, params: &Tensor<T>) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let x = tape.constant(params.clone());
    let out = loss_fn(&tape, x)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!("loss must be scalar, got {:?}", out.shape())));
    }
    Ok(out.item())
}

/// Compare the analytic gradient against central differences at `n_coords`
/// coordinates drawn without replacement (seeded). Returns the worst relative
/// error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &Tensor<f64>, step: f64, n_coords: usize, seed: u64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {step}")));
    }
    if n_coords > params.numel() {
        return Err(Error::Argument(format!(
            "{n_coords} coordinates requested from {} parameters",
            params.numel()
        )));
    }
    let analytic = gradient(&loss_fn, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = rand::seq::index::sample(&mut rng, params.numel(), n_coords).into_vec();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in coords {
        let x0 = params.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = evaluate(&loss_fn, &probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = evaluate(&loss_fn, &probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
