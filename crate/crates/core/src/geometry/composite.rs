use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::homography::homography_from_corners;
use super::quad::{scale_quad, Quad};
use super::warp::{rim_mask, warp_map};
use crate::diff::{Real, Tensor, Var};
use crate::error::{Error, Result};

pub const RHO_MAX: f64 = 0.2;

/// How the patch is laid onto the image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compositing {
    /// Projectively warped onto the rim quad.
    #[default]
    Homography,
    /// Stretched over the rim's bounding box with the plate's bounding box cut out.
    Rectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeOptions {
    pub rim_scale: f64,
    pub rho: f64,
    /// Multiply the patch by `rho` itself instead of by `1 − rho`.
    pub literal_eq4: bool,
    pub mode: Compositing,
}

impl CompositeOptions {
    pub fn new(rim_scale: f64, rho: f64) -> Self {
        Self { rim_scale, rho, literal_eq4: false, mode: Compositing::Homography }
    }

    pub fn brightness(&self) -> f64 {
        if self.literal_eq4 {
            self.rho
        } else {
            1.0 - self.rho
        }
    }
}

pub struct CompositeResult<'t, T: Real> {
    pub image: Var<'t, T>,
    /// Final `1×H×W` mask.
    pub mask: Tensor<T>,
    pub rim: Quad,
}

/// `I′ = clamp(I ⊙ (1 − M) + β·P′ ⊙ M, 0, 1)`, differentiable in the patch.
pub fn composite<'t, T: Real>(
    image: &Tensor<T>,
    patch: Var<'t, T>,
    plate: &Quad,
    opts: &CompositeOptions,
) -> Result<CompositeResult<'t, T>> {
    if !(0.0..=RHO_MAX).contains(&opts.rho) {
        return Err(Error::Argument(format!("rho must lie in [0, {RHO_MAX}], got {}", opts.rho)));
    }
    let (ishape, pshape) = (image.shape(), patch.shape());
    if ishape.len() != 3 || pshape.len() != 3 || ishape[0] != pshape[0] {
        return Err(Error::Shape(format!("image {ishape:?} and patch {pshape:?} must be C×H×W with equal C")));
    }
    let (c, ih, iw) = (ishape[0], ishape[1], ishape[2]);
    let (ph, pw) = (pshape[1], pshape[2]);

    let rim = scale_quad(plate, opts.rim_scale)?;
    let (outer, inner) = match opts.mode {
        Compositing::Homography => (rim, *plate),
        Compositing::Rectangular => (Quad::from_box(&rim.bounding_box()), Quad::from_box(&plate.bounding_box())),
    };
    let mask = rim_mask::<T>(&inner, &outer, ph, pw, ih, iw)?;
    let m_rim = homography_from_corners(&Quad::canonical(ph, pw), &outer)?;
    let warped = patch.sample(Rc::new(warp_map(&m_rim, ph, pw, ih, iw)?))?;

    let beta = T::from_f64(opts.brightness());
    let plane = ih * iw;
    let m = mask.data();
    let keep = Tensor::from_fn(vec![c, ih, iw], |i| image.data()[i] * (T::one() - m[i % plane]));
    let gain = Tensor::from_fn(vec![c, ih, iw], |i| beta * m[i % plane]);

    let tape = patch.tape();
    let out = tape.constant(keep).add(&warped.mul(&tape.constant(gain))?)?.clamp(T::zero(), T::one());
    Ok(CompositeResult { image: out, mask, rim: outer })
}

/// Non-differentiable composite on plain tensors.
pub fn composite_pixels<T: Real>(image: &Tensor<T>, patch: &Tensor<T>, plate: &Quad, opts: &CompositeOptions) -> Result<Tensor<T>> {
    let tape = crate::diff::Tape::new();
    let p = tape.constant(patch.clone());
    let r = composite(image, p, plate, opts)?;
    let out = r.image.value();
    Ok((*out).clone())
}
