use std::rc::Rc;

use super::homography::Homography;
use super::quad::Quad;
use crate::diff::{Real, SampleMap, Tensor, Var};
use crate::error::{Error, Result};

/// Resampling plan for pushing a `src_h×src_w` raster through `h`.
///
/// Output pixel centre `(x+½, y+½)` is pulled back through `h⁻¹` and sampled
/// bilinearly; taps outside the source read zero.
pub fn warp_map<T: Real>(h: &Homography, src_h: usize, src_w: usize, out_h: usize, out_w: usize) -> Result<SampleMap<T>> {
    let inv = h.inverse()?;
    Ok(SampleMap::bilinear_zeros(src_h, src_w, out_h, out_w, |x, y| {
        inv.apply([x as f64 + 0.5, y as f64 + 0.5]).map(|[u, v]| (u - 0.5, v - 0.5))
    }))
}

/// Differentiable perspective warp of a `C×h×w` patch onto a `C×out_h×out_w` canvas.
pub fn warp_perspective<'t, T: Real>(patch: Var<'t, T>, h: &Homography, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
    let shape = patch.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("warp expects C×h×w, got {shape:?}")));
    }
    let map = warp_map(h, shape[1], shape[2], out_h, out_w)?;
    patch.sample(Rc::new(map))
}

/// Warp of an all-ones `src_h×src_w` raster, computed per axis so that fully
/// covered pixels are exactly 1.
pub(crate) fn coverage(h: &Homography, src_h: usize, src_w: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    let inv = h.inverse()?;
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            if let Some([u, v]) = inv.apply([x as f64 + 0.5, y as f64 + 0.5]) {
                out[y * out_w + x] = axis_weight(u - 0.5, src_w) * axis_weight(v - 0.5, src_h);
            }
        }
    }
    Ok(out)
}

fn axis_weight(u: f64, n: usize) -> f64 {
    if !u.is_finite() || u <= -1.0 || u >= n as f64 {
        return 0.0;
    }
    let u0 = u.floor();
    let f = u - u0;
    let inside = |i: f64| i >= 0.0 && i <= (n - 1) as f64;
    match (inside(u0), inside(u0 + 1.0)) {
        (true, true) => 1.0,
        (true, false) => 1.0 - f,
        (false, true) => f,
        (false, false) => 0.0,
    }
}

/// `clamp(warp(1, M_rim) − warp(1, M_plate), 0, 1)` over an `out_h×out_w` canvas,
/// where `M_q` maps the canonical `patch_h×patch_w` corners onto quad `q`.
pub fn rim_mask<T: Real>(
    plate: &Quad,
    rim: &Quad,
    patch_h: usize,
    patch_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let canon = Quad::canonical(patch_h, patch_w);
    let m_rim = super::homography_from_corners(&canon, rim)?;
    let m_plate = super::homography_from_corners(&canon, plate)?;
    let outer = coverage(&m_rim, patch_h, patch_w, out_h, out_w)?;
    let inner = coverage(&m_plate, patch_h, patch_w, out_h, out_w)?;
    let data = outer.iter().zip(&inner).map(|(a, b)| T::from_f64((a - b).clamp(0.0, 1.0))).collect();
    Tensor::new(vec![1, out_h, out_w], data)
}
