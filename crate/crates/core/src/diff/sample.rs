use super::tensor::{Real, Tensor};

/// Fixed bilinear resampling plan: every output pixel reads up to four
/// source pixels with constant weights.
///
/// Source taps that fall outside the source grid carry weight zero, so a
/// preimage outside the source contributes nothing and receives no gradient.
#[derive(Clone, Debug)]
pub struct SampleMap<T> {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(u32, T); 4]>,
}

impl<T: Real> SampleMap<T> {
    /// Build a plan from a per-output-pixel preimage function. `preimage(x, y)`
    /// returns the continuous source coordinate `(u, v)` in pixel-index units
    /// (pixel centres at integers), or `None` when the point is undefined.
    pub fn bilinear_zeros(
        src_h: usize,
        src_w: usize,
        out_h: usize,
        out_w: usize,
        mut preimage: impl FnMut(usize, usize) -> Option<(f64, f64)>,
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                let mut t = [(0u32, T::zero()); 4];
                if let Some((u, v)) = preimage(x, y) {
                    if u.is_finite() && v.is_finite() && u > -1.0 && v > -1.0 {
                        let (u0, v0) = (u.floor(), v.floor());
                        let (fu, fv) = (u - u0, v - v0);
                        let corners = [
                            (u0, v0, (1.0 - fu) * (1.0 - fv)),
                            (u0 + 1.0, v0, fu * (1.0 - fv)),
                            (u0, v0 + 1.0, (1.0 - fu) * fv),
                            (u0 + 1.0, v0 + 1.0, fu * fv),
                        ];
                        for (slot, &(cu, cv, w)) in t.iter_mut().zip(&corners) {
                            if cu >= 0.0 && cv >= 0.0 && (cu as usize) < src_w && (cv as usize) < src_h
                            {
                                *slot = ((cv as usize * src_w + cu as usize) as u32, T::from_f64(w));
                            }
                        }
                    }
                }
                taps.push(t);
            }
        }
        Self { src_h, src_w, out_h, out_w, taps }
    }

    pub fn taps(&self) -> &[[(u32, T); 4]] {
        &self.taps
    }

    /// Apply to a `C×src_h×src_w` buffer, producing `C×out_h×out_w` values.
    pub fn apply(&self, channels: usize, src: &[T]) -> Vec<T> {
        let (sp, op) = (self.src_h * self.src_w, self.out_h * self.out_w);
        let mut out = vec![T::zero(); channels * op];
        for c in 0..channels {
            let s = &src[c * sp..(c + 1) * sp];
            let o = &mut out[c * op..(c + 1) * op];
            for (ov, t) in o.iter_mut().zip(&self.taps) {
                *ov = t[0].1 * s[t[0].0 as usize]
                    + t[1].1 * s[t[1].0 as usize]
                    + t[2].1 * s[t[2].0 as usize]
                    + t[3].1 * s[t[3].0 as usize];
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): scatter output gradients onto the source.
    pub fn apply_transpose(&self, channels: usize, grad_out: &[T], grad_src: &mut [T]) {
        let (sp, op) = (self.src_h * self.src_w, self.out_h * self.out_w);
        for c in 0..channels {
            let g = &grad_out[c * op..(c + 1) * op];
            let s = &mut grad_src[c * sp..(c + 1) * sp];
            for (&gv, t) in g.iter().zip(&self.taps) {
                for &(idx, w) in t {
                    s[idx as usize] += w * gv;
                }
            }
        }
    }

    /// Apply to a plain tensor without recording anything.
    pub fn apply_tensor(&self, src: &Tensor<T>) -> Tensor<T> {
        let c = src.shape()[0];
        Tensor::new(vec![c, self.out_h, self.out_w], self.apply(c, src.data()))
            .expect("sample map output shape")
    }
}

/// Separable sampling axis for crop-and-resize: one entry per output column
/// (or row) holding the two source taps, the fractional offset, and the
/// coordinate's sensitivity to the box edges.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisTap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
    /// d(coordinate)/d(lower edge), d(coordinate)/d(upper edge); zero when clamped.
    pub d_lo: f64,
    pub d_hi: f64,
}

/// Sample positions along one axis for a box edge pair `[lo, hi]` resized to
/// `n` outputs over a source of `size` pixels (edge-replicated borders).
pub(crate) fn crop_axis(lo: f64, hi: f64, n: usize, size: usize) -> Vec<AxisTap> {
    let scale = (hi - lo) / n as f64;
    (0..n)
        .map(|j| {
            let t = (j as f64 + 0.5) / n as f64;
            let raw = lo + (j as f64 + 0.5) * scale - 0.5;
            let max = (size - 1) as f64;
            let (pos, inside) = if raw < 0.0 {
                (0.0, false)
            } else if raw > max {
                (max, false)
            } else {
                (raw, true)
            };
            let i0 = (pos.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            let frac = pos - i0 as f64;
            let (d_lo, d_hi) = if inside { (1.0 - t, t) } else { (0.0, 0.0) };
            AxisTap { i0, i1, frac, d_lo, d_hi }
        })
        .collect()
}
