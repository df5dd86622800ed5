use serde::{Deserialize, Serialize};

use super::quad::{Point, Quad};
use crate::error::{Error, Result};

const DET_EPS: f64 = 1e-12;

/// Projective map normalized so `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]] }
    }

    /// Normalize and validate an arbitrary 3×3 matrix.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if !s.is_finite() || s.abs() < DET_EPS || m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Singular(format!("cannot normalize {m:?}")));
        }
        let mut n = m;
        n.iter_mut().flatten().for_each(|v| *v /= s);
        let h = Self { m: n };
        if h.det().abs() <= DET_EPS {
            return Err(Error::Singular(format!("determinant {:e}", h.det())));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Map a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, p: Point) -> Option<Point> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if w.abs() < 1e-300 {
            return None;
        }
        Some([
            (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2]) / w,
            (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]) / w,
        ])
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= DET_EPS || !d.is_finite() {
            return Err(Error::Singular(format!("determinant {d:e}")));
        }
        let m = &self.m;
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                // Adjugate entry (i, j) is the cofactor of (j, i).
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / d;
            }
        }
        Self::from_matrix(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        let mut p = [[0.0; 3]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self::from_matrix(p)
    }
}

/// Direct linear transform for the homography taking each `src` corner to the
/// matching `dst` corner. Both point sets are Hartley-normalized first.
pub fn homography_from_corners(src: &Quad, dst: &Quad) -> Result<Homography> {
    for (name, q) in [("source", src), ("destination", dst)] {
        if q.has_collinear_triple() {
            return Err(Error::Singular(format!("{name} quad has three collinear corners")));
        }
    }
    let (ts, s) = normalize(src.corners());
    let (td, d) = normalize(dst.corners());

    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ([x, y], [u, v]) = (s[i], d[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    let h = solve8(a)?;
    let hn = [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]];

    // H = Td⁻¹ · Hn · Ts
    let hn = Homography { m: hn };
    let tdi = td.inverse()?;
    tdi.compose(&hn.compose(&ts)?)
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalize(pts: &[Point; 4]) -> (Homography, [Point; 4]) {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / 4.0;
    let s = std::f64::consts::SQRT_2 / mean;
    let t = Homography { m: [[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]] };
    let mut out = *pts;
    for p in out.iter_mut() {
        *p = [s * (p[0] - cx), s * (p[1] - cy)];
    }
    (t, out)
}

/// Gaussian elimination with partial pivoting on an 8×9 augmented system.
fn solve8(mut a: [[f64; 9]; 8]) -> Result<[f64; 8]> {
    for col in 0..8 {
        let piv = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::Singular("rank-deficient corner system".into()));
        }
        a.swap(col, piv);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut x = [0.0; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Ok(x)
}
