use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

const MIN_AREA: f64 = 1e-9;

/// Four ordered corners: top-left, top-right, bottom-right, bottom-left.
///
/// Coordinates are continuous image coordinates in which pixel `(row, col)`
/// covers `[col, col+1] × [row, row+1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[Point; 4]", into = "[Point; 4]")]
pub struct Quad {
    corners: [Point; 4],
}

impl TryFrom<[Point; 4]> for Quad {
    type Error = Error;
    fn try_from(c: [Point; 4]) -> Result<Self> {
        Quad::new(c)
    }
}

impl From<Quad> for [Point; 4] {
    fn from(q: Quad) -> Self {
        q.corners
    }
}

impl Quad {
    /// Validated quad: finite corners, simple polygon, non-zero area.
    pub fn new(corners: [Point; 4]) -> Result<Self> {
        if corners.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidQuad(format!("non-finite corner in {corners:?}")));
        }
        let q = Self { corners };
        if q.signed_area().abs() <= MIN_AREA {
            return Err(Error::InvalidQuad(format!("zero area: {corners:?}")));
        }
        if !q.is_simple() {
            return Err(Error::InvalidQuad(format!("self-intersecting: {corners:?}")));
        }
        Ok(q)
    }

    pub fn from_slice(points: &[Point]) -> Result<Self> {
        let arr: [Point; 4] = points
            .try_into()
            .map_err(|_| Error::InvalidQuad(format!("expected 4 corners, got {}", points.len())))?;
        Self::new(arr)
    }

    /// Canonical corners of a `h×w` raster: `(0,0), (w,0), (w,h), (0,h)`.
    pub fn canonical(h: usize, w: usize) -> Self {
        let (w, h) = (w as f64, h as f64);
        Self { corners: [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]] }
    }

    pub fn from_box(b: &Aabb) -> Self {
        Self {
            corners: [[b.x_min, b.y_min], [b.x_max, b.y_min], [b.x_max, b.y_max], [b.x_min, b.y_max]],
        }
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0, 0.0];
        for p in &self.corners {
            c[0] += p[0] / 4.0;
            c[1] += p[1] / 4.0;
        }
        c
    }

    /// Shoelace area; positive for the TL, TR, BR, BL order in y-down coordinates.
    pub fn signed_area(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..4 {
            let (a, b) = (self.corners[i], self.corners[(i + 1) % 4]);
            s += a[0] * b[1] - b[0] * a[1];
        }
        s / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    fn is_simple(&self) -> bool {
        let c = &self.corners;
        !segments_intersect(c[0], c[1], c[2], c[3]) && !segments_intersect(c[1], c[2], c[3], c[0])
    }

    /// Point-in-polygon (even-odd rule).
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for i in 0..4 {
            let (a, b) = (self.corners[i], self.corners[(i + 1) % 4]);
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the nearest edge.
    pub fn edge_distance(&self, p: Point) -> f64 {
        (0..4)
            .map(|i| segment_distance(p, self.corners[i], self.corners[(i + 1) % 4]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_box(&self) -> Aabb {
        let mut b = Aabb {
            x_min: f64::INFINITY,
            y_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for p in &self.corners {
            b.x_min = b.x_min.min(p[0]);
            b.y_min = b.y_min.min(p[1]);
            b.x_max = b.x_max.max(p[0]);
            b.y_max = b.y_max.max(p[1]);
        }
        b
    }

    /// True when some three corners are (numerically) collinear.
    pub fn has_collinear_triple(&self) -> bool {
        let scale = {
            let b = self.bounding_box();
            (b.width().max(b.height())).max(1e-300)
        };
        (0..4).any(|skip| {
            let pts: Vec<Point> = (0..4).filter(|&i| i != skip).map(|i| self.corners[i]).collect();
            cross(pts[0], pts[1], pts[2]).abs() <= 1e-10 * scale * scale
        })
    }
}

/// Move every corner to `centroid + factor·(corner − centroid)`.
pub fn scale_quad(quad: &Quad, factor: f64) -> Result<Quad> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Argument(format!("scale factor must be positive, got {factor}")));
    }
    if quad.area() <= MIN_AREA {
        return Err(Error::InvalidQuad("zero area".into()));
    }
    let c = quad.centroid();
    let mut out = *quad.corners();
    for p in out.iter_mut() {
        p[0] = c[0] + factor * (p[0] - c[0]);
        p[1] = c[1] + factor * (p[1] - c[1]);
    }
    Quad::new(out)
}

/// Axis-aligned bounding box of a rim quad.
pub fn rim_bounding_box(rim: &Quad) -> Aabb {
    rim.bounding_box()
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixel-edge coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Aabb {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn iou(&self, other: &Aabb) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_intersect(p1: Point, p2: Point, p3: Point, p4: Point) -> bool {
    let d1 = cross(p3, p4, p1);
    let d2 = cross(p3, p4, p2);
    let d3 = cross(p1, p2, p3);
    let d4 = cross(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: Point, b: Point, p: Point, d: f64| {
        d == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    on(p3, p4, p1, d1) || on(p3, p4, p2, d2) || on(p1, p2, p3, d3) || on(p1, p2, p4, d4)
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Point, b: Point) -> bool {
        (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12
    }

    #[test]
    fn unit_square_scaled_by_rim_factor() {
        let q = Quad::new([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let r = scale_quad(&q, 1.6).unwrap();
        let want = [[-0.3, -0.3], [1.3, -0.3], [1.3, 1.3], [-0.3, 1.3]];
        for (a, b) in r.corners().iter().zip(&want) {
            assert!(close(*a, *b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn unit_factor_is_identity_and_doubling_about_origin() {
        let q = Quad::new([[2.0, 1.0], [7.5, 1.5], [7.0, 4.0], [1.5, 3.0]]).unwrap();
        assert_eq!(scale_quad(&q, 1.0).unwrap().corners(), q.corners());
        let s = Quad::new([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let d = scale_quad(&s, 2.0).unwrap();
        for (a, b) in d.corners().iter().zip(s.corners()) {
            assert!(close(*a, [2.0 * b[0], 2.0 * b[1]]));
        }
    }

    #[test]
    fn degenerate_and_bowtie_quads_are_rejected() {
        assert!(matches!(
            Quad::new([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]),
            Err(Error::InvalidQuad(_))
        ));
        assert!(matches!(
            Quad::new([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]),
            Err(Error::InvalidQuad(_))
        ));
        assert!(Quad::from_slice(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]).is_err());
        let q = Quad::canonical(2, 2);
        assert!(scale_quad(&q, 0.0).is_err());
    }

    #[test]
    fn bounding_boxes() {
        let sq = Quad::new([[1.0, 2.0], [4.0, 2.0], [4.0, 5.0], [1.0, 5.0]]).unwrap();
        assert_eq!(rim_bounding_box(&sq), Aabb::new(1.0, 2.0, 4.0, 5.0));

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let diamond = Quad::new([[0.0, -h], [h, 0.0], [0.0, h], [-h, 0.0]]).unwrap();
        let b = rim_bounding_box(&diamond);
        assert!((b.x_min + h).abs() < 1e-15 && (b.y_max - h).abs() < 1e-15);

        let q = Quad::new([[0.0, 0.0], [4.0, 1.0], [5.0, 6.0], [-1.0, 5.0]]).unwrap();
        assert_eq!(rim_bounding_box(&q), Aabb::new(-1.0, 0.0, 5.0, 6.0));
    }

    #[test]
    fn containment_and_edge_distance() {
        let q = Quad::canonical(10, 20);
        assert!(q.contains([10.0, 5.0]));
        assert!(!q.contains([21.0, 5.0]));
        assert!((q.edge_distance([10.0, 5.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn serde_rejects_invalid_corners() {
        let ok: Quad = serde_json::from_str("[[0,0],[2,0],[2,1],[0,1]]").unwrap();
        assert_eq!(ok.area(), 2.0);
        assert!(serde_json::from_str::<Quad>("[[0,0],[2,0],[2,1]]").is_err());
    }
}
