use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::alphabet::Alphabet;
use super::font::{glyph, lit, GLYPH_H, GLYPH_W};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{homography_from_corners, Homography, Quad};

/// Camera position relative to the plate centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub distance_m: f64,
    /// Horizontal viewing angle; 0 is head-on.
    pub angle_deg: f64,
    /// Camera height above the plate centre; absent means level with it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height_m: Option<f64>,
}

impl CameraPose {
    pub fn new(distance_m: f64, angle_deg: f64) -> Self {
        Self { distance_m, angle_deg, height_m: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Focal length as a multiple of the image width.
    pub focal_ratio: f64,
    pub plate_w_m: f64,
    pub plate_h_m: f64,
    pub max_len: usize,
    /// Maximum offset of the plate centre from the image centre, as a fraction of each dimension.
    pub centre_jitter: f64,
    pub noise_std: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            focal_ratio: 4.0,
            plate_w_m: 0.30,
            plate_h_m: 0.15,
            max_len: 7,
            centre_jitter: 0.12,
            noise_std: 0.02,
        }
    }
}

/// Image-space plate corners for a pose, centred on `(cx, cy)`.
pub fn project_plate(pose: &CameraPose, cfg: &RenderConfig, cx: f64, cy: f64) -> Result<Quad> {
    let d = pose.distance_m;
    if !(d.is_finite() && d > cfg.plate_w_m) || !(pose.angle_deg.abs() < 80.0) {
        return Err(Error::Argument(format!("unsupported camera pose {pose:?}")));
    }
    let th = pose.angle_deg.to_radians();
    let cam = [d * th.sin(), pose.height_m.unwrap_or(0.0), d * th.cos()];
    let norm = (cam[0] * cam[0] + cam[1] * cam[1] + cam[2] * cam[2]).sqrt();
    let fwd = [-cam[0] / norm, -cam[1] / norm, -cam[2] / norm];
    // right = fwd × world-up, up = right × fwd
    let r = [-fwd[2], 0.0, fwd[0]];
    let rn = (r[0] * r[0] + r[2] * r[2]).sqrt();
    let right = [r[0] / rn, 0.0, r[2] / rn];
    let up = [
        right[1] * fwd[2] - right[2] * fwd[1],
        right[2] * fwd[0] - right[0] * fwd[2],
        right[0] * fwd[1] - right[1] * fwd[0],
    ];
    let f = cfg.focal_ratio * cfg.width as f64;
    let (hw, hh) = (cfg.plate_w_m / 2.0, cfg.plate_h_m / 2.0);
    let world = [[-hw, hh], [hw, hh], [hw, -hh], [-hw, -hh]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut corners = [[0.0; 2]; 4];
    for (c, [x, y]) in corners.iter_mut().zip(world) {
        let v = [x - cam[0], y - cam[1], -cam[2]];
        let z = dot(v, fwd);
        *c = [cx + f * dot(v, right) / z, cy - f * dot(v, up) / z];
    }
    Quad::new(corners)
}

struct PlateStyle {
    paper: [f64; 3],
    ink: [f64; 3],
}

fn plate_colour(text: &[[u8; GLYPH_H]], s: f64, t: f64, style: &PlateStyle) -> [f64; 3] {
    if !(0.025..0.975).contains(&s) || !(0.05..0.95).contains(&t) {
        return style.ink;
    }
    const X0: f64 = 0.05;
    const X1: f64 = 0.95;
    const Y0: f64 = 0.18;
    const Y1: f64 = 0.82;
    if t >= Y0 && t < Y1 && !text.is_empty() {
        let cell = (X1 - X0) / 7.0;
        let start = X0 + (7 - text.len()) as f64 * cell / 2.0;
        let u = (s - start) / cell;
        if u >= 0.0 && (u as usize) < text.len() {
            let k = u as usize;
            // Glyph takes 5 of every 6 cell columns, centred.
            let gx = (u - k as f64) * (GLYPH_W + 1) as f64 - 0.5;
            let gy = (t - Y0) / (Y1 - Y0) * GLYPH_H as f64;
            if gx >= 0.0 && gx < GLYPH_W as f64 && lit(&text[k], gy as usize, gx as usize) {
                return style.ink;
            }
        }
    }
    style.paper
}

/// Random background: gradient, a few rectangles, seeded.
pub fn render_background(rng: &mut impl Rng, cfg: &RenderConfig) -> Vec<[f64; 3]> {
    let (h, w) = (cfg.height, cfg.width);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.15..0.7));
    let grad: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.25..0.25));
    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (dir.cos(), dir.sin());
    let mut px = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let g = (x as f64 / w as f64 - 0.5) * dx + (y as f64 / h as f64 - 0.5) * dy;
            px[y * w + x] = std::array::from_fn(|c| base[c] + grad[c] * g);
        }
    }
    for _ in 0..rng.gen_range(2..6) {
        let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
        let (rw, rh) = (rng.gen_range(w / 10..w / 2), rng.gen_range(h / 10..h / 2));
        let col: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                px[y * w + x] = col;
            }
        }
    }
    px
}

fn finish(px: Vec<[f64; 3]>, rng: &mut impl Rng, cfg: &RenderConfig) -> Tensor<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let gain = rng.gen_range(0.8..1.15);
    let offset = rng.gen_range(-0.05..0.05);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            let v = px[i][c] * gain + offset + noise.sample(rng);
            data[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

/// Plate-free scene with the same statistics as [`render_synthetic_plate`].
pub fn render_negative(seed: u64, cfg: &RenderConfig) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = render_background(&mut rng, cfg);
    finish(px, &mut rng, cfg)
}

/// Render `text` on a plate seen from `pose` over a random background.
/// Returns the image and the plate's corners (TL, TR, BR, BL).
pub fn render_synthetic_plate(
    text: &str,
    pose: &CameraPose,
    seed: u64,
    alphabet: &Alphabet,
    cfg: &RenderConfig,
) -> Result<(Tensor<f32>, Quad)> {
    alphabet.encode(text, cfg.max_len)?;
    let glyphs: Vec<[u8; GLYPH_H]> = text
        .chars()
        .map(|c| glyph(c).ok_or_else(|| Error::Argument(format!("no glyph for {c:?}"))))
        .collect::<Result<_>>()?;
    if glyphs.len() > 7 {
        return Err(Error::Argument(format!("plate layout holds 7 symbols, got {}", glyphs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let j = cfg.centre_jitter;
    let cx = w as f64 * (0.5 + rng.gen_range(-j..=j));
    let cy = h as f64 * (0.5 + rng.gen_range(-j..=j));
    let quad = project_plate(pose, cfg, cx, cy)?;
    let to_plate: Homography = homography_from_corners(&Quad::canonical(1, 1), &quad)?.inverse()?;

    let paper_level = rng.gen_range(0.8..0.97);
    let style = PlateStyle {
        paper: std::array::from_fn(|_| paper_level + rng.gen_range(-0.03..0.03)),
        ink: std::array::from_fn(|_| rng.gen_range(0.02..0.2)),
    };
    let mut px = render_background(&mut rng, cfg);
    let b = quad.bounding_box();
    let (x_lo, x_hi) = ((b.x_min.floor().max(0.0)) as usize, (b.x_max.ceil().min(w as f64)) as usize);
    let (y_lo, y_hi) = ((b.y_min.floor().max(0.0)) as usize, (b.y_max.ceil().min(h as f64)) as usize);
    const SS: usize = 3;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let mut acc = [0.0; 3];
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let p = [x as f64 + (sx as f64 + 0.5) / SS as f64, y as f64 + (sy as f64 + 0.5) / SS as f64];
                    if let Some([s, t]) = to_plate.apply(p) {
                        if (0.0..1.0).contains(&s) && (0.0..1.0).contains(&t) {
                            let col = plate_colour(&glyphs, s, t, &style);
                            (0..3).for_each(|c| acc[c] += col[c]);
                            hits += 1;
                        }
                    }
                }
            }
            if hits > 0 {
                let n = (SS * SS) as f64;
                let bg = px[y * w + x];
                px[y * w + x] = std::array::from_fn(|c| acc[c] / n + bg[c] * (n - hits as f64) / n);
            }
        }
    }
    Ok((finish(px, &mut rng, cfg), quad))
}

/// Uniform random plate text of length `len`.
pub fn random_text(rng: &mut impl Rng, alphabet: &Alphabet, len: usize) -> String {
    (0..len).map(|_| alphabet.symbols()[rng.gen_range(0..alphabet.symbols().len())]).collect()
}
