//! Seeded synthetic datasets: rendered plates written as PNGs plus a manifest.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::formats::png_bytes;
use super::io::write_atomic;
use super::manifest::{save_manifest, ManifestEntry, Split};
use crate::dataset::LabeledImage;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::victims::{random_text, render_negative, render_synthetic_plate, Alphabet, CameraPose, RenderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Extra entries tagged as a held-out test split.
    pub test_count: usize,
    /// One plate text for every image; random texts when absent.
    pub text: Option<String>,
    pub distance_m: [f64; 2],
    pub angle_deg: [f64; 2],
    pub height_m: Option<[f64; 2]>,
    /// Write corner labels (false leaves the set for manual labeling).
    pub labeled: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 100,
            test_count: 0,
            text: None,
            distance_m: [1.8, 2.8],
            angle_deg: [-30.0, 30.0],
            height_m: Some([-0.3, 0.5]),
            labeled: true,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.count + self.test_count == 0
            || !range(self.distance_m)
            || self.distance_m[0] <= 0.0
            || !range(self.angle_deg)
            || !self.height_m.map_or(true, range)
        {
            return Err(Error::Argument(format!("invalid synthetic dataset config {self:?}")));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn draw_pose(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> CameraPose {
    CameraPose {
        distance_m: draw(rng, cfg.distance_m),
        angle_deg: draw(rng, cfg.angle_deg),
        height_m: cfg.height_m.map(|r| draw(rng, r)),
    }
}

/// Render the dataset into `dir` (`images/*.png` and `manifest.json`) and
/// return the manifest path.
pub fn render_dataset(dir: &Path, cfg: &SyntheticConfig, render: &RenderConfig, alphabet: &Alphabet, seed: u64) -> Result<PathBuf> {
    cfg.validate()?;
    if let Some(t) = &cfg.text {
        alphabet.encode(t, render.max_len)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cfg.count + cfg.test_count;
    let mut entries = Vec::with_capacity(total);
    for i in 0..total {
        let text = match &cfg.text {
            Some(t) => t.clone(),
            None => random_text(&mut rng, alphabet, render.max_len),
        };
        let pose = draw_pose(&mut rng, cfg);
        let (image, quad) = render_synthetic_plate(&text, &pose, rng.gen(), alphabet, render)?;
        let id = format!("syn{i:05}");
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        write_atomic(&dir.join(&rel), &png_bytes(&image)?)?;
        entries.push(ManifestEntry {
            id,
            image: rel,
            text,
            corners: cfg.labeled.then_some(quad),
            pose: Some(pose),
            split: (i >= cfg.count).then_some(Split::Test),
        });
    }
    let path = dir.join("manifest.json");
    save_manifest(&path, &entries)?;
    Ok(path)
}

/// In-memory victim training data: `count` plates with random texts over the
/// configured pose ranges, and `negatives` plate-free scenes.
pub fn render_victim_set(
    cfg: &SyntheticConfig,
    count: usize,
    negatives: usize,
    render: &RenderConfig,
    alphabet: &Alphabet,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<Tensor<f32>>)> {
    SyntheticConfig { count, test_count: 0, ..cfg.clone() }.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plates = Vec::with_capacity(count);
    for i in 0..count {
        let text = random_text(&mut rng, alphabet, render.max_len);
        let pose = draw_pose(&mut rng, cfg);
        let (image, plate) = render_synthetic_plate(&text, &pose, rng.gen(), alphabet, render)?;
        plates.push(LabeledImage { id: format!("victim{i:05}"), image, plate, text, pose: Some(pose) });
    }
    let empty = (0..negatives).map(|_| render_negative(rng.gen(), render)).collect();
    Ok((plates, empty))
}
