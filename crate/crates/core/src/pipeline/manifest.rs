//! Dataset manifests: a JSON array of labeled or unlabeled image entries.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::formats::load_png;
use super::io::{read_file, write_atomic};
use crate::dataset::{Dataset, Exclusion, LabeledImage};
use crate::error::{Error, Result};
use crate::geometry::{Point, Quad};
use crate::victims::CameraPose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corners: Option<Quad>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<CameraPose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    id: String,
    image: PathBuf,
    text: String,
    #[serde(default)]
    corners: Option<Vec<Point>>,
    #[serde(default)]
    pose: Option<CameraPose>,
    #[serde(default)]
    split: Option<Split>,
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    let values: Vec<serde_json::Value> =
        serde_json::from_slice(bytes).map_err(|e| Error::Manifest(format!("manifest is not a JSON array: {e}")))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(values.len());
    for (k, v) in values.into_iter().enumerate() {
        let id_hint = v.get("id").and_then(|i| i.as_str()).map(str::to_string).unwrap_or_else(|| format!("#{k}"));
        let raw: RawEntry =
            serde_json::from_value(v).map_err(|e| Error::Manifest(format!("entry {k} ({id_hint}): {e}")))?;
        let corners = match raw.corners {
            None => None,
            Some(c) => Some(
                Quad::from_slice(&c).map_err(|e| Error::Manifest(format!("entry {k} ({}): corners: {e}", raw.id)))?,
            ),
        };
        if !seen.insert(raw.id.clone()) {
            return Err(Error::Manifest(format!("entry {k}: duplicate id {:?}", raw.id)));
        }
        out.push(ManifestEntry { id: raw.id, image: raw.image, text: raw.text, corners, pose: raw.pose, split: raw.split });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries = parse_manifest(&read_file(path)?)?;
    if entries.is_empty() {
        log::warn!("manifest {} has no entries", path.display());
    }
    Ok(entries)
}

pub fn manifest_to_bytes(entries: &[ManifestEntry]) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(entries)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_atomic(path, &manifest_to_bytes(entries)?)
}

/// Directory that relative image paths in the manifest at `path` resolve against.
pub fn manifest_root(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn resolve_image(root: &Path, entry: &ManifestEntry) -> PathBuf {
    if entry.image.is_absolute() {
        entry.image.clone()
    } else {
        root.join(&entry.image)
    }
}

/// Seeded shuffle, then `⌈n(1−f)⌉` entries for training and the rest for
/// validation; each side keeps at least one entry.
pub fn split_dataset<T: Clone>(entries: &[T], holdout_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Argument(format!("holdout fraction {holdout_fraction} outside (0, 1)")));
    }
    let n = entries.len();
    if n < 2 {
        return Err(Error::Argument(format!("splitting needs at least 2 entries, got {n}")));
    }
    let train_n = ((n as f64 * (1.0 - holdout_fraction) - 1e-9).ceil() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| entries[i].clone()).collect();
    Ok((pick(&order[..train_n]), pick(&order[train_n..])))
}

/// Decode the labeled entries; unlabeled ones are listed as exclusions.
pub fn load_images(root: &Path, entries: &[ManifestEntry]) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for e in entries {
        let Some(plate) = e.corners.clone() else {
            ds.excluded.push(Exclusion { id: e.id.clone(), reason: "no corner labels".into() });
            continue;
        };
        let image = load_png(&resolve_image(root, e)).map_err(|err| err.with_item(&e.id))?;
        ds.images.push(LabeledImage { id: e.id.clone(), image, plate, text: e.text.clone(), pose: e.pose.clone() });
    }
    Ok(ds)
}
