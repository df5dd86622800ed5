use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::geometry::Quad;
use crate::victims::CameraPose;

/// One decoded, labeled image held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub plate: Quad,
    pub text: String,
    pub pose: Option<CameraPose>,
}

/// An input item left out of a run, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

/// Usable images plus the ones that could not be used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub excluded: Vec<Exclusion>,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Self {
        Self { images, excluded: Vec::new() }
    }
}
