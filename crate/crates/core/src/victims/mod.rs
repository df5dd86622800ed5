//! Surrogate plate reader: a convolutional detector producing a box and a
//! confidence, a convolutional reader producing per-position symbol
//! probabilities, a synthetic plate renderer and supervised training.

mod alphabet;
mod font;
mod nets;
mod render;
mod train;
mod weights_io;

pub use alphabet::{decode, Alphabet, DEFAULT_SYMBOLS};
pub use nets::{
    crop_and_resize, detect, read_image, read_plate, Bound, Detection, DetectionVar, Reading, VictimMeta,
    VictimWeights, DETECTION_THRESHOLD,
};
pub use render::{project_plate, random_text, render_negative, render_synthetic_plate, CameraPose, RenderConfig};
pub use train::{holdout_accuracy, train_victims, VictimReport, VictimTrainConfig};
pub use weights_io::{read_weights, weights_from_bytes, weights_to_bytes, write_weights};
