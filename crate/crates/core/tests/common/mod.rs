#![allow(dead_code)]

use std::collections::BTreeMap;

use platerim_core::dataset::LabeledImage;
use platerim_core::diff::Tensor;
use platerim_core::victims::{render_synthetic_plate, Alphabet, CameraPose, RenderConfig, VictimMeta, VictimWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Untrained victims whose detector starts out confident, so every image
/// counts as found and the baseline is defined.
pub fn confident_victims(size: usize, seed: u64) -> VictimWeights {
    let meta = VictimMeta::new(size, size, Alphabet::default()).unwrap();
    let w = VictimWeights::init(meta.clone(), seed).unwrap();
    let mut tensors: BTreeMap<String, Tensor<f32>> = w.tensors().clone();
    tensors.get_mut("det.fc2.b").unwrap().data_mut()[4] = 3.0;
    VictimWeights::from_tensors(meta, tensors).unwrap()
}

/// Renders of one plate text from seeded poses.
pub fn toy_images(n: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let alphabet = Alphabet::default();
    let cfg = RenderConfig { height: size, width: size, ..RenderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pose = CameraPose::new(rng.gen_range(1.0..1.6), rng.gen_range(-30.0..30.0));
            let (image, plate) = render_synthetic_plate("AB12CD3", &pose, rng.gen(), &alphabet, &cfg).unwrap();
            LabeledImage { id: format!("toy{i:03}"), image, plate, text: "AB12CD3".into(), pose: Some(pose) }
        })
        .collect()
}
