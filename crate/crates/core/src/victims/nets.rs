use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alphabet::Alphabet;
use crate::diff::{concat, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Aabb;

pub const DETECTION_THRESHOLD: f64 = 0.5;

/// Shape metadata shared by the detector and the reader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimMeta {
    pub height: usize,
    pub width: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub alphabet: Alphabet,
}

impl VictimMeta {
    pub fn new(height: usize, width: usize, alphabet: Alphabet) -> Result<Self> {
        if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
            return Err(Error::Argument(format!("detector input {height}x{width} must be positive multiples of 16")));
        }
        let vocab = alphabet.vocab();
        Ok(Self { height, width, crop_h: 32, crop_w: 96, max_len: 7, vocab, alphabet })
    }

    fn feature_len(&self) -> usize {
        32 * (self.height / 16) * (self.width / 16)
    }

    fn columns(&self) -> usize {
        self.crop_w / 8
    }

    /// Every parameter's name, shape and fan-in.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (l, v, cols) = (self.max_len, self.vocab, self.columns());
        let feat = 48 * (self.crop_h / 8);
        let mut out = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.w"), vec![o, i, k, k], i * k * k));
            out.push((format!("{name}.b"), vec![o], i * k * k));
        };
        conv("det.conv1", 16, 3, 4);
        conv("det.conv2", 32, 16, 3);
        conv("det.conv3", 32, 32, 3);
        conv("ocr.conv1", 16, 3, 3);
        conv("ocr.conv2", 32, 16, 3);
        conv("ocr.conv3", 48, 32, 3);
        conv("ocr.conv4", 48, 48, 3);
        let mut dense = |name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o], i));
            out.push((format!("{name}.b"), vec![1, o], i));
        };
        dense("det.fc1", self.feature_len(), 64);
        dense("det.fc2", 64, 5);
        dense("ocr.fc1", feat, 96);
        dense("ocr.fc2", 96, v);
        out.push(("ocr.mix".into(), vec![l, cols], cols));
        out
    }

    fn check_crop_dims(&self) -> Result<()> {
        if self.crop_h % 8 != 0 || self.crop_w % 8 != 0 || self.crop_h == 0 || self.crop_w == 0 {
            return Err(Error::Argument(format!("OCR input {}x{} must be multiples of 8", self.crop_h, self.crop_w)));
        }
        Ok(())
    }
}

/// Named detector and reader parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct VictimWeights<T: Real = f32> {
    pub meta: VictimMeta,
    tensors: BTreeMap<String, Tensor<T>>,
}

impl VictimWeights<f32> {
    /// Seeded initialization: uniform fan-in scaling, small output layers,
    /// and a reading-order prior on the column mixer.
    pub fn init(meta: VictimMeta, seed: u64) -> Result<Self> {
        meta.check_crop_dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, fan_in) in meta.layout() {
            let t = if name == "ocr.mix" {
                let (l, cols) = (shape[0], shape[1]);
                let mut t = Tensor::zeros(shape);
                for p in 0..l {
                    let centre = (p as f64 + 0.5) * cols as f64 / l as f64;
                    let row: Vec<f64> = (0..cols).map(|c| (-(c as f64 + 0.5 - centre).powi(2) / 2.0).exp()).collect();
                    let z: f64 = row.iter().sum();
                    for c in 0..cols {
                        t.data_mut()[p * cols + c] = (row[c] / z) as f32;
                    }
                }
                t
            } else if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let out_layer = name.ends_with("fc2.w");
                let a = (6.0 / fan_in as f64).sqrt() * if out_layer { 0.1 } else { 1.0 };
                Tensor::from_fn(shape, |_| rng.gen_range(-a..a) as f32)
            };
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }
}

impl<T: Real> VictimWeights<T> {
    pub fn from_tensors(meta: VictimMeta, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        meta.check_crop_dims()?;
        if meta.vocab != meta.alphabet.vocab() {
            return Err(Error::Format(format!(
                "vocabulary {} does not match alphabet of {} symbols",
                meta.vocab,
                meta.alphabet.symbols().len()
            )));
        }
        let layout = meta.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", layout.len(), tensors.len())));
        }
        for (name, shape, _) in &layout {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape()))),
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { meta, tensors })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    pub fn cast<U: Real>(&self) -> VictimWeights<U> {
        VictimWeights {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Record the parameters whose names start with `prefix` on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, prefix: &str, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| {
                let var = if trainable { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T: Real> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    fn get(&self, name: &str) -> Var<'t, T> {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t, T>)> {
        self.vars.iter()
    }
}

fn conv<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
    x.conv2d(&p.get(&format!("{name}.w")), Some(&p.get(&format!("{name}.b"))), stride, pad)
}

fn dense<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let rows = x.shape()[0];
    let b = p.get(&format!("{name}.b"));
    let bias = if rows == 1 { b } else { x.tape().constant(Tensor::ones(vec![rows, 1])).matmul(&b)? };
    x.matmul(&p.get(&format!("{name}.w")))?.add(&bias)
}

/// Differentiable detector output.
#[derive(Clone, Copy, Debug)]
pub struct DetectionVar<'t, T: Real> {
    /// `[x_min, y_min, x_max, y_max]`
    pub bbox: Var<'t, T>,
    pub confidence: Var<'t, T>,
    /// Pre-logistic confidence score.
    pub logit: Var<'t, T>,
}

impl<T: Real> DetectionVar<'_, T> {
    pub fn detection(&self) -> Detection {
        let b = self.bbox.value();
        let d = b.data();
        let confidence = self.confidence.item().as_f64();
        Detection {
            bbox: Aabb::new(d[0].as_f64(), d[1].as_f64(), d[2].as_f64(), d[3].as_f64()),
            confidence,
            found: confidence >= DETECTION_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Aabb,
    pub confidence: f64,
    pub found: bool,
}

fn check_image<T: Real>(meta: &VictimMeta, image: &Var<'_, T>) -> Result<()> {
    let s = image.shape();
    if s != [3, meta.height, meta.width] {
        return Err(Error::Argument(format!(
            "detector expects 3x{}x{} images, got {s:?}",
            meta.height, meta.width
        )));
    }
    Ok(())
}

pub(crate) fn detector_forward<'t, T: Real>(
    meta: &VictimMeta,
    p: &Bound<'t, T>,
    image: Var<'t, T>,
) -> Result<DetectionVar<'t, T>> {
    check_image(meta, &image)?;
    let x = image.add_scalar(T::from_f64(-0.5));
    let x = conv(p, "det.conv1", x, 4, 0)?.silu();
    let x = conv(p, "det.conv2", x, 2, 1)?.silu();
    let x = conv(p, "det.conv3", x, 2, 1)?.silu();
    let x = x.reshape(vec![1, meta.feature_len()])?;
    let x = dense(p, "det.fc1", x)?.silu();
    let z = dense(p, "det.fc2", x)?;
    let (w, h) = (T::from_f64(meta.width as f64), T::from_f64(meta.height as f64));
    let bw = z.at(2)?.sigmoid().mul_scalar(w);
    let bh = z.at(3)?.sigmoid().mul_scalar(h);
    let x0 = bw.rsub_scalar(w).mul(&z.at(0)?.sigmoid())?;
    let y0 = bh.rsub_scalar(h).mul(&z.at(1)?.sigmoid())?;
    let bbox = concat(&[x0, y0, x0.add(&bw)?, y0.add(&bh)?])?;
    let logit = z.at(4)?;
    Ok(DetectionVar { bbox, confidence: logit.sigmoid(), logit })
}

/// Raw `L×V` logits of the reader.
pub(crate) fn reader_logits<'t, T: Real>(meta: &VictimMeta, p: &Bound<'t, T>, crop: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = crop.shape();
    if s != [3, meta.crop_h, meta.crop_w] {
        return Err(Error::Argument(format!("reader expects 3x{}x{} crops, got {s:?}", meta.crop_h, meta.crop_w)));
    }
    let x = crop.add_scalar(T::from_f64(-0.5));
    let x = conv(p, "ocr.conv1", x, 2, 1)?.silu();
    let x = conv(p, "ocr.conv2", x, 2, 1)?.silu();
    let x = conv(p, "ocr.conv3", x, 2, 1)?.silu();
    let x = conv(p, "ocr.conv4", x, 1, 1)?.silu();
    let cols = meta.columns();
    let x = x.reshape(vec![48 * meta.crop_h / 8, cols])?.transpose()?;
    let x = p.get("ocr.mix").matmul(&x)?;
    let x = dense(p, "ocr.fc1", x)?.silu();
    dense(p, "ocr.fc2", x)
}

/// Detector: box squashed into the image and a logistic confidence.
pub fn detect<'t, T: Real>(weights: &VictimWeights<T>, image: Var<'t, T>) -> Result<DetectionVar<'t, T>> {
    let p = weights.bind(image.tape(), "det.", false);
    detector_forward(&weights.meta, &p, image)
}

/// Reader: per-position softmax over the vocabulary.
pub fn read_plate<'t, T: Real>(weights: &VictimWeights<T>, crop: Var<'t, T>) -> Result<Var<'t, T>> {
    let p = weights.bind(crop.tape(), "ocr.", false);
    reader_logits(&weights.meta, &p, crop)?.softmax_rows()
}

/// Bilinear crop of `bbox` resized to `out_h×out_w`; the box is clipped to the image.
pub fn crop_and_resize<'t, T: Real>(image: Var<'t, T>, bbox: Var<'t, T>, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
    image.crop_resize(&bbox, out_h, out_w)
}

/// Full reader pipeline for one image, with no gradient recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Reading {
    pub detection: Detection,
    pub text: String,
    pub probs: Tensor<f32>,
}

pub fn read_image(weights: &VictimWeights, image: &Tensor<f32>) -> Result<Reading> {
    let tape = Tape::new();
    let x = tape.leaf_rc(Rc::new(image.clone()), false);
    let det = detect(weights, x)?;
    let detection = det.detection();
    let m = &weights.meta;
    let probs = match crop_and_resize(x, det.bbox, m.crop_h, m.crop_w) {
        Ok(crop) => (*read_plate(weights, crop)?.value()).clone(),
        Err(Error::DegenerateBox(_)) => {
            let mut t = Tensor::zeros(vec![m.max_len, m.vocab]);
            for r in 0..m.max_len {
                t.data_mut()[r * m.vocab + m.alphabet.pad()] = 1.0;
            }
            t
        }
        Err(e) => return Err(e),
    };
    let text = super::alphabet::decode(&probs, &m.alphabet);
    Ok(Reading { detection, text, probs })
}
