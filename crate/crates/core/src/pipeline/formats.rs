//! Patch binaries and 8-bit PNG images.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use super::io::{read_file, write_atomic};
use crate::diff::Tensor;
use crate::error::{Error, Result};

const PATCH_MAGIC: &[u8; 4] = b"SPAT";
const PATCH_VERSION: u32 = 1;

/// `SPAT`, version, then `C h w` and the pixel values, all little-endian.
pub fn patch_to_bytes(pixels: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = pixels.shape();
    if s.len() != 3 || s.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("patch must be C×h×w with positive dims, got {s:?}")));
    }
    let mut out = Vec::with_capacity(20 + 4 * pixels.numel());
    out.extend_from_slice(PATCH_MAGIC);
    out.extend_from_slice(&PATCH_VERSION.to_le_bytes());
    for &d in s {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in pixels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn patch_from_bytes(bytes: &[u8]) -> Result<Tensor<f32>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format(format!("patch file truncated at byte {i}")))
    };
    if bytes.get(..4) != Some(PATCH_MAGIC) {
        return Err(Error::Format("not a patch file (bad magic)".into()));
    }
    let version = word(4)?;
    if version != PATCH_VERSION {
        return Err(Error::Format(format!("unsupported patch version {version}")));
    }
    let dims = [word(8)? as usize, word(12)? as usize, word(16)? as usize];
    let n = dims.iter().product::<usize>();
    let body = &bytes[20..];
    if dims.contains(&0) || body.len() != 4 * n {
        return Err(Error::Format(format!("patch body has {} bytes, expected {} for {dims:?}", body.len(), 4 * n)));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Tensor::new(dims.to_vec(), data)
}

pub fn save_patch(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &patch_to_bytes(pixels)?)
}

pub fn load_patch(path: &Path) -> Result<Tensor<f32>> {
    patch_from_bytes(&read_file(path)?)
}

/// `[0, 1]` to a byte, rounding halves up.
pub fn quantize(v: f32) -> u8 {
    (f64::from(v).clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn png_bytes(pixels: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("PNG export needs 3×h×w, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = pixels.data();
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize(d[i]), quantize(d[h * w + i]), quantize(d[2 * h * w + i])])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, pixels: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &png_bytes(pixels)?)
}

/// Decode any supported image as `3×h×w` in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(vec![3, h, w]);
    let data = t.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = f32::from(p[c]) / 255.0;
        }
    }
    Ok(t)
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    decode_png(&read_file(path)?).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// `(width, height)` from the image header alone.
pub fn image_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
