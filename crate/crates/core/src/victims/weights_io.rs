use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::alphabet::Alphabet;
use super::nets::{VictimMeta, VictimWeights};
use crate::diff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPVW";
const VERSION: u32 = 1;

/// `SPVW`, version, `H W H_O W_O L V` and the alphabet, then named tensors to EOF.
pub fn write_weights(w: &VictimWeights, out: &mut impl Write) -> Result<()> {
    let m = &w.meta;
    out.write_all(MAGIC)?;
    for v in [VERSION as usize, m.height, m.width, m.crop_h, m.crop_w, m.max_len, m.vocab] {
        put_u32(out, v)?;
    }
    let alphabet: String = m.alphabet.clone().into();
    put_u32(out, alphabet.len())?;
    out.write_all(alphabet.as_bytes())?;
    for (name, t) in w.tensors() {
        put_u32(out, name.len())?;
        out.write_all(name.as_bytes())?;
        put_u32(out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(out, d)?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn weights_to_bytes(w: &VictimWeights) -> Vec<u8> {
    let mut buf = Vec::new();
    write_weights(w, &mut buf).expect("writing to memory");
    buf
}

pub fn read_weights(input: &mut impl Read) -> Result<VictimWeights> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    weights_from_bytes(&bytes)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<VictimWeights> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a victim weights file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let dims: Vec<usize> = (0..6).map(|_| r.u32()).collect::<Result<_>>()?;
    let alen = r.u32()?;
    let alphabet = std::str::from_utf8(r.take(alen)?)
        .map_err(|_| Error::Format("alphabet is not UTF-8".into()))
        .and_then(|s| Alphabet::new(s).map_err(|e| Error::Format(e.to_string())))?;
    let meta = VictimMeta {
        height: dims[0],
        width: dims[1],
        crop_h: dims[2],
        crop_w: dims[3],
        max_len: dims[4],
        vocab: dims[5],
        alphabet,
    };
    let mut tensors = BTreeMap::new();
    while r.pos < bytes.len() {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("{name}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n > 0);
        let n = n.ok_or_else(|| Error::Format(format!("{name}: bad shape {shape:?}")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    VictimWeights::from_tensors(meta, tensors)
}

fn put_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}
