//! Binary checkpoint layout (all integers and floats little-endian, no padding):
//!
//! ```text
//! "ADLB" | version: u32 = 1 | L: u32 | L+1 layer sizes: u32 |
//! per layer: weight (d_out × d_in, row-major) then bias (d_out), as f64
//! ```

use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ADLB";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    let sizes = model.layer_sizes();
    let mut out = Vec::with_capacity(12 + 4 * sizes.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.num_layers() as u32).to_le_bytes());
    for &d in sizes {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in model.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"ADLB\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let layers = r.u32("layer count")? as usize;
    if layers == 0 {
        return Err(Error::Format {
            offset: 8,
            message: "layer count must be positive".into(),
        });
    }
    let mut sizes = Vec::with_capacity(layers + 1);
    for _ in 0..=layers {
        let at = r.pos;
        let d = r.u32("layer size")? as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: at as u64,
                message: "layer size must be positive".into(),
            });
        }
        sizes.push(d);
    }
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for (i, pair) in sizes.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        let w = r.f64s(d_in * d_out, &format!("layer {i} weight"))?;
        let b = r.f64s(d_out, &format!("layer {i} bias"))?;
        weights.push(Tensor::matrix(d_out, d_in, w)?);
        biases.push(Tensor::matrix(1, d_out, b)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    ModelParams::new(sizes, weights, biases).map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
