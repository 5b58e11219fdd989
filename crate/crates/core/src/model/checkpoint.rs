//! Checkpoint persistence.
//!
//! Format (all integers little-endian):
//!
//! ```text
//! magic    [u8; 4] = "UCKP"
//! version  u32     = 1
//! input_dim    u32
//! num_classes  u32
//! num_layers   u32
//! per layer: in_dim u32, out_dim u32, activation u8 (0 = relu, 1 = identity)
//! per layer: weight payload f64 LE row-major (in_dim*out_dim), bias f64 LE (out_dim)
//! ```
//!
//! No trailing bytes are allowed; truncated, corrupt or version-mismatched
//! files are rejected with a reason and never partially loaded.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::model::{Activation, Layer, ModelParams};

const MAGIC: &[u8; 4] = b"UCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.input_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        buf.extend_from_slice(&(layer.weight.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.weight.ncols() as u32).to_le_bytes());
        buf.push(match layer.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }
    for layer in model.layers() {
        for &w in layer.weight.iter() {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for &b in layer.bias.iter() {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };

    let magic = cur.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let input_dim = cur.u32()? as usize;
    let num_classes = cur.u32()? as usize;
    let num_layers = cur.u32()? as usize;
    if num_layers == 0 || num_layers > 1024 {
        return Err(Error::Checkpoint(format!("implausible layer count {num_layers}")));
    }
    let mut headers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let act = match cur.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => {
                return Err(Error::Checkpoint(format!("unknown activation tag {other}")));
            }
        };
        headers.push((rows, cols, act));
    }
    let mut layers = Vec::with_capacity(num_layers);
    for (rows, cols, act) in headers {
        let mut w = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            w.push(cur.f64()?);
        }
        let mut b = Vec::with_capacity(cols);
        for _ in 0..cols {
            b.push(cur.f64()?);
        }
        layers.push(Layer {
            weight: Array2::from_shape_vec((rows, cols), w)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            bias: Array1::from_vec(b),
            activation: act,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            buf.len() - cur.pos
        )));
    }
    let model = ModelParams::from_layers(layers, input_dim)
        .map_err(|e| Error::Checkpoint(format!("invalid layer chain: {e}")))?;
    if model.num_classes() != num_classes {
        return Err(Error::Checkpoint(format!(
            "header says {num_classes} classes, layers produce {}",
            model.num_classes()
        )));
    }
    Ok(model)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let m = init_model(7, &[9, 5], 4, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.input_dim(), 7);
        assert_eq!(loaded.num_classes(), 4);
        for (a, b) in m.layers().iter().zip(loaded.layers()) {
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.bias.iter().zip(b.bias.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.activation, b.activation);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = init_model(4, &[6], 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &bytes[..bytes.len() - 11]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");
        // original file still loads
        assert!(load_checkpoint(&path).is_ok());
    }

    #[test]
    fn version_bump_is_rejected_with_version_message() {
        let m = init_model(3, &[], 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "got: {err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let m = init_model(3, &[], 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"junk");
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
