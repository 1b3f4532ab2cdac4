//! Byte-exact model snapshots.
//!
//! Layout: `AERCKPT1`, u32 layer count, then per layer u32 rows, u32 cols,
//! row-major f64 weights and the f64 biases; the momentum buffers follow in
//! the same order. All integers and floats are little-endian.

use super::{Dense, Matrix, ModelState};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AERCKPT1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub bytes: Vec<u8>,
}

fn write_layers(out: &mut Vec<u8>, layers: &[Dense], with_shape: bool) {
    for l in layers {
        if with_shape {
            out.extend_from_slice(&(l.weights.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weights.cols() as u32).to_le_bytes());
        }
        for v in l.weights.as_slice().iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Input("checkpoint truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl ModelState {
    pub fn save_checkpoint(&self, epoch: usize) -> Checkpoint {
        let mut bytes = Vec::with_capacity(16 + 16 * self.num_params());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        write_layers(&mut bytes, &self.layers, true);
        write_layers(&mut bytes, &self.velocity, false);
        Checkpoint { epoch, bytes }
    }

    /// Overwrites parameters and momentum buffers from `ckpt`. The learning
    /// rate and seen-class set are kept.
    pub fn restore_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut r = Reader {
            bytes: &ckpt.bytes,
            pos: 0,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Input("bad checkpoint magic".into()));
        }
        let count = r.u32()?;
        if count != self.layers.len() {
            return Err(Error::Input(format!(
                "checkpoint has {count} layers, model has {}",
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for (i, l) in self.layers.iter().enumerate() {
            let (rows, cols) = (r.u32()?, r.u32()?);
            if (rows, cols) != (l.weights.rows(), l.weights.cols()) {
                return Err(Error::Input(format!(
                    "checkpoint layer {i} is {rows}x{cols}, model layer is {}x{}",
                    l.weights.rows(),
                    l.weights.cols()
                )));
            }
            let w = r.f64s(rows * cols)?;
            let b = r.f64s(cols)?;
            layers.push(Dense {
                weights: Matrix::from_vec(rows, cols, w),
                bias: b,
            });
        }
        let mut velocity = Vec::with_capacity(count);
        for l in &layers {
            let (rows, cols) = (l.weights.rows(), l.weights.cols());
            let w = r.f64s(rows * cols)?;
            let b = r.f64s(cols)?;
            velocity.push(Dense {
                weights: Matrix::from_vec(rows, cols, w),
                bias: b,
            });
        }
        if r.pos != ckpt.bytes.len() {
            return Err(Error::Input("trailing bytes in checkpoint".into()));
        }
        self.layers = layers;
        self.velocity = velocity;
        Ok(())
    }
}
