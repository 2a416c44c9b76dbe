//! Dense rank-4 tensors in row-major `[T, C, H, W]` order and the TSTN
//! on-disk format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// TSTN file magic, the ASCII bytes `TSTN`.
pub const TSTN_MAGIC: [u8; 4] = [0x54, 0x53, 0x54, 0x4E];
/// Current TSTN format version.
pub const TSTN_VERSION: u32 = 1;

/// Shape of a rank-4 tensor: timesteps, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(t: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { t, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.t * self.c * self.h * self.w
    }

    /// Row-major flat index of element `(t, c, h, w)`.
    #[inline]
    pub fn index(&self, t: usize, c: usize, h: usize, w: usize) -> usize {
        ((t * self.c + c) * self.h + h) * self.w + w
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Dimension(format!(
                "all dims must be >= 1, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{},{},{}]", self.t, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor of 32-bit reals carrying spikes or pre-activation
/// features. The universal inter-layer value.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTensor {
    dims: Dims,
    data: Vec<f32>,
    requires_grad: bool,
}

impl SpikeTensor {
    /// All-zero tensor of the given shape.
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        Ok(SpikeTensor {
            dims,
            data: vec![0.0; dims.numel()],
            requires_grad: false,
        })
    }

    /// Tensor with every element set to `value`.
    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        dims.validate()?;
        Ok(SpikeTensor {
            dims,
            data: vec![value; dims.numel()],
            requires_grad: false,
        })
    }

    /// Tensor wrapping an existing row-major buffer.
    pub fn from_vec(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.numel() {
            return Err(Error::Dimension(format!(
                "buffer length {} does not match dims {} ({} elements)",
                data.len(),
                dims,
                dims.numel()
            )));
        }
        Ok(SpikeTensor {
            dims,
            data,
            requires_grad: false,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.dims.index(t, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.dims.index(t, c, h, w);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Write the tensor as a TSTN file.
    pub fn save_tstn(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 4 + 16 + 1 + self.data.len() * 4);
        buf.extend_from_slice(&TSTN_MAGIC);
        buf.extend_from_slice(&TSTN_VERSION.to_le_bytes());
        for d in [self.dims.t, self.dims.c, self.dims.h, self.dims.w] {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {} exceeds u32", d)))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.push(0u8); // dtype 0 = f32 little-endian
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Read a tensor from a TSTN file, validating magic, version, dtype and
    /// payload length.
    pub fn load_tstn(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut reader = std::io::BufReader::new(file);

        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated TSTN header".into()))?;
        if magic != TSTN_MAGIC {
            return Err(Error::Format(format!("bad TSTN magic {:02x?}", magic)));
        }
        let version = read_u32(&mut reader)?;
        if version != TSTN_VERSION {
            return Err(Error::Format(format!("unsupported TSTN version {}", version)));
        }
        let t = read_u32(&mut reader)? as usize;
        let c = read_u32(&mut reader)? as usize;
        let h = read_u32(&mut reader)? as usize;
        let w = read_u32(&mut reader)? as usize;
        let mut dtype = [0u8; 1];
        reader
            .read_exact(&mut dtype)
            .map_err(|_| Error::Format("truncated TSTN header".into()))?;
        if dtype[0] != 0 {
            return Err(Error::Format(format!("unknown TSTN dtype code {}", dtype[0])));
        }
        let dims = Dims::new(t, c, h, w);
        dims.validate()
            .map_err(|_| Error::Format(format!("invalid TSTN dims {}", dims)))?;

        let mut payload = vec![0u8; dims.numel() * 4];
        reader
            .read_exact(&mut payload)
            .map_err(|_| Error::Format("truncated TSTN payload".into()))?;
        let mut tail = [0u8; 1];
        if reader.read(&mut tail)? != 0 {
            return Err(Error::Format("trailing bytes after TSTN payload".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        SpikeTensor::from_vec(dims, data)
    }
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    reader
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated TSTN header".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Write `data` little-endian f32s to `out` (used by the checkpoint writer).
pub(crate) fn write_f32_slice<W: Write>(out: &mut W, data: &[f32]) -> std::io::Result<()> {
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element_zero_tensor() {
        let t = SpikeTensor::filled(Dims::new(1, 1, 1, 1), 0.0).unwrap();
        assert_eq!(t.data(), &[0.0]);
    }

    #[test]
    fn fill_ones_sum() {
        let t = SpikeTensor::filled(Dims::new(2, 3, 4, 4), 1.0).unwrap();
        assert_eq!(t.data().len(), 96);
        assert_eq!(t.sum(), 96.0);
    }

    #[test]
    fn row_major_index() {
        // Row-major index oracle: t*C*H*W + c*H*W + h*W + w.
        let dims = Dims::new(2, 2, 1, 1);
        let t = SpikeTensor::from_vec(dims, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let oracle = |tt: usize, c: usize, h: usize, w: usize| {
            tt * dims.c * dims.h * dims.w + c * dims.h * dims.w + h * dims.w + w
        };
        assert_eq!(dims.index(1, 0, 0, 0), oracle(1, 0, 0, 0));
        assert_eq!(t.get(1, 0, 0, 0), 3.0);
    }

    #[test]
    fn buffer_length_mismatch_is_dimension_error() {
        let err = SpikeTensor::from_vec(Dims::new(2, 2, 1, 1), vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(SpikeTensor::zeros(Dims::new(0, 1, 1, 1)).is_err());
    }

    #[test]
    fn tstn_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tstn");
        let t = SpikeTensor::from_vec(Dims::new(2, 3, 1, 2), (0..12).map(|i| i as f32).collect())
            .unwrap();
        t.save_tstn(&path).unwrap();
        let back = SpikeTensor::load_tstn(&path).unwrap();
        assert_eq!(back, t);
        // A second save of the loaded tensor must be byte-identical.
        let path2 = dir.path().join("y.tstn");
        back.save_tstn(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn tstn_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tstn");
        let t = SpikeTensor::filled(Dims::new(1, 1, 2, 2), 1.5).unwrap();
        t.save_tstn(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            SpikeTensor::load_tstn(&path),
            Err(Error::Format(_))
        ));

        t.save_tstn(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            SpikeTensor::load_tstn(&path),
            Err(Error::Format(_))
        ));
    }
}
