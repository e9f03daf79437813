//! Dense row-major f64 tensors and the flat `TNSR` binary format.
//!
//! Image tensors are ordered (batch, channel, height, width). All compute is
//! 64-bit; the serialization format carries a dtype byte so 32-bit payloads
//! can be read (converted to f64) and written.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u8 = 1;
/// Dtype byte is the scalar width in bytes.
pub const DTYPE_F32: u8 = 4;
pub const DTYPE_F64: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} wants {numel} scalars, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True for shape [1] or a rank-0-equivalent single element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Interpret as (batch, channel, height, width).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::dim("tensor", format!("expected rank 4, got shape {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("tensor", format!("expected rank 2, got shape {:?}", self.shape))),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise check that every scalar is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    // ── TNSR serialization ───────────────────────────────────────────

    /// Layout: magic "TNSR", version byte, rank byte, extents as u64 LE,
    /// dtype byte (4=f32, 8=f64), then scalars LE.
    pub fn write_tnsr<W: Write>(&self, w: &mut W, dtype: u8) -> Result<()> {
        w.write_all(TNSR_MAGIC)?;
        w.write_all(&[TNSR_VERSION])?;
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::dim("tnsr", format!("rank {} exceeds format limit", self.shape.len())));
        }
        w.write_all(&[self.shape.len() as u8])?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        w.write_all(&[dtype])?;
        match dtype {
            DTYPE_F64 => {
                for &v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DTYPE_F32 => {
                for &v in &self.data {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            other => return Err(Error::dim("tnsr", format!("unknown dtype byte {other}"))),
        }
        Ok(())
    }

    pub fn read_tnsr<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TNSR_MAGIC {
            return Err(Error::Data(format!("bad TNSR magic {magic:?}")));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] != TNSR_VERSION {
            return Err(Error::Data(format!("unsupported TNSR version {}", byte[0])));
        }
        r.read_exact(&mut byte)?;
        let rank = byte[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut ext = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut ext)?;
            shape.push(u64::from_le_bytes(ext) as usize);
        }
        r.read_exact(&mut byte)?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match byte[0] {
            DTYPE_F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            DTYPE_F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            other => return Err(Error::Data(format!("unknown TNSR dtype byte {other}"))),
        }
        Tensor::new(shape, data)
    }

    pub fn save_tnsr(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_tnsr(&mut f, DTYPE_F64)
    }

    pub fn load_tnsr(path: &Path) -> Result<Tensor> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor::read_tnsr(&mut f)
    }
}

/// Flat index into a (b, c, h, w) tensor.
#[inline(always)]
pub fn idx4(c_ext: usize, h_ext: usize, w_ext: usize, b: usize, c: usize, h: usize, w: usize) -> usize {
    ((b * c_ext + c) * h_ext + h) * w_ext + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_error() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn tnsr_round_trip_f64() {
        let t = Tensor::new(vec![2, 3, 1], vec![1.0, -2.5, 3.25, 0.0, 1e-12, 7.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf, DTYPE_F64).unwrap();
        assert_eq!(&buf[..4], TNSR_MAGIC);
        let back = Tensor::read_tnsr(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tnsr_f32_payload_loads_as_f64() {
        let t = Tensor::new(vec![4], vec![0.5, 1.5, -2.0, 0.25]).unwrap();
        let mut buf = Vec::new();
        t.write_tnsr(&mut buf, DTYPE_F32).unwrap();
        let back = Tensor::read_tnsr(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[4]);
        // These values are exactly representable in f32.
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn tnsr_bad_magic_rejected() {
        let buf = b"NOPE\x01\x01".to_vec();
        assert!(Tensor::read_tnsr(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn binary_check() {
        assert!(Tensor::new(vec![3], vec![0.0, 1.0, 1.0]).unwrap().is_binary());
        assert!(!Tensor::new(vec![2], vec![0.0, 0.5]).unwrap().is_binary());
    }
}
