//! Dense row-major `f64` tensors and their binary serialization.
//!
//! Binary block layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "DCST"
//! version u32      1
//! rank    u32
//! dims    u64 * rank
//! dtype   u8       0 = f64, 1 = f32
//! data    numel * sizeof(dtype)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DCST";
pub const TENSOR_FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", &shape, "dimensions must be positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                &shape,
                format!("expected {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data under a new shape with identical element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// The `i`-th slice along the leading axis.
    pub fn index_first(&self, i: usize) -> Result<Self> {
        let n = *self.shape.first().unwrap_or(&1);
        if i >= n {
            return Err(Error::Index {
                op: "index_first",
                index: i,
                bound: n,
            });
        }
        let inner: Vec<usize> = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        let len: usize = inner.iter().product();
        Ok(Self {
            shape: inner,
            data: self.data[i * len..(i + 1) * len].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F64])?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one tensor block. `context` names the source in error messages.
    pub fn read_from<R: Read>(r: &mut R, context: &str) -> Result<Self> {
        let mut reader = CountingReader { inner: r, offset: 0 };
        let fmt = |offset: usize, reason: String| Error::Format {
            context: context.to_string(),
            offset,
            reason,
        };

        let magic: [u8; 4] = reader.read_array().map_err(|e| fmt(reader.offset, e))?;
        if &magic != TENSOR_MAGIC {
            return Err(fmt(0, format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(reader.read_array().map_err(|e| fmt(reader.offset, e))?);
        if version != TENSOR_FORMAT_VERSION {
            return Err(Error::Version {
                what: "tensor block",
                found: version,
                expected: TENSOR_FORMAT_VERSION,
            });
        }
        let rank = u32::from_le_bytes(reader.read_array().map_err(|e| fmt(reader.offset, e))?);
        if rank > 16 {
            return Err(fmt(8, format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let at = reader.offset;
            let d = u64::from_le_bytes(reader.read_array().map_err(|e| fmt(reader.offset, e))?);
            if d == 0 || d > (1 << 40) {
                return Err(fmt(at, format!("invalid dimension {d}")));
            }
            shape.push(d as usize);
        }
        let at = reader.offset;
        let [dtype] = reader.read_array::<1>().map_err(|e| fmt(reader.offset, e))?;
        let numel: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F64 => {
                let bytes = reader.read_vec(numel * 8).map_err(|e| fmt(reader.offset, e))?;
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            DTYPE_F32 => {
                let bytes = reader.read_vec(numel * 4).map_err(|e| fmt(reader.offset, e))?;
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            other => return Err(fmt(at, format!("unknown dtype tag {other}"))),
        };
        Tensor::new(shape, data)
    }
}

struct CountingReader<'a, R: Read> {
    inner: &'a mut R,
    offset: usize,
}

impl<R: Read> CountingReader<'_, R> {
    fn read_array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        let mut buf = [0u8; N];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn read_vec(&mut self, n: usize) -> std::result::Result<Vec<u8>, String> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8]) -> std::result::Result<(), String> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    self.offset += got;
                    return Err(format!("truncated: needed {} more bytes", buf.len() - got));
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.to_string()),
            }
        }
        self.offset += got;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_element_count_mismatch() {
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::new([2], vec![1.0, -2.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[0..4], b"DCST");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        assert_eq!(bytes[20], 0);
        assert_eq!(f64::from_le_bytes(bytes[21..29].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 21 + 16);
    }

    #[test]
    fn reads_f32_blocks() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DCST");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.push(1);
        bytes.extend_from_slice(&0.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-4.0f32).to_le_bytes());
        let t = Tensor::read_from(&mut bytes.as_slice(), "fixture").unwrap();
        assert_eq!(t.shape(), &[1, 2]);
        assert_eq!(t.data(), &[0.5, -4.0]);
    }

    #[test]
    fn truncated_block_reports_offset() {
        let bytes = Tensor::full([4], 1.0).to_bytes();
        let err = Tensor::read_from(&mut &bytes[..bytes.len() - 3], "cut").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, bytes.len() - 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn stack_adds_leading_axis() {
        let a = Tensor::full([2, 2], 1.0);
        let b = Tensor::full([2, 2], 2.0);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index_first(1).unwrap(), b);
    }
}
