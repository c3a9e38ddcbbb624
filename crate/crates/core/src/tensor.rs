use crate::error::{Error, Result};

/// A named dense row-major `f32` array with 1 to 4 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    /// Builds a record, checking rank and that the shape product matches
    /// the number of values.
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = TensorRecord {
            name: name.into(),
            shape,
            data,
        };
        t.check_shape()?;
        Ok(t)
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub(crate) fn check_shape(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.len() > 4 {
            return Err(Error::InvalidShape {
                name: self.name.clone(),
                reason: format!("rank {} outside 1..=4", self.shape.len()),
            });
        }
        if self.shape.contains(&0) {
            return Err(Error::InvalidShape {
                name: self.name.clone(),
                reason: format!("zero-sized dimension in {:?}", self.shape),
            });
        }
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::SizeMismatch {
                name: self.name.clone(),
                shape: self.shape.clone(),
                expected,
                found: self.data.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                name: self.name.clone(),
                index,
            }),
            None => Ok(()),
        }
    }

    /// Number of values in one slice along axis 0.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Keeps the given indices along axis 0, in the given order.
    pub fn gather_axis0(&self, keep: &[usize]) -> TensorRecord {
        let mut data = Vec::with_capacity(keep.len() * self.row_len());
        for &i in keep {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = keep.len();
        TensorRecord {
            name: self.name.clone(),
            shape,
            data,
        }
    }

    /// Keeps the given indices along axis 1. Trailing axes move as blocks.
    pub fn gather_axis1(&self, keep: &[usize]) -> TensorRecord {
        assert!(self.shape.len() >= 2, "gather_axis1 on rank-1 tensor");
        let outer = self.shape[0];
        let mid = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * mid * inner;
            for &c in keep {
                let start = base + c * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = keep.len();
        TensorRecord {
            name: self.name.clone(),
            shape,
            data,
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes little-endian binary32 values. A byte count that is not a
    /// multiple of four is a size mismatch.
    pub fn from_le_bytes(name: &str, shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if !bytes.len().is_multiple_of(4) || bytes.len() / 4 != expected {
            return Err(Error::SizeMismatch {
                name: name.to_string(),
                shape,
                expected,
                found: bytes.len() / 4,
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        TensorRecord::new(name, shape, data)
    }
}
