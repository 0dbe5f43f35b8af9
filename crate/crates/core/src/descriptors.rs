//! Sets of local descriptors extracted from one item.

use crate::error::{Error, Result};

/// `count` local descriptors of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptorSet {
    count: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LocalDescriptorSet {
    pub fn new(count: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        if dim == 0 {
            return Err(Error::InvalidInput("descriptor dimension must be positive".into()));
        }
        if data.len() != count * dim {
            return Err(Error::DimensionMismatch {
                expected: count * dim,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite descriptor value at row {} col {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { count, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptyInput)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Concatenates two sets of the same dimension.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            count: self.count + other.count,
            dim: self.dim,
            data,
        })
    }
}
