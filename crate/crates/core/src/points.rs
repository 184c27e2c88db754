//! Dense row-major point sets and the read-only vector source abstraction.

use crate::{Error, Result};

/// Anything that can hand out fixed-dimension vectors by index.
///
/// Implemented by in-memory [`Points`] and by memory-mapped
/// [`FeatureStore`](crate::FeatureStore)s, so training and scoring can stream
/// over stores that do not fit in memory as `f64`.
pub trait VectorSource: Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    /// Copies vector `index` into `out`, widening to `f64`.
    fn read_into(&self, index: usize, out: &mut [f64]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read(&self, index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.read_into(index, &mut out);
        out
    }

    /// Gathers the given rows into a dense point set.
    fn gather(&self, indices: &[usize]) -> Points {
        let dim = self.dim();
        let mut data = vec![0.0; indices.len() * dim];
        for (row, &i) in data.chunks_exact_mut(dim.max(1)).zip(indices) {
            self.read_into(i, row);
        }
        Points { dim, data }
    }

    fn to_points(&self) -> Points {
        let all: Vec<usize> = (0..self.len()).collect();
        self.gather(&all)
    }
}

/// Row-major set of `f64` points sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize) -> Self {
        Points {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len() % dim,
            });
        }
        Ok(Points { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::empty("no rows"))?;
        let mut points = Points::new(dim);
        for r in rows {
            points.push(r.as_ref())?;
        }
        Ok(points)
    }

    /// One-dimensional points from scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        Points {
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, indices: &[usize]) -> Points {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Points {
            dim: self.dim,
            data,
        }
    }

    /// Concatenates point sets of a common dimension.
    pub fn concat(parts: &[&Points]) -> Result<Points> {
        let dim = parts
            .first()
            .map(|p| p.dim)
            .ok_or_else(|| Error::empty("no point sets"))?;
        let mut data = Vec::new();
        for p in parts {
            if p.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.dim,
                });
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Points { dim, data })
    }

    /// Applies `f` to every coordinate.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Points {
        Points {
            dim: self.dim,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl VectorSource for Points {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        Points::len(self)
    }

    fn read_into(&self, index: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(index));
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::DimensionMismatch { expected, got })
    } else {
        Ok(())
    }
}

/// Sums values in a fixed pairwise (tree) order, independent of how the
/// inputs were produced.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
