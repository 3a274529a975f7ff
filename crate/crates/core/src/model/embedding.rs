use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionRecord;
use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Affine map lifting one numeric feature into the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericMap {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-field embedding tables: one `v_A x d` matrix per categorical field and
/// one affine map per numeric field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub categorical: Vec<Matrix>,
    pub numeric: Vec<NumericMap>,
}

impl EmbeddingTable {
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.categorical.iter().map(|m| m.rows).collect()
    }

    /// All categorical rows stacked over the global feature index.
    pub fn global_matrix(&self) -> Matrix {
        let rows = self.categorical.iter().map(|m| m.rows).sum();
        let data = self
            .categorical
            .iter()
            .flat_map(|m| m.data.iter().copied())
            .collect();
        Matrix {
            rows,
            cols: self.dim,
            data,
        }
    }
}

/// Uniform initialization in `(-1/sqrt(d), 1/sqrt(d))`.
pub(crate) fn init_uniform(values: &mut [f64], dim: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (dim as f64).sqrt();
    for v in values {
        *v = rng.random_range(-bound..bound);
    }
}

/// Field vectors for one record: average pooling over the ids of each
/// categorical field, `weight * x + bias` for each numeric field.
pub fn embed_lookup(record: &InteractionRecord, table: &EmbeddingTable) -> Result<Vec<Vec<f64>>> {
    if record.categorical.len() != table.categorical.len() || record.numeric.len() != table.numeric.len() {
        return Err(Error::DimensionMismatch(format!(
            "record has {}+{} fields, table has {}+{}",
            record.categorical.len(),
            record.numeric.len(),
            table.categorical.len(),
            table.numeric.len()
        )));
    }
    let mut out = Vec::with_capacity(record.categorical.len() + record.numeric.len());
    for (field, (ids, matrix)) in record.categorical.iter().zip(&table.categorical).enumerate() {
        if ids.is_empty() {
            return Err(Error::InvalidInput(format!("field {field} has no feature ids")));
        }
        let mut v = vec![0.0; table.dim];
        for &id in ids {
            if id as usize >= matrix.rows {
                return Err(Error::IdOutOfRange {
                    field,
                    id,
                    size: matrix.rows,
                });
            }
            for (acc, x) in v.iter_mut().zip(matrix.row(id as usize)) {
                *acc += x;
            }
        }
        let k = ids.len() as f64;
        v.iter_mut().for_each(|x| *x /= k);
        out.push(v);
    }
    for (&x, map) in record.numeric.iter().zip(&table.numeric) {
        out.push(map.weight.iter().zip(&map.bias).map(|(w, b)| w * x + b).collect());
    }
    Ok(out)
}
