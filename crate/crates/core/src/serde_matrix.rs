//! Row-major serde representations for `nalgebra` matrices and vectors.
//!
//! Matrices are written as `{"shape": [rows, cols], "rows": [[...], ...]}` so
//! that zero-height and zero-width matrices survive a round trip.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
struct Shaped {
    shape: [usize; 2],
    rows: Vec<Vec<f64>>,
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds a matrix from rows; `cols` is used when there are no rows.
pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>, String> {
    let ncols = rows.first().map_or(cols, Vec::len);
    if let Some((k, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(format!("row {k} has {} entries, expected {ncols}", r.len()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    Shaped {
        shape: [m.nrows(), m.ncols()],
        rows: to_rows(m),
    }
    .serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
    let raw = Shaped::deserialize(d)?;
    let m = from_rows(&raw.rows, raw.shape[1]).map_err(D::Error::custom)?;
    if m.nrows() != raw.shape[0] || m.ncols() != raw.shape[1] {
        return Err(D::Error::custom(format!(
            "declared shape {:?} does not match data {}x{}",
            raw.shape,
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m)
}

pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
