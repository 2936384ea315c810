use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tolerance for symmetry checks on loaded matrices.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// The two connectome modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Structural connectivity.
    Sc,
    /// Functional network connectivity.
    Fnc,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Sc, Modality::Fnc];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Sc => "sc",
            Modality::Fnc => "fnc",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Modality {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" => Ok(Modality::Sc),
            "fnc" => Ok(Modality::Fnc),
            other => Err(CoreError::Parameter(format!(
                "unknown modality `{other}` (expected sc or fnc)"
            ))),
        }
    }
}

/// A square weighted adjacency matrix over `M` brain networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectomeMatrix {
    size: usize,
    values: Vec<f64>,
}

impl ConnectomeMatrix {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn new(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(CoreError::Parameter(format!(
                "{size}x{size} matrix needs {} values, got {}",
                size * size,
                values.len()
            )));
        }
        Ok(Self { size, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((r, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(CoreError::Parameter(format!(
                "row {} has {} columns, expected {n}",
                r + 1,
                row.len()
            )));
        }
        Self::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.size + j] = v;
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.set(i, j, v);
        self.set(j, i, v);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }

    /// First `(i, j)` with `|A[i,j] - A[j,i]| > tol`, if any.
    pub fn asymmetry(&self, tol: f64) -> Option<(usize, usize)> {
        for i in 0..self.size {
            for j in i + 1..self.size {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Checks the dataset invariants: finite entries, symmetry within
    /// [`SYMMETRY_TOL`], zero diagonal.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if let Some(p) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(format!(
                "non-finite entry at ({}, {})",
                p / self.size + 1,
                p % self.size + 1
            ));
        }
        if let Some((i, j)) = self.asymmetry(SYMMETRY_TOL) {
            return Err(format!(
                "not symmetric: A[{},{}] = {} but A[{},{}] = {}",
                i + 1,
                j + 1,
                self.get(i, j),
                j + 1,
                i + 1,
                self.get(j, i)
            ));
        }
        if let Some(i) = (0..self.size).find(|&i| self.get(i, i) != 0.0) {
            return Err(format!("non-zero diagonal at ({0}, {0})", i + 1));
        }
        Ok(())
    }

    /// Largest off-diagonal entry.
    pub fn max_off_diagonal(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for i in 0..self.size {
            for j in 0..self.size {
                if i != j {
                    m = m.max(self.get(i, j));
                }
            }
        }
        m
    }

    /// CSV text with 17 significant digits, so that values survive a
    /// write/read cycle bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 24);
        for i in 0..self.size {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses a headerless CSV of `M` rows by `M` columns.
    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let fmt_err = |detail: String| CoreError::Format {
            path: origin.to_path_buf(),
            detail,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| fmt_err(format!("row {}: {e}", r + 1)))?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(c, field)| {
                    field.parse::<f64>().map_err(|_| {
                        fmt_err(format!("row {}, column {}: `{field}` is not a number", r + 1, c + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(fmt_err(format!(
                        "row {} has {} columns, expected {}",
                        r + 1,
                        row.len(),
                        first.len()
                    )));
                }
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(fmt_err("empty matrix".into()));
        }
        if rows.len() != rows[0].len() {
            return Err(fmt_err(format!(
                "matrix is {}x{}, not square",
                rows.len(),
                rows[0].len()
            )));
        }
        Self::from_rows(&rows)
    }
}

/// Number of strictly-upper-triangular entries of an `m x m` matrix.
pub fn upper_len(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Position of `(i, j)` (either order, `i != j`) in the row-major list of
/// strictly-upper-triangular entries.
pub fn upper_index(m: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < m && j < m);
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * (2 * m - a - 1) / 2 + (b - a - 1)
}

/// Inverse of [`upper_index`].
pub fn upper_pairs(m: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(upper_len(m));
    for i in 0..m {
        for j in i + 1..m {
            out.push((i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upper_index_enumerates_pairs_in_order() {
        for m in 2..8 {
            for (k, (i, j)) in upper_pairs(m).into_iter().enumerate() {
                assert_eq!(upper_index(m, i, j), k);
                assert_eq!(upper_index(m, j, i), k);
            }
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut m = ConnectomeMatrix::zeros(3);
        m.set_sym(0, 1, 0.1 + 0.2);
        m.set_sym(0, 2, 1.0 / 3.0);
        m.set_sym(1, 2, 6.02e23);
        let back = ConnectomeMatrix::from_csv(&m.to_csv(), Path::new("m.csv")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ragged_row_is_reported_with_row_number() {
        let err = ConnectomeMatrix::from_csv("0,1,2\n1,0,2,5\n2,2,0\n", Path::new("bad.csv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("bad.csv") && err.contains("row 2"), "{err}");
    }

    #[test]
    fn non_square_is_rejected() {
        let err = ConnectomeMatrix::from_csv("0,1,2,3\n1,0,2,3\n2,2,0,3\n", Path::new("w.csv"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("3x4"), "{err}");
    }

    #[test]
    fn asymmetry_is_detected() {
        let m = ConnectomeMatrix::from_rows(&[
            vec![0.0, 0.5, 0.1],
            vec![0.5, 0.0, 0.3],
            vec![0.1, 0.3 + 1e-6, 0.0],
        ])
        .unwrap();
        assert!(m.validate().unwrap_err().contains("not symmetric"));
    }
}
