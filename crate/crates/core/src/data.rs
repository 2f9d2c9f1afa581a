//! Row-major matrices, datasets and CSV input/output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
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
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    /// A single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Covariates in `[0,1]^q` plus an optional response matrix. A dataset
/// without a response defines a prior-only target (zero log-likelihood).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Option<Matrix>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows vs {} response rows",
                x.rows(),
                y.rows()
            )));
        }
        Ok(Dataset { x, y: Some(y) })
    }

    pub fn covariates_only(x: Matrix) -> Self {
        Dataset { x, y: None }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn q(&self) -> usize {
        self.x.cols()
    }
}

/// Per-column affine map onto `[0,1]`; identity columns have `min = 0, max = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub columns: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    /// Columns already inside `[0,1]` are left alone; others are min-max scaled.
    pub fn fit(columns: Vec<String>, x: &Matrix) -> Self {
        let q = x.cols();
        let mut min = vec![0.0; q];
        let mut max = vec![1.0; q];
        for j in 0..q {
            let (lo, hi) = x
                .iter_rows()
                .map(|r| r[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if lo < 0.0 || hi > 1.0 {
                min[j] = lo;
                max[j] = if hi > lo { hi } else { lo + 1.0 };
            }
        }
        Scaling { columns, min, max }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.min.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} covariates, got {}",
                self.min.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = ((*v - self.min[j]) / (self.max[j] - self.min[j])).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

/// A CSV file with a header row and numeric cells.
#[derive(Clone, Debug)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| {
                        Error::Parse(format!("{}: row {}: bad number {c:?}", path.display(), line + 2))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(CsvTable { headers, rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Splits into covariate and response columns. Responses are the column
    /// named `y` or the columns `y1..yp`; every other column is a covariate.
    pub fn split_response(&self) -> Result<(Vec<String>, Matrix, Option<Matrix>)> {
        let is_response = |h: &str| {
            h == "y" || (h.len() > 1 && h.starts_with('y') && h[1..].chars().all(|c| c.is_ascii_digit()))
        };
        let mut resp: Vec<(usize, usize)> = self
            .headers
            .iter()
            .enumerate()
            .filter(|(_, h)| is_response(h))
            .map(|(j, h)| (h[1..].parse::<usize>().unwrap_or(0), j))
            .collect();
        resp.sort();
        let cov: Vec<usize> = (0..self.headers.len())
            .filter(|j| !is_response(&self.headers[*j]))
            .collect();
        let pick = |cols: &[usize]| -> Result<Matrix> {
            let rows: Vec<Vec<f64>> = self
                .rows
                .iter()
                .map(|r| cols.iter().map(|&j| r[j]).collect())
                .collect();
            if rows.is_empty() {
                return Ok(Matrix::zeros(0, cols.len()));
            }
            Matrix::from_rows(&rows)
        };
        let x = pick(&cov)?;
        let y = if resp.is_empty() {
            None
        } else {
            let cols: Vec<usize> = resp.iter().map(|(_, j)| *j).collect();
            Some(pick(&cols)?)
        };
        let names = cov.iter().map(|&j| self.headers[j].clone()).collect();
        Ok((names, x, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_response_finds_y_columns() {
        let t = CsvTable {
            headers: vec!["a".into(), "y2".into(), "b".into(), "y1".into()],
            rows: vec![vec![0.1, 1.0, 0.2, 0.0], vec![0.3, 0.0, 0.4, 1.0]],
        };
        let (names, x, y) = t.split_response().unwrap();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(x.row(1), &[0.3, 0.4]);
        assert_eq!(y.unwrap().row(0), &[0.0, 1.0]);
    }

    #[test]
    fn scaling_leaves_unit_columns_alone() {
        let x = Matrix::from_rows(&[vec![0.2, 10.0], vec![0.4, 30.0]]).unwrap();
        let s = Scaling::fit(vec!["a".into(), "b".into()], &x);
        let z = s.apply(&x).unwrap();
        assert_eq!(z.row(0), &[0.2, 0.0]);
        assert_eq!(z.row(1), &[0.4, 1.0]);
    }
}
