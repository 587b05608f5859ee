//! Plain row-major f64 matrix for the non-learned paths (spectra, masks,
//! Doppler maps). Learned quantities live in [`crate::tensor`] instead.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(
                "Mat::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    /// `self * rhs` using the same GEMM backend as the tensor module.
    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "Mat::matmul",
                lhs: vec![self.rows, self.cols],
                rhs: vec![rhs.rows, rhs.cols],
            });
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        crate::tensor::gemm::dgemm(
            self.rows,
            self.cols,
            rhs.cols,
            1.0,
            &self.data,
            &rhs.data,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// `self * rhs^T`.
    pub fn matmul_transpose(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.cols {
            return Err(Error::ShapeMismatch {
                op: "Mat::matmul_transpose",
                lhs: vec![self.rows, self.cols],
                rhs: vec![rhs.rows, rhs.cols],
            });
        }
        let mut out = Mat::zeros(self.rows, rhs.rows);
        crate::tensor::gemm::dgemm_nt(
            self.rows,
            self.cols,
            rhs.rows,
            1.0,
            &self.data,
            &rhs.data,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Element-wise `self + s * other`.
    pub fn add_scaled(&self, other: &Mat, s: f64) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "Mat::add_scaled",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + s * b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bilinear resampling to `(th, tw)` with corner-aligned grids: output
    /// corners map exactly onto input corners, so the sampled extent is
    /// preserved (matters for azimuth/range bin geometry).
    pub fn resize_bilinear(&self, th: usize, tw: usize) -> Mat {
        let mut out = Mat::zeros(th, tw);
        let sr = if th > 1 {
            (self.rows - 1) as f64 / (th - 1) as f64
        } else {
            0.0
        };
        let sc = if tw > 1 {
            (self.cols - 1) as f64 / (tw - 1) as f64
        } else {
            0.0
        };
        for i in 0..th {
            let fi = i as f64 * sr;
            let i0 = (fi.floor() as usize).min(self.rows - 1);
            let i1 = (i0 + 1).min(self.rows - 1);
            let wi = fi - i0 as f64;
            for j in 0..tw {
                let fj = j as f64 * sc;
                let j0 = (fj.floor() as usize).min(self.cols - 1);
                let j1 = (j0 + 1).min(self.cols - 1);
                let wj = fj - j0 as f64;
                let v = self.get(i0, j0) * (1.0 - wi) * (1.0 - wj)
                    + self.get(i1, j0) * wi * (1.0 - wj)
                    + self.get(i0, j1) * (1.0 - wi) * wj
                    + self.get(i1, j1) * wi * wj;
                out.set(i, j, v);
            }
        }
        out
    }
}

/// Linear interpolation of a strictly increasing table at fractional index `x`
/// (clamped to the table ends).
pub fn interp_index(table: &[f64], x: f64) -> f64 {
    if table.len() == 1 {
        return table[0];
    }
    let x = x.clamp(0.0, (table.len() - 1) as f64);
    let i0 = (x.floor() as usize).min(table.len() - 2);
    let f = x - i0 as f64;
    table[i0] * (1.0 - f) + table[i0 + 1] * f
}

/// Corner-aligned linear resampling of a table to `n` entries.
pub fn resample_table(table: &[f64], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![table[0]];
    }
    let s = (table.len() - 1) as f64 / (n - 1) as f64;
    (0..n).map(|i| interp_index(table, i as f64 * s)).collect()
}
