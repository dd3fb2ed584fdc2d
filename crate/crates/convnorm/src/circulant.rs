//! Dense circulant materialization.
//!
//! Circulant (and doubly block-circulant) matrices are never built on the
//! main computation path; they exist so that frequency-domain results can
//! be checked against explicit matrix algebra. Construction goes through
//! cyclic shifts of the zero-padded kernel, deliberately avoiding any
//! Fourier transform, so the two routes stay independent.

use crate::error::{Error, Result};
use crate::fourier::{circular_convolve, ConvMode};
use crate::tensor::{zero_pad, Tensor};

/// Row-major dense matrix, used by the oracle and verification paths.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> DenseMatrix {
        assert!(rows > 0 && cols > 0, "matrix extents must be positive");
        DenseMatrix {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_entries(rows: usize, cols: usize, entries: Vec<f64>) -> Result<DenseMatrix> {
        if entries.len() != rows * cols {
            return Err(Error::Shape(format!(
                "entries length {} does not match {rows}×{cols}",
                entries.len()
            )));
        }
        Ok(DenseMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.entries[r * self.cols + c] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for (r, slot) in y.iter_mut().enumerate() {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            *slot = row.iter().zip(x).map(|(&m, &v)| m * v).sum();
        }
        y
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let lhs = self.get(r, k);
                if lhs == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    let v = out.get(r, c) + lhs * other.get(k, c);
                    out.set(r, c, v);
                }
            }
        }
        out
    }

    /// Largest |entry| of the difference with another matrix.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Concatenates blocks left to right. All blocks must share a row count.
    pub fn hconcat(blocks: &[DenseMatrix]) -> DenseMatrix {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        assert!(blocks.iter().all(|b| b.rows == rows));
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            for r in 0..rows {
                for c in 0..b.cols {
                    out.set(r, offset + c, b.get(r, c));
                }
            }
            offset += b.cols;
        }
        out
    }

    /// Stacks blocks top to bottom. All blocks must share a column count.
    pub fn vconcat(blocks: &[DenseMatrix]) -> DenseMatrix {
        assert!(!blocks.is_empty());
        let cols = blocks[0].cols;
        assert!(blocks.iter().all(|b| b.cols == cols));
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            for r in 0..b.rows {
                for c in 0..cols {
                    out.set(offset + r, c, b.get(r, c));
                }
            }
            offset += b.rows;
        }
        out
    }
}

/// Cyclic shift s_ℓ: output index i holds v[(i − ℓ) mod m]. ℓ may be any
/// integer; it is taken modulo the length.
pub fn cyclic_shift(v: &Tensor, ell: i64) -> Tensor {
    assert_eq!(v.rank(), 1, "cyclic_shift is defined on 1D tensors");
    let m = v.len();
    let shift = ell.rem_euclid(m as i64) as usize;
    let d = v.data();
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        out.push(d[(i + m - shift) % m]);
    }
    Tensor::new(vec![m], out).expect("permutation of a valid tensor")
}

/// Materializes the circulant operator of kernel `a` on signals with the
/// given extents. 1D: column k is cyclic_shift(zero-padded a, k). 2D: the
/// doubly block-circulant matrix acting on row-major vectorized grids,
/// built by the same shift rule on both axes.
pub fn build_circulant(a: &Tensor, extents: &[usize]) -> Result<DenseMatrix> {
    if a.rank() != extents.len() {
        return Err(Error::Argument(format!(
            "kernel rank {} does not match {} extents",
            a.rank(),
            extents.len()
        )));
    }
    for (axis, (&k, &e)) in a.shape().iter().zip(extents).enumerate() {
        if k > e {
            return Err(Error::Argument(format!(
                "kernel extent {k} exceeds signal extent {e} at axis {axis}"
            )));
        }
    }
    match extents {
        [m] => {
            let m = *m;
            let padded = zero_pad(a, &[(0, m - a.len())]);
            let mut mat = DenseMatrix::zeros(m, m);
            for col in 0..m {
                let shifted = cyclic_shift(&padded, col as i64);
                for (row, &v) in shifted.data().iter().enumerate() {
                    mat.set(row, col, v);
                }
            }
            Ok(mat)
        }
        [h, w] => {
            let (h, w) = (*h, *w);
            let (k1, k2) = (a.shape()[0], a.shape()[1]);
            let padded = zero_pad(a, &[(0, h - k1), (0, w - k2)]);
            let pd = padded.data();
            let n = h * w;
            let mut mat = DenseMatrix::zeros(n, n);
            for r1 in 0..h {
                for c1 in 0..w {
                    let row = r1 * w + c1;
                    for r2 in 0..h {
                        for c2 in 0..w {
                            let col = r2 * w + c2;
                            let v = pd[((r1 + h - r2) % h) * w + ((c1 + w - c2) % w)];
                            mat.set(row, col, v);
                        }
                    }
                }
            }
            Ok(mat)
        }
        other => Err(Error::Argument(format!(
            "circulant extents must be 1D or 2D, got {other:?}"
        ))),
    }
}

/// Max entrywise |C_a − F⁻¹ diag(Fa) F| for a 1D kernel on length-m
/// signals. The left side is built by cyclic shifts; the right side is
/// evaluated column by column as a spectral product against basis vectors.
pub fn verify_circulant_decomposition(a: &Tensor, m: usize) -> Result<f64> {
    let mat = build_circulant(a, &[m])?;
    let mut worst = 0.0f64;
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let basis = Tensor::new(vec![m], e)?;
        let col = circular_convolve(a, &basis, ConvMode::Fft)?;
        for (i, &v) in col.data().iter().enumerate() {
            worst = worst.max((mat.get(i, j) - v).abs());
        }
    }
    Ok(worst)
}
