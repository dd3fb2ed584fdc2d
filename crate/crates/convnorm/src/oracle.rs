//! Slow reference routes used to check the fast paths.
//!
//! Everything here trades speed for transparency: the DFT is the literal
//! O(n²) double sum, and the channel operators are materialized as dense
//! matrices (via cyclic shifts, no Fourier transforms) and handled with
//! dense eigenvalue / SVD factorizations. None of these functions appear
//! on the main computation path; they back the verification suite and the
//! equivalence tests.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::circulant::{build_circulant, DenseMatrix};
use crate::error::{Error, Result};
use crate::fourier::FreqGrid;
use crate::tensor::KernelStack;

/// Direct-sum DFT under the crate convention (forward F, inverse n⁻¹F*).
/// 2D grids use the full double sum over both axes rather than separable
/// passes, keeping this route independent of the fast transform.
pub fn naive_dft(f: &FreqGrid, inverse: bool) -> FreqGrid {
    let (h, w) = match f.shape() {
        [n] => (1usize, *n),
        [h, w] => (*h, *w),
        other => panic!("naive transform is 1D or 2D, got shape {other:?}"),
    };
    let sign = if inverse { 1.0 } else { -1.0 };
    let n = h * w;
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    let (re_in, im_in) = (f.re(), f.im());
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k1 in 0..h {
        for k2 in 0..w {
            let (mut acc_re, mut acc_im) = (0.0f64, 0.0f64);
            for n1 in 0..h {
                for n2 in 0..w {
                    let angle = sign
                        * 2.0
                        * std::f64::consts::PI
                        * ((k1 * n1) as f64 / h as f64 + (k2 * n2) as f64 / w as f64);
                    let (s, c) = angle.sin_cos();
                    let v_re = re_in[n1 * w + n2];
                    let v_im = im_in[n1 * w + n2];
                    acc_re += v_re * c - v_im * s;
                    acc_im += v_re * s + v_im * c;
                }
            }
            re[k1 * w + k2] = acc_re * scale;
            im[k1 * w + k2] = acc_im * scale;
        }
    }
    FreqGrid::new(f.shape().to_vec(), re, im).expect("shape is preserved")
}

/// A_k = [C_{a_k1} | C_{a_k2} | …]: the channel's stacked circulant
/// blocks, n × (C_I·n) for n = h·w.
pub fn dense_frame_matrix(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
) -> Result<DenseMatrix> {
    if k >= kernels.c_out() {
        return Err(Error::Argument(format!(
            "channel {k} out of range for c_out {}",
            kernels.c_out()
        )));
    }
    let shape = [extents.0, extents.1];
    let blocks: Vec<DenseMatrix> = (0..kernels.c_in())
        .map(|j| build_circulant(&kernels.kernel(k, j), &shape))
        .collect::<Result<_>>()?;
    Ok(DenseMatrix::hconcat(&blocks))
}

/// The full layer operator: channel frame matrices stacked top to bottom,
/// (C_O·n) × (C_I·n).
pub fn dense_layer_matrix(kernels: &KernelStack, extents: (usize, usize)) -> Result<DenseMatrix> {
    let rows: Vec<DenseMatrix> = (0..kernels.c_out())
        .map(|k| dense_frame_matrix(kernels, k, extents))
        .collect::<Result<_>>()?;
    Ok(DenseMatrix::vconcat(&rows))
}

fn to_nalgebra(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.entries())
}

fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.set(r, c, m[(r, c)]);
        }
    }
    out
}

/// P_k = (A_kA_kᵀ + εI)^{−1/2}, computed by symmetric eigendecomposition
/// of the dense Gram matrix. Errors if a shifted eigenvalue is not
/// safely positive, since the inverse square root is then undefined.
pub fn dense_preconditioner(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
    eps: f64,
) -> Result<DenseMatrix> {
    let a = dense_frame_matrix(kernels, k, extents)?;
    let na = to_nalgebra(&a);
    let mut gram = &na * na.transpose();
    for i in 0..gram.nrows() {
        gram[(i, i)] += eps;
    }
    let eig = SymmetricEigen::new(gram);
    let floor = crate::SPECTRAL_FLOOR * crate::SPECTRAL_FLOOR;
    let mut inv_sqrt = Vec::with_capacity(eig.eigenvalues.len());
    for &lambda in eig.eigenvalues.iter() {
        if lambda <= floor {
            return Err(Error::Argument(format!(
                "channel {k} operator is singular (eigenvalue {lambda:e} with eps = {eps:e})"
            )));
        }
        inv_sqrt.push(1.0 / lambda.sqrt());
    }
    let v = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(inv_sqrt));
    let p = v * d * v.transpose();
    Ok(from_nalgebra(&p))
}

/// Q_k = P_kA_k: the dense normalized channel operator. Its blocks are
/// the circulants of the reparametrized kernels at full extents.
pub fn dense_normalized_channel(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
    eps: f64,
) -> Result<DenseMatrix> {
    let a = dense_frame_matrix(kernels, k, extents)?;
    let p = dense_preconditioner(kernels, k, extents, eps)?;
    Ok(p.matmul(&a))
}

/// Singular values of a dense matrix, sorted descending.
pub fn dense_singular_values(m: &DenseMatrix) -> Vec<f64> {
    let svd = to_nalgebra(m).svd(false, false);
    let mut values: Vec<f64> = svd.singular_values.iter().copied().collect();
    values.sort_unstable_by(|a, b| b.total_cmp(a));
    values
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn direct_sum_transform_matches_hand_values() {
        let t = Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let f = naive_dft(&FreqGrid::from_real(&t), false);
        let expect = [(2.0, 0.0), (1.0, -1.0), (0.0, 0.0), (1.0, 1.0)];
        for (k, (re, im)) in expect.iter().enumerate() {
            assert!((f.re()[k] - re).abs() < 1e-12);
            assert!((f.im()[k] - im).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_sum_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![3, 4], data.clone()).unwrap();
        let back = naive_dft(&naive_dft(&FreqGrid::from_real(&t), false), true);
        for (p, q) in back.re().iter().zip(&data) {
            assert!((p - q).abs() < 1e-12);
        }
        for v in back.im() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn frame_matrix_of_deltas_concatenates_identities() {
        let ks = KernelStack::from_parts(1, 2, 1, 1, vec![1.0, 1.0]).unwrap();
        let a = dense_frame_matrix(&ks, 0, (2, 2)).unwrap();
        assert_eq!((a.rows(), a.cols()), (4, 8));
        let expect = DenseMatrix::hconcat(&[DenseMatrix::identity(4), DenseMatrix::identity(4)]);
        assert_eq!(a, expect);
    }

    #[test]
    fn layer_matrix_has_block_shape() {
        let ks = KernelStack::from_parts(2, 3, 2, 2, (0..24).map(|v| v as f64).collect()).unwrap();
        let q = dense_layer_matrix(&ks, (4, 4)).unwrap();
        assert_eq!((q.rows(), q.cols()), (32, 48));
    }

    #[test]
    fn preconditioner_of_delta_is_identity() {
        let ks = KernelStack::from_parts(1, 1, 1, 1, vec![1.0]).unwrap();
        let p = dense_preconditioner(&ks, 0, (3, 3), 0.0).unwrap();
        assert!(p.max_abs_diff(&DenseMatrix::identity(9)) < 1e-12);
    }

    #[test]
    fn normalized_channel_is_a_tight_frame() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let data: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ks = KernelStack::from_parts(1, 2, 3, 3, data).unwrap();
        let q = dense_normalized_channel(&ks, 0, (5, 5), 0.0).unwrap();
        let gram = q.matmul(&q.transpose());
        assert!(gram.max_abs_diff(&DenseMatrix::identity(25)) < 1e-10);
    }

    #[test]
    fn singular_values_of_identity_blocks() {
        let m = DenseMatrix::hconcat(&[DenseMatrix::identity(3), DenseMatrix::identity(3)]);
        let sv = dense_singular_values(&m);
        assert_eq!(sv.len(), 3);
        for v in sv {
            assert!((v - 2.0f64.sqrt()).abs() < 1e-12);
        }
    }
}
