//! DFT convention and convolution family.
//!
//! The transform convention is fixed once for the whole crate: the
//! forward transform is the unnormalized DFT matrix F (so a length-n
//! signal picks up no scale factor), and the inverse applies n⁻¹F*.
//! Under this convention a circulant operator factors as
//! C_a = F⁻¹ diag(Fa) F, circular convolution is entrywise spectral
//! multiplication, and Parseval reads Σ|v|² = n⁻¹ Σ|v̂|².
//!
//! 2D transforms are separable: rows then columns; the inverse scale is
//! then (H·W)⁻¹. 1D data is the W = 1 (or H = 1) special case of the
//! same code paths.

use std::cell::RefCell;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{zero_pad, Tensor};

/// A complex grid over 1D or 2D spatial extents, stored as separate
/// real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqGrid {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl FreqGrid {
    pub fn new(shape: impl Into<Vec<usize>>, re: Vec<f64>, im: Vec<f64>) -> Result<FreqGrid> {
        let shape = shape.into();
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!(
                "frequency grid rank must be 1 or 2, got {}",
                shape.len()
            )));
        }
        if let Some(pos) = shape.iter().position(|&e| e == 0) {
            return Err(Error::Shape(format!("extent 0 at axis {pos}")));
        }
        let expected: usize = shape.iter().product();
        if re.len() != expected || im.len() != expected {
            return Err(Error::Shape(format!(
                "re/im lengths ({}, {}) do not match shape {:?}",
                re.len(),
                im.len(),
                shape
            )));
        }
        Ok(FreqGrid { shape, re, im })
    }

    /// Lifts a real tensor (rank 1 or 2) into a complex grid.
    pub fn from_real(t: &Tensor) -> FreqGrid {
        assert!(t.rank() <= 2, "frequency grids are 1D or 2D");
        FreqGrid {
            shape: t.shape().to_vec(),
            re: t.data().to_vec(),
            im: vec![0.0; t.len()],
        }
    }

    pub fn from_complex(shape: impl Into<Vec<usize>>, values: &[Complex<f64>]) -> FreqGrid {
        let shape = shape.into();
        assert_eq!(shape.iter().product::<usize>(), values.len());
        FreqGrid {
            shape,
            re: values.iter().map(|c| c.re).collect(),
            im: values.iter().map(|c| c.im).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are positive
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn to_complex(&self) -> Vec<Complex<f64>> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex::new(r, i))
            .collect()
    }

    /// Exports as a (re, im) tensor pair for CNT1 inspection.
    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            Tensor::new(self.shape.clone(), self.re.clone())?,
            Tensor::new(self.shape.clone(), self.im.clone())?,
        ))
    }

    /// Entrywise complex product.
    pub fn mul(&self, other: &FreqGrid) -> FreqGrid {
        assert_eq!(
            self.shape, other.shape,
            "shape mismatch in spectral product"
        );
        let mut re = Vec::with_capacity(self.len());
        let mut im = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            re.push(self.re[k] * other.re[k] - self.im[k] * other.im[k]);
            im.push(self.re[k] * other.im[k] + self.im[k] * other.re[k]);
        }
        FreqGrid {
            shape: self.shape.clone(),
            re,
            im,
        }
    }

    /// Entrywise product with a real spectrum.
    pub fn mul_real(&self, weights: &[f64]) -> FreqGrid {
        assert_eq!(self.len(), weights.len(), "length mismatch in real scaling");
        FreqGrid {
            shape: self.shape.clone(),
            re: self.re.iter().zip(weights).map(|(&v, &w)| v * w).collect(),
            im: self.im.iter().zip(weights).map(|(&v, &w)| v * w).collect(),
        }
    }

    pub fn conj(&self) -> FreqGrid {
        FreqGrid {
            shape: self.shape.clone(),
            re: self.re.clone(),
            im: self.im.iter().map(|&v| -v).collect(),
        }
    }

    /// |·|² per entry.
    pub fn abs2(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| r * r + i * i)
            .collect()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_pass(buf: &mut [Complex<f64>], len: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let fft = if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        };
        drop(planner);
        fft.process(buf);
    });
}

/// In-place separable transform of a row-major (h, w) complex buffer.
/// Forward is unnormalized; inverse applies the 1/(h·w) scale here so
/// callers never see a half-scaled spectrum.
fn transform_grid(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len(), h * w);
    if w > 1 {
        fft_pass(buf, w, inverse); // all rows in one pass
    }
    if h > 1 {
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                col[r] = buf[r * w + c];
            }
            fft_pass(&mut col, h, inverse);
            for r in 0..h {
                buf[r * w + c] = col[r];
            }
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

fn grid_extents(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [h, w] => (*h, *w),
        other => panic!("frequency transforms are 1D or 2D, got shape {other:?}"),
    }
}

/// Unnormalized forward DFT of a real tensor (rank 1 or 2).
pub fn dft(t: &Tensor) -> FreqGrid {
    dft_grid(&FreqGrid::from_real(t), false)
}

/// General complex transform under the crate convention: forward is F,
/// inverse is n⁻¹F*.
pub fn dft_grid(f: &FreqGrid, inverse: bool) -> FreqGrid {
    let (h, w) = grid_extents(f.shape());
    let mut buf = f.to_complex();
    transform_grid(&mut buf, h, w, inverse);
    FreqGrid::from_complex(f.shape().to_vec(), &buf)
}

/// Inverse DFT returning the real plane. Intended for conjugate-symmetric
/// spectra (transforms of real data), where the imaginary part is
/// roundoff; it is discarded.
pub fn idft(f: &FreqGrid) -> Tensor {
    let inv = dft_grid(f, true);
    Tensor::new(inv.shape().to_vec(), inv.re().to_vec())
        .expect("inverse transform of finite data is finite")
}

/// How circular convolution is evaluated: by the modulo-index sum or by
/// pointwise spectral multiplication. The two must agree to 1e−10 and the
/// test suite holds them to it; neither route is defined in terms of the
/// other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Direct,
    Fft,
}

fn check_conv_extents(a: &Tensor, x: &Tensor) -> Result<()> {
    if a.rank() != x.rank() {
        return Err(Error::Argument(format!(
            "kernel rank {} does not match signal rank {}",
            a.rank(),
            x.rank()
        )));
    }
    for (axis, (&ka, &kx)) in a.shape().iter().zip(x.shape()).enumerate() {
        if ka > kx {
            return Err(Error::Argument(format!(
                "kernel extent {ka} exceeds signal extent {kx} at axis {axis}"
            )));
        }
    }
    Ok(())
}

/// Circular convolution y = a ∗ x at x's extents, with a zero-padded to
/// match: y_i = Σ_t a_t x_{(i−t) mod n} per axis.
pub fn circular_convolve(a: &Tensor, x: &Tensor, mode: ConvMode) -> Result<Tensor> {
    check_conv_extents(a, x)?;
    let (h, w) = grid_extents(x.shape());
    let (kh, kw) = grid_extents(a.shape());
    match mode {
        ConvMode::Direct => {
            let xd = x.data();
            let ad = a.data();
            let mut out = vec![0.0; x.len()];
            for i1 in 0..h {
                for i2 in 0..w {
                    let mut acc = 0.0;
                    for t1 in 0..kh {
                        let r = (i1 + h - t1) % h;
                        for t2 in 0..kw {
                            let c = (i2 + w - t2) % w;
                            acc += ad[t1 * kw + t2] * xd[r * w + c];
                        }
                    }
                    out[i1 * w + i2] = acc;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        ConvMode::Fft => {
            let a_pad = pad_to_extents(a, x.shape());
            let product = dft(&a_pad).mul(&dft(x));
            let y = idft(&product);
            Tensor::new(x.shape().to_vec(), y.into_data())
        }
    }
}

/// Zero-pads `a` on the right of each axis up to `extents`.
pub fn pad_to_extents(a: &Tensor, extents: &[usize]) -> Tensor {
    let pads: Vec<(usize, usize)> = a
        .shape()
        .iter()
        .zip(extents)
        .map(|(&k, &e)| (0, e - k))
        .collect();
    zero_pad(a, &pads)
}

/// Full linear convolution of 1D signals: output length n + m − 1.
/// Equals circular convolution after zero-padding both inputs to n + m − 1.
pub fn linear_convolve_full(a: &Tensor, x: &Tensor) -> Result<Tensor> {
    if a.rank() != 1 || x.rank() != 1 {
        return Err(Error::Argument(
            "full linear convolution is defined on 1D tensors".to_string(),
        ));
    }
    let m = a.len();
    let n = x.len();
    let ad = a.data();
    let xd = x.data();
    let mut out = vec![0.0; n + m - 1];
    for (i, slot) in out.iter_mut().enumerate() {
        // Ascending signal index; summation order matters for the exact
        // agreement with cross_correlate on a reversed kernel.
        let lo = i.saturating_sub(m - 1);
        let hi = i.min(n - 1);
        let mut acc = 0.0;
        for u in lo..=hi {
            acc += ad[i - u] * xd[u];
        }
        *slot = acc;
    }
    Tensor::new(vec![n + m - 1], out)
}

/// Sliding-window inner product with the unflipped kernel, stride 1,
/// after zero-padding x by `pad` on each side. Output length
/// n + 2·pad − m + 1. With pad = m − 1 this equals full linear
/// convolution with the reversed kernel, term for term.
pub fn cross_correlate(a: &Tensor, x: &Tensor, pad: usize) -> Result<Tensor> {
    if a.rank() != 1 || x.rank() != 1 {
        return Err(Error::Argument(
            "1D cross-correlation requires 1D tensors".to_string(),
        ));
    }
    let m = a.len();
    let n = x.len();
    let padded = n + 2 * pad;
    if padded < m {
        return Err(Error::Argument(format!(
            "padded length {padded} is shorter than the kernel length {m}"
        )));
    }
    let ad = a.data();
    let xd = x.data();
    let out_len = padded - m + 1;
    let mut out = vec![0.0; out_len];
    for (i, slot) in out.iter_mut().enumerate() {
        // Window position i covers padded indices i..i+m; padded index u
        // maps to signal index u − pad. Terms outside the signal are 0
        // and skipped, keeping the term sequence identical to
        // linear_convolve_full on the reversed kernel.
        let t_lo = pad.saturating_sub(i);
        let t_hi = (pad + n - 1).saturating_sub(i).min(m - 1);
        let mut acc = 0.0;
        for t in t_lo..=t_hi {
            acc += ad[t] * xd[i + t - pad];
        }
        *slot = acc;
    }
    Tensor::new(vec![out_len], out)
}

/// 2D valid cross-correlation with per-axis symmetric zero padding.
/// Output extent per axis: e + 2·pad − k + 1.
pub fn cross_correlate_2d(a: &Tensor, x: &Tensor, pads: (usize, usize)) -> Result<Tensor> {
    if a.rank() != 2 || x.rank() != 2 {
        return Err(Error::Argument(
            "2D cross-correlation requires 2D tensors".to_string(),
        ));
    }
    let (k1, k2) = (a.shape()[0], a.shape()[1]);
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (p1, p2) = pads;
    let (ph, pw) = (h + 2 * p1, w + 2 * p2);
    if ph < k1 || pw < k2 {
        return Err(Error::Argument(format!(
            "padded extents ({ph}, {pw}) are smaller than the kernel ({k1}, {k2})"
        )));
    }
    let (oh, ow) = (ph - k1 + 1, pw - k2 + 1);
    let ad = a.data();
    let xd = x.data();
    let mut out = vec![0.0; oh * ow];
    for i1 in 0..oh {
        for i2 in 0..ow {
            let mut acc = 0.0;
            for t1 in 0..k1 {
                let u1 = i1 + t1;
                if u1 < p1 || u1 >= p1 + h {
                    continue;
                }
                for t2 in 0..k2 {
                    let u2 = i2 + t2;
                    if u2 < p2 || u2 >= p2 + w {
                        continue;
                    }
                    acc += ad[t1 * k2 + t2] * xd[(u1 - p1) * w + (u2 - p2)];
                }
            }
            out[i1 * ow + i2] = acc;
        }
    }
    Tensor::new(vec![oh, ow], out)
}
