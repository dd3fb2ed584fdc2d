//! Exact spectral analysis of multi-channel circular convolution layers.
//!
//! A layer with kernels a_kj acting circularly on (h, w) grids is, after
//! Fourier diagonalization, block-diagonal over frequencies: at each ω it
//! acts as the C_O×C_I complex matrix M(ω) with entries â_kj(ω). Its
//! exact singular values are therefore the union over ω of the singular
//! values of these small matrices; no power iteration and no
//! approximation is involved. For C_O = C_I = 1 the values are just
//! {|â(ω)|}.
//!
//! Condition numbers use a fixed floor: singular values at or below
//! [`crate::SPECTRAL_FLOOR`] count as exact zeros and κ is reported as
//! +∞ (which serializes to JSON null).

use nalgebra::{Complex, DMatrix};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fourier::{dft, pad_to_extents, FreqGrid};
use crate::tensor::KernelStack;
use crate::SPECTRAL_FLOOR;

/// Spectral summary of one layer. Serializes with stable key names; +∞
/// condition numbers become JSON null.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    /// κ(Q_k) = σ_max/σ_min per output channel; +∞ when σ_min is at or
    /// below the spectral floor.
    pub channel_condition_numbers: Vec<f64>,
    /// ‖Q_k‖ per output channel.
    pub channel_spectral_norms: Vec<f64>,
    /// All singular values of the layer operator, sorted descending.
    pub layer_singular_values: Vec<f64>,
    /// ‖Q‖: the largest layer singular value.
    pub spectral_norm: f64,
    /// sqrt(Σ_k ‖Q_k‖²), an upper bound for ‖Q‖.
    pub prop31_bound: f64,
    /// prop31_bound − spectral_norm; non-negative up to roundoff.
    pub prop31_slack: f64,
    /// Number of layer singular values at or below the spectral floor.
    pub zero_sv_count: usize,
}

/// Per-layer condition-number ratios against a baseline and their mean.
#[derive(Debug, Clone, Serialize)]
pub struct RhoMetric {
    /// κ_baseline/κ_method per layer, in input order, comparable pairs only.
    pub ratios: Vec<f64>,
    /// Mean of `ratios`.
    pub rho: f64,
    /// Count of +∞/+∞ pairs that were excluded.
    pub excluded_pairs: usize,
}

fn kernel_spectra(kernels: &KernelStack, extents: (usize, usize)) -> Result<Vec<Vec<FreqGrid>>> {
    let (h, w) = extents;
    if kernels.k1() > h || kernels.k2() > w {
        return Err(Error::Argument(format!(
            "kernel extents ({}, {}) exceed spatial extents ({h}, {w})",
            kernels.k1(),
            kernels.k2()
        )));
    }
    Ok((0..kernels.c_out())
        .map(|k| {
            (0..kernels.c_in())
                .map(|j| dft(&pad_to_extents(&kernels.kernel(k, j), &[h, w])))
                .collect()
        })
        .collect())
}

/// σ(ω) = sqrt(Σ_j |â_kj(ω)|²) for one output channel: the singular
/// values of the channel's stacked circulant operator, one per frequency.
pub fn channel_singular_values(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
) -> Result<Vec<f64>> {
    if k >= kernels.c_out() {
        return Err(Error::Argument(format!(
            "channel {k} out of range for c_out {}",
            kernels.c_out()
        )));
    }
    let spectra = kernel_spectra(kernels, extents)?;
    let n = extents.0 * extents.1;
    let mut sigmas = Vec::with_capacity(n);
    for omega in 0..n {
        let mut total = 0.0f64;
        for grid in &spectra[k] {
            let (re, im) = (grid.re()[omega], grid.im()[omega]);
            total += re * re + im * im;
        }
        sigmas.push(total.sqrt());
    }
    Ok(sigmas)
}

/// All singular values of the layer operator, sorted descending:
/// the union over frequencies ω of the singular values of the C_O×C_I
/// matrix M(ω) with entries â_kj(ω). Returns h·w·min(C_O, C_I) values.
pub fn layer_singular_values(kernels: &KernelStack, extents: (usize, usize)) -> Result<Vec<f64>> {
    let spectra = kernel_spectra(kernels, extents)?;
    let (co, ci) = (kernels.c_out(), kernels.c_in());
    let n = extents.0 * extents.1;
    let mut values = Vec::with_capacity(n * co.min(ci));

    if co.min(ci) == 1 {
        // A single row or column: the one singular value per frequency is
        // the Euclidean norm of the entries, computed directly so it is
        // bit-identical to channel_singular_values in the row case.
        for omega in 0..n {
            let mut total = 0.0f64;
            for row in &spectra {
                for grid in row {
                    let (re, im) = (grid.re()[omega], grid.im()[omega]);
                    total += re * re + im * im;
                }
            }
            values.push(total.sqrt());
        }
    } else {
        for omega in 0..n {
            let m = DMatrix::from_fn(co, ci, |r, c| {
                Complex::new(spectra[r][c].re()[omega], spectra[r][c].im()[omega])
            });
            let sv = m.singular_values();
            values.extend(sv.iter().copied());
        }
    }

    values.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(values)
}

fn condition_from_sigmas(sigmas: &[f64]) -> f64 {
    let max = sigmas.iter().copied().fold(0.0f64, f64::max);
    let min = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= SPECTRAL_FLOOR {
        f64::INFINITY
    } else {
        max / min
    }
}

/// κ(Q_k) = σ_max/σ_min of one channel operator; +∞ when σ_min is at or
/// below the spectral floor.
pub fn channel_condition_number(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
) -> Result<f64> {
    Ok(condition_from_sigmas(&channel_singular_values(
        kernels, k, extents,
    )?))
}

/// σ_max/σ_min of the full layer operator, with the same +∞ convention.
pub fn layer_condition_number(kernels: &KernelStack, extents: (usize, usize)) -> Result<f64> {
    Ok(condition_from_sigmas(&layer_singular_values(
        kernels, extents,
    )?))
}

/// ‖Q_k‖ = max_ω sqrt(Σ_j |â_kj(ω)|²).
pub fn channel_spectral_norm(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
) -> Result<f64> {
    Ok(channel_singular_values(kernels, k, extents)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Distance of one channel operator from a tight frame, measured in the
/// frequency domain: max_ω |Σ_j |ĝ_kj(ω)|² − 1|. By the circulant
/// diagonalization this equals the dense residual max|Q_kQ_kᵀ − I|.
pub fn tight_frame_residual(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
) -> Result<f64> {
    let sigmas = channel_singular_values(kernels, k, extents)?;
    Ok(sigmas
        .into_iter()
        .map(|s| (s * s - 1.0).abs())
        .fold(0.0, f64::max))
}

/// The norm bound for the stacked operator: ‖Q‖ ≤ sqrt(Σ_k ‖Q_k‖²).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Prop31Check {
    /// ‖Q‖, the largest layer singular value.
    pub spectral_norm: f64,
    /// sqrt(Σ_k ‖Q_k‖²).
    pub bound: f64,
    /// bound − spectral_norm.
    pub slack: f64,
}

/// Evaluates both sides of the stacked-operator norm bound. For a single
/// output channel the bound is evaluated as ‖Q_1‖ itself (sqrt of a
/// one-term sum of a square), so lhs and rhs are bit-identical.
pub fn check_prop31(kernels: &KernelStack, extents: (usize, usize)) -> Result<Prop31Check> {
    let spectral_norm = layer_singular_values(kernels, extents)?
        .first()
        .copied()
        .unwrap_or(0.0);
    let bound = if kernels.c_out() == 1 {
        channel_spectral_norm(kernels, 0, extents)?
    } else {
        let mut total = 0.0f64;
        for k in 0..kernels.c_out() {
            let norm = channel_spectral_norm(kernels, k, extents)?;
            total += norm * norm;
        }
        total.sqrt()
    };
    Ok(Prop31Check {
        spectral_norm,
        bound,
        slack: bound - spectral_norm,
    })
}

/// Builds the full spectral summary of a layer.
pub fn spectral_report(kernels: &KernelStack, extents: (usize, usize)) -> Result<SpectralReport> {
    let layer_sv = layer_singular_values(kernels, extents)?;
    let mut kappas = Vec::with_capacity(kernels.c_out());
    let mut norms = Vec::with_capacity(kernels.c_out());
    for k in 0..kernels.c_out() {
        let sigmas = channel_singular_values(kernels, k, extents)?;
        kappas.push(condition_from_sigmas(&sigmas));
        norms.push(sigmas.into_iter().fold(0.0, f64::max));
    }
    let prop = check_prop31(kernels, extents)?;
    let zero_sv_count = layer_sv.iter().filter(|&&s| s <= SPECTRAL_FLOOR).count();
    Ok(SpectralReport {
        channel_condition_numbers: kappas,
        channel_spectral_norms: norms,
        spectral_norm: prop.spectral_norm,
        prop31_bound: prop.bound,
        prop31_slack: prop.slack,
        layer_singular_values: layer_sv,
        zero_sv_count,
    })
}

/// ρ = mean over layers of κ_baseline/κ_method. Pairs where both sides
/// are +∞ carry no information and are excluded (counted); an infinite
/// method κ against a finite baseline contributes 0, the reverse +∞.
pub fn condition_ratio_rho(baseline: &[f64], method: &[f64]) -> Result<RhoMetric> {
    if baseline.len() != method.len() {
        return Err(Error::Argument(format!(
            "baseline has {} layers, method has {}",
            baseline.len(),
            method.len()
        )));
    }
    let mut ratios = Vec::with_capacity(baseline.len());
    let mut excluded = 0usize;
    for (&b, &m) in baseline.iter().zip(method) {
        if b <= 0.0 || m <= 0.0 {
            return Err(Error::Argument(format!(
                "condition numbers must be positive, got ({b}, {m})"
            )));
        }
        match (b.is_infinite(), m.is_infinite()) {
            (true, true) => excluded += 1,
            (false, true) => ratios.push(0.0),
            _ => ratios.push(b / m),
        }
    }
    if ratios.is_empty() {
        return Err(Error::Argument(
            "no comparable pairs: every layer had infinite condition numbers on both sides"
                .to_string(),
        ));
    }
    let rho = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(RhoMetric {
        ratios,
        rho,
        excluded_pairs: excluded,
    })
}
