//! Named runtime self-checks.
//!
//! Each check pits a fast spectral computation against an independent
//! slow route (dense matrices from cyclic shifts, dense eigen/SVD,
//! direct modulo-index sums) or against a closed-form value, on freshly
//! drawn random instances with fixed seeds. The CLI `verify` subcommand
//! runs them all; the integration suite asserts them one by one. The
//! tolerances are part of the contract and are stated in each check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::circulant::DenseMatrix;
use crate::error::Result;
use crate::fourier::{circular_convolve, cross_correlate, linear_convolve_full, ConvMode};
use crate::norm::{
    convnorm_crosscorr, eval_momentum, normalize_activations, normalize_with_kernels,
    reparam_kernels, PrecondSpectrum,
};
use crate::oracle::{
    dense_frame_matrix, dense_layer_matrix, dense_normalized_channel, dense_singular_values,
};
use crate::spectral::{channel_condition_number, check_prop31, layer_singular_values};
use crate::tensor::{ActivationBatch, KernelStack, Tensor};
use crate::train::{gradcheck, NetConfig, NormMode, ToyConvNet};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, pass: bool, detail: String) -> CheckResult {
        CheckResult { name, pass, detail }
    }
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

fn gaussian_stack(
    rng: &mut ChaCha20Rng,
    co: usize,
    ci: usize,
    k1: usize,
    k2: usize,
) -> KernelStack {
    let data: Vec<f64> = (0..co * ci * k1 * k2)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    KernelStack::from_parts(co, ci, k1, k2, data).expect("gaussian draws are finite")
}

fn gaussian_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("gaussian draws are finite")
}

fn gaussian_batch(
    rng: &mut ChaCha20Rng,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> ActivationBatch {
    ActivationBatch::new(gaussian_tensor(rng, &[b, c, h, w])).expect("shape is rank 4")
}

/// The 50 random layers shared by the tight-frame and condition-number
/// checks: channel counts in 1..=4, 3×3 Gaussian kernels on 8×8 grids.
fn frame_layers() -> Vec<KernelStack> {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    (0..50)
        .map(|_| {
            let co = rng.gen_range(1..=4);
            let ci = rng.gen_range(1..=4);
            gaussian_stack(&mut rng, co, ci, 3, 3)
        })
        .collect()
}

/// After reparametrization with ε = 0, every channel operator must be a
/// tight frame: max |Q_kQ_kᵀ − I| < 1e−8, measured on the dense operator
/// materialized from the reparametrized kernels by cyclic shifts.
pub fn check_tight_frame() -> Result<CheckResult> {
    let extents = (8usize, 8usize);
    let eye = DenseMatrix::identity(extents.0 * extents.1);
    let mut worst = 0.0f64;
    for kernels in frame_layers() {
        let g = reparam_kernels(&kernels, extents, 0.0)?;
        for k in 0..g.c_out() {
            let q = dense_frame_matrix(&g, k, extents)?;
            let residual = q.matmul(&q.transpose()).max_abs_diff(&eye);
            worst = worst.max(residual);
        }
    }
    Ok(CheckResult::new(
        "tight-frame",
        worst < 1e-8,
        format!("max |QQᵀ − I| = {worst:.3e} over 50 layers (tolerance 1e-8)"),
    ))
}

/// Reparametrized channels must have condition number 1 within 1e−6,
/// on the same 50 layers as the tight-frame check.
pub fn check_condition_numbers() -> Result<CheckResult> {
    let extents = (8usize, 8usize);
    let mut worst = 1.0f64;
    for kernels in frame_layers() {
        let g = reparam_kernels(&kernels, extents, 0.0)?;
        for k in 0..g.c_out() {
            let kappa = channel_condition_number(&g, k, extents)?;
            if !(1.0..=1.0 + 1e-6).contains(&kappa) {
                return Ok(CheckResult::new(
                    "channel-condition-number",
                    false,
                    format!("channel {k} has κ = {kappa} outside [1, 1 + 1e-6]"),
                ));
            }
            worst = worst.max(kappa);
        }
    }
    Ok(CheckResult::new(
        "channel-condition-number",
        true,
        format!("all post-reparametrization κ ≤ {worst:.12} (bound 1 + 1e-6)"),
    ))
}

/// The stacked-operator norm bound: ‖Q‖ ≤ sqrt(Σ_k ‖Q_k‖²) on 100 random
/// layers (slack ≥ −1e−9); after reparametrization additionally
/// ‖Q‖ ≤ sqrt(C_O) + 1e−9; and on 10 layers the frequency-domain ‖Q‖ is
/// cross-checked against the dense block-matrix SVD within 1e−8.
pub fn check_norm_bound() -> Result<CheckResult> {
    let extents = (6usize, 6usize);
    let mut rng = ChaCha20Rng::seed_from_u64(103);
    let mut min_slack = f64::INFINITY;
    let mut max_dense_gap = 0.0f64;
    let mut max_reparam_excess = f64::NEG_INFINITY;
    for case in 0..100 {
        let co = rng.gen_range(1..=4);
        let ci = rng.gen_range(1..=4);
        let kernels = gaussian_stack(&mut rng, co, ci, 3, 3);
        let prop = check_prop31(&kernels, extents)?;
        min_slack = min_slack.min(prop.slack);

        let g = reparam_kernels(&kernels, extents, 0.0)?;
        let reparam_norm = layer_singular_values(&g, extents)?[0];
        max_reparam_excess = max_reparam_excess.max(reparam_norm - (co as f64).sqrt());

        if case < 10 {
            let dense = dense_singular_values(&dense_layer_matrix(&kernels, extents)?);
            max_dense_gap = max_dense_gap.max((prop.spectral_norm - dense[0]).abs());
        }
    }
    let pass = min_slack >= -1e-9 && max_reparam_excess <= 1e-9 && max_dense_gap < 1e-8;
    Ok(CheckResult::new(
        "norm-bound",
        pass,
        format!(
            "min slack {min_slack:.3e} (≥ -1e-9), reparam excess over sqrt(C_O) \
             {max_reparam_excess:.3e} (≤ 1e-9), dense SVD gap {max_dense_gap:.3e} (< 1e-8)"
        ),
    ))
}

/// Smallest frequency-wise power sum min_ω Σ_j |â_kj(ω)|² over output
/// channels, used to screen draws whose dense eigendecomposition oracle
/// would lose accuracy (its error grows like λ_min^{-3/2}).
fn min_power_sum(kernels: &KernelStack, extents: (usize, usize)) -> f64 {
    let mut min = f64::INFINITY;
    for k in 0..kernels.c_out() {
        let mut sums = vec![0.0f64; extents.0 * extents.1];
        for j in 0..kernels.c_in() {
            let spectrum = crate::fourier::dft(&crate::fourier::pad_to_extents(
                &kernels.kernel(k, j),
                &[extents.0, extents.1],
            ));
            for (slot, v) in sums.iter_mut().zip(spectrum.abs2()) {
                *slot += v;
            }
        }
        for v in sums {
            min = min.min(v);
        }
    }
    min
}

/// normalize_activations against the dense route P_kA_k·x on 20 random
/// instances with extents up to 8×8: the spectral path and the
/// eigendecomposition of the materialized Gram matrix must agree within
/// 1e−10. Draws are redrawn while min_ω Σ_j |â|² < 1e−2; below that the
/// dense oracle itself is not accurate to the stated tolerance.
pub fn check_fft_dense_equivalence() -> Result<CheckResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(107);
    let eps = 1e-12;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let co = rng.gen_range(1..=3);
        let ci = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let h = rng.gen_range(4..=8);
        let w = rng.gen_range(4..=8);
        let kernels = loop {
            let draw = gaussian_stack(&mut rng, co, ci, k, k);
            if min_power_sum(&draw, (h, w)) >= 1e-2 {
                break draw;
            }
        };
        let x = gaussian_batch(&mut rng, 2, ci, h, w);

        let z = crate::norm::conv_layer_circular(&x, &kernels)?;
        let (normalized, _) = normalize_with_kernels(&z, &kernels, eps)?;

        // Dense side: stack the input channels into one vector and apply
        // the materialized normalized operator Q_k = P_kA_k per channel.
        for b in 0..2 {
            let mut stacked = Vec::with_capacity(ci * h * w);
            for j in 0..ci {
                stacked.extend_from_slice(x.channel(b, j));
            }
            for kc in 0..co {
                let q = dense_normalized_channel(&kernels, kc, (h, w), eps)?;
                let dense_out = q.matvec(&stacked);
                let fast_out = normalized.channel(b, kc);
                for (dv, fv) in dense_out.iter().zip(fast_out) {
                    worst = worst.max((dv - fv).abs());
                }
            }
        }
    }
    Ok(CheckResult::new(
        "fft-dense-equivalence",
        worst < 1e-10,
        format!("max |spectral − dense| = {worst:.3e} over 20 instances (tolerance 1e-10)"),
    ))
}

fn reverse2d(a: &Tensor) -> Tensor {
    // Reversing both axes of a row-major 2D array reverses the flat data.
    let mut data = a.data().to_vec();
    data.reverse();
    Tensor::new(a.shape().to_vec(), data).expect("reversal preserves shape")
}

/// Convention adapters: (a) cross-correlation with full padding equals
/// reversed-kernel linear convolution bit for bit; (b) linear
/// convolution equals circular convolution at padded extents within
/// 1e−12; (c) the cross-correlation layer equals the explicit
/// pad → circular-convolve → normalize → crop pipeline within 1e−10.
pub fn check_convention_adapters() -> Result<CheckResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(109);

    // (a) exact equality, 20 random 1D instances.
    for _ in 0..20 {
        let m = rng.gen_range(1..=6);
        let n = rng.gen_range(m..=16);
        let a = gaussian_tensor(&mut rng, &[m]);
        let x = gaussian_tensor(&mut rng, &[n]);
        let reversed = {
            let mut d = a.data().to_vec();
            d.reverse();
            Tensor::new(vec![m], d).expect("reversal preserves shape")
        };
        let corr = cross_correlate(&a, &x, m - 1)?;
        let lin = linear_convolve_full(&reversed, &x)?;
        if corr.data() != lin.data() {
            return Ok(CheckResult::new(
                "convention-adapters",
                false,
                "padded cross-correlation differs from reversed-kernel linear convolution"
                    .to_string(),
            ));
        }
    }

    // (b) linear vs zero-padded circular, 20 instances, 1e−12.
    let mut worst_linear = 0.0f64;
    for _ in 0..20 {
        let m = rng.gen_range(1..=6);
        let n = rng.gen_range(m..=16);
        let a = gaussian_tensor(&mut rng, &[m]);
        let x = gaussian_tensor(&mut rng, &[n]);
        let lin = linear_convolve_full(&a, &x)?;
        let padded_x = crate::fourier::pad_to_extents(&x, &[n + m - 1]);
        let circ = circular_convolve(&a, &padded_x, ConvMode::Fft)?;
        for (p, q) in lin.data().iter().zip(circ.data()) {
            worst_linear = worst_linear.max((p - q).abs());
        }
    }

    // (c) the layer adapter vs the explicit circular pipeline, 20
    // instances, 1e−10.
    let mut worst_pipeline = 0.0f64;
    let eps = 1e-12;
    for _ in 0..20 {
        let co = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=2);
        let k = *[1usize, 3].get(rng.gen_range(0..2)).unwrap();
        let h = rng.gen_range(4..=7);
        let w = rng.gen_range(4..=7);
        let b = rng.gen_range(1..=2);
        let kernels = gaussian_stack(&mut rng, co, ci, k, k);
        let x = gaussian_batch(&mut rng, b, ci, h, w);

        let adapted = convnorm_crosscorr(&x, &kernels, eps)?;

        // Pipeline: correlation = circular convolution with the reversed
        // kernel at the padded extents (both inputs zero-padded on the
        // right), then the same normalization, then the center crop.
        let (ph, pw) = (h + k - 1, w + k - 1);
        let mut planes = Vec::with_capacity(b * co);
        for bi in 0..b {
            for kc in 0..co {
                let mut acc = vec![0.0f64; ph * pw];
                for j in 0..ci {
                    let xp = crate::fourier::pad_to_extents(
                        &Tensor::new(vec![h, w], x.channel(bi, j).to_vec())?,
                        &[ph, pw],
                    );
                    let y = circular_convolve(
                        &reverse2d(&kernels.kernel(kc, j)),
                        &xp,
                        ConvMode::Direct,
                    )?;
                    for (slot, &v) in acc.iter_mut().zip(y.data()) {
                        *slot += v;
                    }
                }
                planes.push(acc);
            }
        }
        let mut data = Vec::with_capacity(b * co * ph * pw);
        for p in planes {
            data.extend_from_slice(&p);
        }
        let full = ActivationBatch::new(Tensor::new(vec![b, co, ph, pw], data)?)?;
        let spectrum = PrecondSpectrum::compute(&kernels, (ph, pw), eps)?;
        let normalized = normalize_activations(&full, &spectrum)?;
        let t = (k - 1) / 2;
        for bi in 0..b {
            for kc in 0..co {
                let fast = adapted.channel(bi, kc);
                let slow = normalized.channel(bi, kc);
                for r in 0..h {
                    for c in 0..w {
                        let diff = (fast[r * w + c] - slow[(r + t) * pw + (c + t)]).abs();
                        worst_pipeline = worst_pipeline.max(diff);
                    }
                }
            }
        }
    }

    let pass = worst_linear < 1e-12 && worst_pipeline < 1e-10;
    Ok(CheckResult::new(
        "convention-adapters",
        pass,
        format!(
            "exact correlation identity held; linear vs circular {worst_linear:.3e} (< 1e-12); \
             layer adapter vs pipeline {worst_pipeline:.3e} (< 1e-10)"
        ),
    ))
}

/// Reparametrization is a projection: applying it twice, or rescaling
/// the raw kernels by c ∈ {0.1, 10} first, changes the output by less
/// than 1e−10 on 20 random kernel stacks.
pub fn check_reparam_stability() -> Result<CheckResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(113);
    let extents = (8usize, 8usize);
    let mut worst_idem = 0.0f64;
    let mut worst_scale = 0.0f64;
    for _ in 0..20 {
        let co = rng.gen_range(1..=3);
        let ci = rng.gen_range(1..=3);
        let kernels = gaussian_stack(&mut rng, co, ci, 3, 3);
        let g = reparam_kernels(&kernels, extents, 0.0)?;
        let gg = reparam_kernels(&g, extents, 0.0)?;
        for (p, q) in gg.weights().data().iter().zip(g.weights().data()) {
            worst_idem = worst_idem.max((p - q).abs());
        }
        for c in [0.1, 10.0] {
            let scaled_data: Vec<f64> = kernels.weights().data().iter().map(|&v| c * v).collect();
            let scaled = KernelStack::from_parts(
                kernels.c_out(),
                kernels.c_in(),
                kernels.k1(),
                kernels.k2(),
                scaled_data,
            )?;
            let gs = reparam_kernels(&scaled, extents, 0.0)?;
            for (p, q) in gs.weights().data().iter().zip(g.weights().data()) {
                worst_scale = worst_scale.max((p - q).abs());
            }
        }
    }
    let pass = worst_idem < 1e-10 && worst_scale < 1e-10;
    Ok(CheckResult::new(
        "reparam-stability",
        pass,
        format!(
            "idempotence residual {worst_idem:.3e}, scale-invariance residual \
             {worst_scale:.3e} (tolerance 1e-10)"
        ),
    ))
}

/// The per-frequency singular values of the layer operator must match
/// the dense block-matrix SVD within 1e−8, on 10 random layers with up
/// to 2×2 channels and 3×3 kernels on 6×6 grids.
pub fn check_singular_value_exactness() -> Result<CheckResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(127);
    let extents = (6usize, 6usize);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let co = rng.gen_range(1..=2);
        let ci = rng.gen_range(1..=2);
        let k1 = rng.gen_range(1..=3);
        let k2 = rng.gen_range(1..=3);
        let kernels = gaussian_stack(&mut rng, co, ci, k1, k2);
        let fast = layer_singular_values(&kernels, extents)?;
        let dense = dense_singular_values(&dense_layer_matrix(&kernels, extents)?);
        if fast.len() != dense.len() {
            return Ok(CheckResult::new(
                "singular-value-exactness",
                false,
                format!("value counts differ: {} vs {}", fast.len(), dense.len()),
            ));
        }
        for (p, q) in fast.iter().zip(&dense) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(CheckResult::new(
        "singular-value-exactness",
        worst < 1e-8,
        format!("max |σ_freq − σ_dense| = {worst:.3e} over 10 layers (tolerance 1e-8)"),
    ))
}

/// Backward must match central finite differences of the frozen
/// objective within 1e−5, for every mode and five seeds.
pub fn check_gradients() -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for mode in [NormMode::None, NormMode::ConvNorm, NormMode::ConvNormAffine] {
        for seed in 0..5u64 {
            let net = ToyConvNet::init(NetConfig::tiny(mode), seed)?;
            let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
            let batch = gaussian_batch(&mut rng, 3, 1, 6, 6);
            let err = gradcheck(&net, &batch, &[0, 1, 2], 1e-6)?;
            worst = worst.max(err);
        }
    }
    Ok(CheckResult::new(
        "gradient-correctness",
        worst < 1e-5,
        format!("max relative gradient error {worst:.3e} over 3 modes × 5 seeds (tolerance 1e-5)"),
    ))
}

/// The cosine rampdown hits its pinned values: μ(0) = 1 and
/// μ(≥ 40000) = 0 exactly, μ(20000) = 1/2 within 1e−15.
pub fn check_momentum_schedule() -> Result<CheckResult> {
    let cap = 40_000;
    let exact_ends = eval_momentum(0, cap) == 1.0
        && eval_momentum(cap, cap) == 0.0
        && eval_momentum(90_000, cap) == 0.0;
    let mid_gap = (eval_momentum(20_000, cap) - 0.5).abs();
    Ok(CheckResult::new(
        "momentum-schedule",
        exact_ends && mid_gap <= 1e-15,
        format!("endpoints exact: {exact_ends}, |μ(20000) − 1/2| = {mid_gap:.3e} (≤ 1e-15)"),
    ))
}

/// Runs every check in order.
pub fn run_all() -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_tight_frame()?,
        check_condition_numbers()?,
        check_norm_bound()?,
        check_fft_dense_equivalence()?,
        check_convention_adapters()?,
        check_reparam_stability()?,
        check_singular_value_exactness()?,
        check_gradients()?,
        check_momentum_schedule()?,
    ])
}
