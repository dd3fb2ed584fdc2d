//! Channel-wise frequency-domain preconditioning of convolution layers.
//!
//! For a layer with kernels a_kj (output channel k, input channel j), the
//! preconditioner for channel k is the circular operator whose spectrum is
//!
//!   v̂_k(ω) = (Σ_j |â_kj(ω)|² + ε)^{−1/2}
//!
//! over the layer's padded spatial frequency grid. Applying it to the
//! channel output (a circular convolution, done as a spectral product)
//! renormalizes the stacked channel operator to a tight frame: with ε = 0
//! the reparametrized kernels g_kj = v_k ∗ a_kj satisfy
//! Σ_j |ĝ_kj(ω)|² = 1 at every frequency, i.e. Q_k Q_kᵀ = I.
//!
//! The preconditioner is a function of the kernels and is recomputed from
//! them on every forward pass; during training the backward pass treats
//! the spectrum it cached at the forward as a constant (see
//! [`PrecondSpectrum`] and the training harness).

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::fourier::{dft, idft, pad_to_extents, FreqGrid};
use crate::tensor::{downsample, ActivationBatch, KernelStack, Tensor};
use crate::SPECTRAL_FLOOR;

/// Default rampdown horizon for the evaluation-time moving average.
pub const EVAL_RAMPDOWN_CAP: u64 = 40_000;

/// Default spectral regularizer. Added inside the inverse square root:
/// v̂ = (Σ|â|² + ε)^{−1/2}. Zero is allowed and gives the exact transform,
/// at the price of failing on kernels with a vanishing combined spectrum.
pub const DEFAULT_EPS: f64 = 1e-12;

/// The preconditioning spectra of one layer: per output channel, the
/// strictly positive real grid v̂_k over the padded extents (h, w).
///
/// A value of this type is the "constant" side of the stop-gradient
/// contract: forwards recompute it from the current kernels, backwards
/// reuse the instance cached at the forward without differentiating
/// through it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecondSpectrum {
    channels: Vec<FreqGrid>,
    extents: (usize, usize),
    epsilon: f64,
}

impl PrecondSpectrum {
    /// Computes v̂ for every output channel of the layer.
    pub fn compute(
        kernels: &KernelStack,
        extents: (usize, usize),
        epsilon: f64,
    ) -> Result<PrecondSpectrum> {
        let channels = (0..kernels.c_out())
            .map(|k| precond_spectrum(kernels, k, extents, epsilon))
            .collect::<Result<Vec<_>>>()?;
        Ok(PrecondSpectrum {
            channels,
            extents,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, k: usize) -> &FreqGrid {
        &self.channels[k]
    }

    pub fn extents(&self) -> (usize, usize) {
        self.extents
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

/// The preconditioning spectrum of a single output channel:
/// (Σ_j |â_kj|² + ε)^{−1/2} over the (h, w) frequency grid, real and
/// strictly positive.
///
/// With ε = 0, a frequency where every kernel's transform vanishes has no
/// inverse square root; the error names the offending channel and the
/// row-major frequency index.
pub fn precond_spectrum(
    kernels: &KernelStack,
    k: usize,
    extents: (usize, usize),
    epsilon: f64,
) -> Result<FreqGrid> {
    let (h, w) = extents;
    if k >= kernels.c_out() {
        return Err(Error::Argument(format!(
            "channel {k} out of range for c_out {}",
            kernels.c_out()
        )));
    }
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::Argument(format!(
            "epsilon must be finite and ≥ 0, got {epsilon}"
        )));
    }
    check_kernel_extents(kernels, extents)?;

    let mut total = vec![0.0f64; h * w];
    for j in 0..kernels.c_in() {
        let a = kernels.kernel(k, j);
        let spectrum = dft(&pad_to_extents(&a, &[h, w]));
        for (slot, m2) in total.iter_mut().zip(spectrum.abs2()) {
            *slot += m2;
        }
    }

    if epsilon == 0.0 {
        // A combined magnitude at or below the spectral floor counts as an
        // exact zero; FFT roundoff keeps analytic zeros from landing on 0.0.
        if let Some(freq_index) = total
            .iter()
            .position(|&t| t <= SPECTRAL_FLOOR * SPECTRAL_FLOOR)
        {
            return Err(Error::SingularSpectrum {
                channel: k,
                freq_index,
            });
        }
    }

    let v: Vec<f64> = total.iter().map(|&t| 1.0 / (t + epsilon).sqrt()).collect();
    let zeros = vec![0.0; v.len()];
    FreqGrid::new(vec![h, w], v, zeros)
}

fn check_kernel_extents(kernels: &KernelStack, extents: (usize, usize)) -> Result<()> {
    let (h, w) = extents;
    if kernels.k1() > h || kernels.k2() > w {
        return Err(Error::Argument(format!(
            "kernel extents ({}, {}) exceed spatial extents ({h}, {w})",
            kernels.k1(),
            kernels.k2()
        )));
    }
    Ok(())
}

fn channel_tensor(z: &ActivationBatch, b: usize, c: usize) -> Tensor {
    Tensor::new(vec![z.height(), z.width()], z.channel(b, c).to_vec())
        .expect("channel slice of a valid batch")
}

fn batch_from_channels(
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    grids: Vec<Vec<f64>>,
) -> Result<ActivationBatch> {
    debug_assert_eq!(grids.len(), batch * channels);
    let mut data = Vec::with_capacity(batch * channels * h * w);
    for g in grids {
        debug_assert_eq!(g.len(), h * w);
        data.extend_from_slice(&g);
    }
    ActivationBatch::new(Tensor::new(vec![batch, channels, h, w], data)?)
}

/// Applies the cached preconditioner to a batch of layer outputs:
/// per batch item and channel k, z̃_k = idft(dft(z_k) ⊙ v̂_k), which is the
/// circular convolution v_k ∗ z_k.
///
/// `spectra` is treated as a constant of this pass (the stop-gradient
/// contract); compute it fresh from the current kernels before calling,
/// or use [`normalize_with_kernels`].
pub fn normalize_activations(
    z: &ActivationBatch,
    spectra: &PrecondSpectrum,
) -> Result<ActivationBatch> {
    if z.channels() != spectra.channels() {
        return Err(Error::Argument(format!(
            "activation channels {} do not match spectrum channels {}",
            z.channels(),
            spectra.channels()
        )));
    }
    if (z.height(), z.width()) != spectra.extents() {
        return Err(Error::Argument(format!(
            "activation extents ({}, {}) do not match spectrum extents {:?}",
            z.height(),
            z.width(),
            spectra.extents()
        )));
    }
    let mut grids = Vec::with_capacity(z.batch() * z.channels());
    for b in 0..z.batch() {
        for k in 0..z.channels() {
            let grid = channel_tensor(z, b, k);
            let filtered = idft(&dft(&grid).mul_real(spectra.channel(k).re()));
            grids.push(filtered.into_data());
        }
    }
    batch_from_channels(z.batch(), z.channels(), z.height(), z.width(), grids)
}

/// Recomputes the preconditioner from `kernels` and applies it to `z`.
/// The freshly computed spectra are returned alongside the result so a
/// training step can cache them for its backward pass.
pub fn normalize_with_kernels(
    z: &ActivationBatch,
    kernels: &KernelStack,
    epsilon: f64,
) -> Result<(ActivationBatch, PrecondSpectrum)> {
    let spectra = PrecondSpectrum::compute(kernels, (z.height(), z.width()), epsilon)?;
    let out = normalize_activations(z, &spectra)?;
    Ok((out, spectra))
}

/// Reparametrizes the layer: g_kj = v_k ∗ a_kj, evaluated in the
/// frequency domain at the full padded extents (h, w), where the product
/// generally has full support. With ε = 0, Σ_j |ĝ_kj(ω)|² = 1 everywhere.
pub fn reparam_kernels(
    kernels: &KernelStack,
    extents: (usize, usize),
    epsilon: f64,
) -> Result<KernelStack> {
    let (h, w) = extents;
    check_kernel_extents(kernels, extents)?;
    let mut data = Vec::with_capacity(kernels.c_out() * kernels.c_in() * h * w);
    for k in 0..kernels.c_out() {
        let v = precond_spectrum(kernels, k, extents, epsilon)?;
        for j in 0..kernels.c_in() {
            let a = kernels.kernel(k, j);
            let spectrum = dft(&pad_to_extents(&a, &[h, w]));
            let g = idft(&spectrum.mul_real(v.re()));
            data.extend_from_slice(g.data());
        }
    }
    KernelStack::from_parts(kernels.c_out(), kernels.c_in(), h, w, data)
}

/// Per-channel learnable kernels for the affine transform that follows
/// normalization. Initialized to the delta kernel, so the transform
/// starts as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineKernels {
    channels: usize,
    k1: usize,
    k2: usize,
    data: Vec<f64>,
}

impl AffineKernels {
    pub fn delta(channels: usize, k1: usize, k2: usize) -> AffineKernels {
        assert!(channels > 0 && k1 > 0 && k2 > 0);
        let mut data = vec![0.0; channels * k1 * k2];
        for c in 0..channels {
            data[c * k1 * k2] = 1.0;
        }
        AffineKernels {
            channels,
            k1,
            k2,
            data,
        }
    }

    pub fn from_parts(
        channels: usize,
        k1: usize,
        k2: usize,
        data: Vec<f64>,
    ) -> Result<AffineKernels> {
        if data.len() != channels * k1 * k2 {
            return Err(Error::Shape(format!(
                "affine data length {} does not match {channels}×{k1}×{k2}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(AffineKernels {
            channels,
            k1,
            k2,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.k1, self.k2)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn kernel(&self, c: usize) -> Tensor {
        let len = self.k1 * self.k2;
        Tensor::new(
            vec![self.k1, self.k2],
            self.data[c * len..(c + 1) * len].to_vec(),
        )
        .expect("affine kernels are finite by construction")
    }
}

/// Per-channel circular convolution with the affine kernels:
/// z̄_k = r_k ∗ z̃_k. With r_k the spectral reciprocal of v_k, this undoes
/// normalization exactly; with r_k = δ it is the identity.
pub fn apply_affine(z: &ActivationBatch, r: &AffineKernels) -> Result<ActivationBatch> {
    if z.channels() != r.channels() {
        return Err(Error::Argument(format!(
            "activation channels {} do not match affine channels {}",
            z.channels(),
            r.channels()
        )));
    }
    let (h, w) = (z.height(), z.width());
    let (k1, k2) = r.extents();
    if k1 > h || k2 > w {
        return Err(Error::Argument(format!(
            "affine kernel extents ({k1}, {k2}) exceed activation extents ({h}, {w})"
        )));
    }
    let mut grids = Vec::with_capacity(z.batch() * z.channels());
    let spectra: Vec<FreqGrid> = (0..r.channels())
        .map(|c| dft(&pad_to_extents(&r.kernel(c), &[h, w])))
        .collect();
    for b in 0..z.batch() {
        for (k, spec) in spectra.iter().enumerate() {
            let grid = channel_tensor(z, b, k);
            let out = idft(&dft(&grid).mul(spec));
            grids.push(out.into_data());
        }
    }
    batch_from_channels(z.batch(), z.channels(), h, w, grids)
}

/// The layer's unstrided circular convolution:
/// z_out[b, k] = Σ_j a_kj ∗ z_in[b, j] at the input's spatial extents.
pub fn conv_layer_circular(
    z_in: &ActivationBatch,
    kernels: &KernelStack,
) -> Result<ActivationBatch> {
    if z_in.channels() != kernels.c_in() {
        return Err(Error::Argument(format!(
            "input channels {} do not match kernel c_in {}",
            z_in.channels(),
            kernels.c_in()
        )));
    }
    let (h, w) = (z_in.height(), z_in.width());
    check_kernel_extents(kernels, (h, w))?;

    let kernel_spectra: Vec<Vec<FreqGrid>> = (0..kernels.c_out())
        .map(|k| {
            (0..kernels.c_in())
                .map(|j| dft(&pad_to_extents(&kernels.kernel(k, j), &[h, w])))
                .collect()
        })
        .collect();

    let mut grids = Vec::with_capacity(z_in.batch() * kernels.c_out());
    for b in 0..z_in.batch() {
        let input_spectra: Vec<FreqGrid> = (0..z_in.channels())
            .map(|j| dft(&channel_tensor(z_in, b, j)))
            .collect();
        for spectra_k in &kernel_spectra {
            let mut acc_re = vec![0.0f64; h * w];
            let mut acc_im = vec![0.0f64; h * w];
            for (a_hat, z_hat) in spectra_k.iter().zip(&input_spectra) {
                let prod = a_hat.mul(z_hat);
                for i in 0..h * w {
                    acc_re[i] += prod.re()[i];
                    acc_im[i] += prod.im()[i];
                }
            }
            let acc = FreqGrid::new(vec![h, w], acc_re, acc_im)?;
            grids.push(idft(&acc).into_data());
        }
    }
    batch_from_channels(z_in.batch(), kernels.c_out(), h, w, grids)
}

/// Strided layer with normalization: unstrided circular convolution,
/// normalize at full extents, then keep every s-th sample per spatial
/// axis (anchored at index 0). s = 1 is the plain normalized layer.
pub fn convnorm_strided(
    z_in: &ActivationBatch,
    kernels: &KernelStack,
    stride: usize,
    epsilon: f64,
) -> Result<ActivationBatch> {
    if stride == 0 {
        return Err(Error::Argument("stride must be ≥ 1".to_string()));
    }
    let z_out = conv_layer_circular(z_in, kernels)?;
    let (normalized, _) = normalize_with_kernels(&z_out, kernels, epsilon)?;
    if stride == 1 {
        return Ok(normalized);
    }
    let strided = downsample(normalized.values(), &[1, 1, stride, stride])?;
    ActivationBatch::new(strided)
}

fn crop(t: &Tensor, windows: &[(usize, usize)]) -> Tensor {
    assert_eq!(windows.len(), t.rank());
    let out_shape: Vec<usize> = windows.iter().map(|&(_, len)| len).collect();
    let total: usize = out_shape.iter().product();
    let rank = t.rank();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let src: Vec<usize> = idx
            .iter()
            .zip(windows)
            .map(|(&i, &(start, _))| start + i)
            .collect();
        out.push(t.get(&src));
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("crop of a valid tensor")
}

/// The cross-correlation adaptation, for layers stated as zero-padded
/// cross-correlations (the ConvNet convention) rather than circular
/// convolutions. Kernel extents must be odd.
///
/// Steps: (1) zero-pad the input by k−1 per side per axis, (2) valid
/// cross-correlation at stride 1, giving outputs at the padded extents
/// (h + k1 − 1, w + k2 − 1), (3) normalize at those extents (no kernel
/// flip is needed: flipping only conjugates the spectrum, so v̂ is
/// unchanged), (4) truncate (k − 1)/2 per side per axis, restoring the
/// input extents.
pub fn convnorm_crosscorr(
    z_in: &ActivationBatch,
    kernels: &KernelStack,
    epsilon: f64,
) -> Result<ActivationBatch> {
    let (k1, k2) = (kernels.k1(), kernels.k2());
    if k1 % 2 == 0 || k2 % 2 == 0 {
        return Err(Error::Argument(format!(
            "cross-correlation adaptation requires odd kernel extents, got ({k1}, {k2})"
        )));
    }
    if z_in.channels() != kernels.c_in() {
        return Err(Error::Argument(format!(
            "input channels {} do not match kernel c_in {}",
            z_in.channels(),
            kernels.c_in()
        )));
    }
    let (h, w) = (z_in.height(), z_in.width());
    let (ph, pw) = (h + k1 - 1, w + k2 - 1);

    // Steps 1 and 2: pad by k−1 per side, correlate valid. Output extent
    // per axis: h + 2(k1−1) − k1 + 1 = h + k1 − 1.
    let mut grids = Vec::with_capacity(z_in.batch() * kernels.c_out());
    for b in 0..z_in.batch() {
        for k in 0..kernels.c_out() {
            let mut acc = vec![0.0f64; ph * pw];
            for j in 0..kernels.c_in() {
                let x = channel_tensor(z_in, b, j);
                let y = crate::fourier::cross_correlate_2d(
                    &kernels.kernel(k, j),
                    &x,
                    (k1 - 1, k2 - 1),
                )?;
                for (slot, &v) in acc.iter_mut().zip(y.data()) {
                    *slot += v;
                }
            }
            grids.push(acc);
        }
    }
    let correlated = batch_from_channels(z_in.batch(), kernels.c_out(), ph, pw, grids)?;

    // Step 3: normalize at the padded extents.
    let (normalized, _) = normalize_with_kernels(&correlated, kernels, epsilon)?;

    // Step 4: symmetric truncation back to the input extents.
    let (t1, t2) = ((k1 - 1) / 2, (k2 - 1) / 2);
    let cropped = crop(
        normalized.values(),
        &[(0, z_in.batch()), (0, kernels.c_out()), (t1, h), (t2, w)],
    );
    ActivationBatch::new(cropped)
}

/// Cosine-rampdown momentum for the evaluation-time moving average:
/// μ(iter) = 0.5 · (1 + cos(min(iter, cap)/cap · π)). μ(0) = 1 leaves the
/// average untouched; μ(iter ≥ cap) = 0 replaces it with the fresh value.
pub fn eval_momentum(iter: u64, cap: u64) -> f64 {
    assert!(cap > 0, "rampdown cap must be positive");
    let t = iter.min(cap) as f64 / cap as f64;
    0.5 * (1.0 + (t * PI).cos())
}

/// Running average of the preconditioning spectra, for use at evaluation
/// time. The average is seeded from the first computed spectrum and
/// blended toward fresh spectra with the cosine-rampdown momentum, so it
/// stays strictly positive.
#[derive(Debug, Clone)]
pub struct EvalAverageState {
    averages: Vec<FreqGrid>,
    extents: (usize, usize),
    iter: u64,
    cap: u64,
}

impl EvalAverageState {
    pub fn new(initial: &PrecondSpectrum, cap: u64) -> EvalAverageState {
        assert!(cap > 0, "rampdown cap must be positive");
        EvalAverageState {
            averages: (0..initial.channels())
                .map(|k| initial.channel(k).clone())
                .collect(),
            extents: initial.extents(),
            iter: 0,
            cap,
        }
    }

    pub fn with_default_cap(initial: &PrecondSpectrum) -> EvalAverageState {
        EvalAverageState::new(initial, EVAL_RAMPDOWN_CAP)
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn average(&self, k: usize) -> &FreqGrid {
        &self.averages[k]
    }

    /// The averaged spectra packaged for [`normalize_activations`].
    pub fn as_spectrum(&self, epsilon: f64) -> PrecondSpectrum {
        PrecondSpectrum {
            channels: self.averages.clone(),
            extents: self.extents,
            epsilon,
        }
    }
}

/// Blends fresh spectra into the running average:
/// average ← μ(iter)·average + (1 − μ(iter))·v̂.
pub fn update_eval_average(state: &mut EvalAverageState, fresh: &PrecondSpectrum, iter: u64) {
    debug_assert!(iter >= state.iter, "iteration counter must not decrease");
    assert_eq!(
        state.averages.len(),
        fresh.channels(),
        "channel count mismatch in eval average"
    );
    assert_eq!(
        state.extents,
        fresh.extents(),
        "extent mismatch in eval average"
    );
    let mu = eval_momentum(iter, state.cap);
    for (avg, k) in state.averages.iter_mut().zip(0..fresh.channels()) {
        let f = fresh.channel(k);
        let re: Vec<f64> = avg
            .re()
            .iter()
            .zip(f.re())
            .map(|(&a, &v)| mu * a + (1.0 - mu) * v)
            .collect();
        let im = vec![0.0; re.len()];
        *avg = FreqGrid::new(avg.shape().to_vec(), re, im).expect("average stays well-formed");
    }
    state.iter = iter.max(state.iter);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{circular_convolve, ConvMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn delta_stack(c: usize, k: usize) -> KernelStack {
        // a_kj = δ when k == j, else 0: the identity layer.
        let mut data = vec![0.0; c * c * k * k];
        for i in 0..c {
            data[(i * c + i) * k * k] = 1.0;
        }
        KernelStack::from_parts(c, c, k, k, data).unwrap()
    }

    fn random_batch(b: usize, c: usize, h: usize, w: usize, rng: &mut impl Rng) -> ActivationBatch {
        let data = (0..b * c * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        ActivationBatch::new(Tensor::new(vec![b, c, h, w], data).unwrap()).unwrap()
    }

    fn random_stack(co: usize, ci: usize, k: usize, rng: &mut impl Rng) -> KernelStack {
        let data = (0..co * ci * k * k)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        KernelStack::from_parts(co, ci, k, k, data).unwrap()
    }

    #[test]
    fn delta_kernel_spectrum_is_flat() {
        let ks = KernelStack::from_parts(1, 1, 1, 1, vec![1.0]).unwrap();
        let v = precond_spectrum(&ks, 0, (4, 4), 0.0).unwrap();
        for &r in v.re() {
            assert!((r - 1.0).abs() < 1e-12);
        }
        for &i in v.im() {
            assert_eq!(i, 0.0);
        }
    }

    #[test]
    fn orthogonal_pair_gives_inverse_sqrt_two() {
        // a₁=[1,0], a₂=[0,1] on length-2 grids: Σ|â|² = [2,2].
        let ks = KernelStack::from_parts(1, 2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = precond_spectrum(&ks, 0, (2, 1), 0.0).unwrap();
        let e = 1.0 / 2.0f64.sqrt();
        assert!((v.re()[0] - e).abs() < 1e-12);
        assert!((v.re()[1] - e).abs() < 1e-12);
    }

    #[test]
    fn vanishing_spectrum_names_the_frequency() {
        // [1,1] padded to 4 has â = [2, 1−i, 0, 1+i]: zero at index 2.
        let ks = KernelStack::from_parts(1, 1, 2, 1, vec![1.0, 1.0]).unwrap();
        let err = precond_spectrum(&ks, 0, (4, 1), 0.0);
        match err {
            Err(Error::SingularSpectrum {
                channel: 0,
                freq_index: 2,
            }) => {}
            other => panic!("expected singular spectrum at index 2, got {other:?}"),
        }
        // Any positive ε restores existence.
        assert!(precond_spectrum(&ks, 0, (4, 1), 1e-12).is_ok());
    }

    #[test]
    fn epsilon_zero_spectrum_inverts_the_combined_magnitude() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ks = random_stack(3, 2, 3, &mut rng);
        for k in 0..3 {
            let v = precond_spectrum(&ks, k, (8, 8), 0.0).unwrap();
            let mut total = vec![0.0f64; 64];
            for j in 0..2 {
                let s = dft(&pad_to_extents(&ks.kernel(k, j), &[8, 8]));
                for (t, m2) in total.iter_mut().zip(s.abs2()) {
                    *t += m2;
                }
            }
            for (vv, tt) in v.re().iter().zip(&total) {
                assert!((vv * tt.sqrt() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn normalize_with_delta_kernels_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let z = random_batch(2, 3, 4, 4, &mut rng);
        let ks = delta_stack(3, 1);
        let (out, _) = normalize_with_kernels(&z, &ks, 0.0).unwrap();
        for (a, b) in out.values().data().iter().zip(z.values().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_with_scalar_kernel_divides() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let z = random_batch(1, 1, 1, 6, &mut rng);
        let ks = KernelStack::from_parts(1, 1, 1, 1, vec![2.0]).unwrap();
        let (out, _) = normalize_with_kernels(&z, &ks, 0.0).unwrap();
        for (a, b) in out.values().data().iter().zip(z.values().data()) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_is_idempotent_on_reparametrized_kernels() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let ks = random_stack(2, 2, 3, &mut rng);
        let g = reparam_kernels(&ks, (6, 6), 0.0).unwrap();
        let gg = reparam_kernels(&g, (6, 6), 0.0).unwrap();
        for (a, b) in gg.weights().data().iter().zip(g.weights().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn reparam_scale_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let ks = random_stack(2, 3, 3, &mut rng);
        for c in [0.1, 10.0] {
            let scaled = KernelStack::from_parts(
                2,
                3,
                3,
                3,
                ks.weights().data().iter().map(|&v| c * v).collect(),
            )
            .unwrap();
            let g1 = reparam_kernels(&ks, (7, 7), 0.0).unwrap();
            let g2 = reparam_kernels(&scaled, (7, 7), 0.0).unwrap();
            for (a, b) in g1.weights().data().iter().zip(g2.weights().data()) {
                assert!((a - b).abs() < 1e-10, "scale {c}");
            }
        }
    }

    #[test]
    fn single_channel_reparam_is_all_pass() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let ks = random_stack(1, 1, 3, &mut rng);
        let g = reparam_kernels(&ks, (8, 8), 0.0).unwrap();
        let spectrum = dft(&g.kernel(0, 0));
        for m2 in spectrum.abs2() {
            assert!((m2 - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn shifted_scaled_delta_reparametrizes_to_shifted_sign_delta() {
        // a = c·δ shifted by ℓ: flat spectrum of magnitude |c|, so
        // g = sign(c)·δ at the same shift.
        let mut a = vec![0.0; 6];
        a[2] = -3.0;
        let ks = KernelStack::from_parts(1, 1, 6, 1, a).unwrap();
        let g = reparam_kernels(&ks, (6, 1), 0.0).unwrap();
        for (i, &v) in g.weights().data().iter().enumerate() {
            let expect = if i == 2 { -1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-12, "index {i}: {v}");
        }
    }

    #[test]
    fn orthogonal_pair_reparametrizes_to_scaled_inputs() {
        let ks = KernelStack::from_parts(1, 2, 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = reparam_kernels(&ks, (2, 1), 0.0).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        let expect = [s, 0.0, 0.0, s];
        for (v, e) in g.weights().data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_delta_is_identity_and_scalar_scales() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let z = random_batch(2, 2, 3, 5, &mut rng);
        let id = AffineKernels::delta(2, 1, 1);
        let out = apply_affine(&z, &id).unwrap();
        for (a, b) in out.values().data().iter().zip(z.values().data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let twice = AffineKernels::from_parts(2, 1, 1, vec![2.0, 2.0]).unwrap();
        let out = apply_affine(&z, &twice).unwrap();
        for (a, b) in out.values().data().iter().zip(z.values().data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn reciprocal_affine_undoes_normalization() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let ks = random_stack(2, 2, 3, &mut rng);
        let z = random_batch(2, 2, 6, 6, &mut rng);
        let (normalized, spectra) = normalize_with_kernels(&z, &ks, 0.0).unwrap();

        // r_k = idft(1 / v̂_k): the exact spectral inverse, full support.
        let mut data = Vec::new();
        for k in 0..2 {
            let recip: Vec<f64> = spectra.channel(k).re().iter().map(|&v| 1.0 / v).collect();
            let grid = FreqGrid::new(vec![6, 6], recip, vec![0.0; 36]).unwrap();
            data.extend_from_slice(idft(&grid).data());
        }
        let r = AffineKernels::from_parts(2, 6, 6, data).unwrap();
        let restored = apply_affine(&normalized, &r).unwrap();
        for (a, b) in restored.values().data().iter().zip(z.values().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_convolution_matches_per_channel_direct_sums() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let ks = random_stack(3, 2, 2, &mut rng);
        let z = random_batch(2, 2, 5, 4, &mut rng);
        let out = conv_layer_circular(&z, &ks).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                let mut expect = vec![0.0f64; 20];
                for j in 0..2 {
                    let x = Tensor::new(vec![5, 4], z.channel(b, j).to_vec()).unwrap();
                    let y = circular_convolve(&ks.kernel(k, j), &x, ConvMode::Direct).unwrap();
                    for (s, &v) in expect.iter_mut().zip(y.data()) {
                        *s += v;
                    }
                }
                for (a, e) in out.channel(b, k).iter().zip(&expect) {
                    assert!((a - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn strided_pipeline_composes_conv_norm_downsample() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ks = random_stack(2, 2, 3, &mut rng);
        let z = random_batch(1, 2, 8, 8, &mut rng);

        let s1 = convnorm_strided(&z, &ks, 1, 0.0).unwrap();
        let conv = conv_layer_circular(&z, &ks).unwrap();
        let (norm, _) = normalize_with_kernels(&conv, &ks, 0.0).unwrap();
        assert_eq!(s1.values().data(), norm.values().data());

        let s2 = convnorm_strided(&z, &ks, 2, 0.0).unwrap();
        assert_eq!((s2.height(), s2.width()), (4, 4));
        let manual = downsample(norm.values(), &[1, 1, 2, 2]).unwrap();
        assert_eq!(s2.values().data(), manual.data());
    }

    #[test]
    fn strided_delta_layer_is_plain_downsampling() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let z = random_batch(1, 2, 6, 6, &mut rng);
        let ks = delta_stack(2, 1);
        let out = convnorm_strided(&z, &ks, 2, 0.0).unwrap();
        let expect = downsample(z.values(), &[1, 1, 2, 2]).unwrap();
        for (a, b) in out.values().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crosscorr_rejects_even_kernels() {
        let ks = KernelStack::from_parts(1, 1, 2, 1, vec![1.0, 0.5]).unwrap();
        let z = ActivationBatch::zeros(1, 1, 4, 4).unwrap();
        assert!(matches!(
            convnorm_crosscorr(&z, &ks, 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn crosscorr_delta_kernel_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let z = random_batch(2, 2, 4, 5, &mut rng);
        let ks = delta_stack(2, 1);
        let out = convnorm_crosscorr(&z, &ks, 0.0).unwrap();
        assert_eq!((out.height(), out.width()), (4, 5));
        for (a, b) in out.values().data().iter().zip(z.values().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn crosscorr_extents_are_preserved() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let ks = random_stack(2, 1, 3, &mut rng);
        let z = random_batch(1, 1, 8, 8, &mut rng);
        let out = convnorm_crosscorr(&z, &ks, DEFAULT_EPS).unwrap();
        assert_eq!((out.batch(), out.channels()), (1, 2));
        assert_eq!((out.height(), out.width()), (8, 8));
    }

    #[test]
    fn momentum_hits_the_pinned_values() {
        assert_eq!(eval_momentum(0, 40_000), 1.0);
        assert!((eval_momentum(20_000, 40_000) - 0.5).abs() <= 1e-15);
        assert_eq!(eval_momentum(40_000, 40_000), 0.0);
        assert_eq!(eval_momentum(90_000, 40_000), 0.0);
    }

    #[test]
    fn eval_average_blends_toward_fresh_spectra() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let ks1 = random_stack(2, 1, 3, &mut rng);
        let ks2 = random_stack(2, 1, 3, &mut rng);
        let s1 = PrecondSpectrum::compute(&ks1, (6, 6), 0.0).unwrap();
        let s2 = PrecondSpectrum::compute(&ks2, (6, 6), 0.0).unwrap();

        let mut state = EvalAverageState::new(&s1, 100);
        update_eval_average(&mut state, &s2, 0);
        // μ(0) = 1: untouched.
        assert_eq!(state.average(0), s1.channel(0));

        update_eval_average(&mut state, &s2, 100);
        // μ(cap) = 0: replaced.
        assert_eq!(state.average(0), s2.channel(0));
        assert_eq!(state.iter(), 100);

        let mut state = EvalAverageState::new(&s1, 100);
        update_eval_average(&mut state, &s2, 50);
        let mu = eval_momentum(50, 100);
        for ((a, x), y) in state
            .average(1)
            .re()
            .iter()
            .zip(s1.channel(1).re())
            .zip(s2.channel(1).re())
        {
            assert!((a - (mu * x + (1.0 - mu) * y)).abs() < 1e-15);
            assert!(*a > 0.0);
        }
    }

    #[test]
    fn recomputed_spectra_are_bit_identical() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let ks = random_stack(3, 3, 3, &mut rng);
        let a = PrecondSpectrum::compute(&ks, (8, 8), DEFAULT_EPS).unwrap();
        let b = PrecondSpectrum::compute(&ks, (8, 8), DEFAULT_EPS).unwrap();
        assert_eq!(a, b);
    }
}
