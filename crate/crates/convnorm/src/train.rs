//! Desk-scale training harness.
//!
//! A two-layer circular-convolution classifier with manual
//! backpropagation, a synthetic classification task, finite-difference
//! gradient checks, and convergence traces. The point is not the
//! architecture (it is deliberately tiny) but the training semantics of
//! normalized convolutions:
//!
//! - every training forward recomputes the preconditioner spectra from
//!   the current kernels and caches them;
//! - backward treats the cached spectra as constants (stop-gradient), so
//!   the gradient is exact for the frozen objective;
//! - evaluation forwards use the running spectral average instead of
//!   fresh spectra.
//!
//! All arithmetic is f64 and single-threaded; identical seeds give
//! bit-identical traces.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fourier::{dft, idft, pad_to_extents, FreqGrid};
use crate::norm::{
    apply_affine, conv_layer_circular, normalize_activations, update_eval_average, AffineKernels,
    EvalAverageState, PrecondSpectrum,
};
use crate::tensor::{ActivationBatch, KernelStack, Tensor};

/// Where normalization sits in each layer: absent, preconditioner only,
/// or preconditioner followed by a learnable per-channel affine kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    None,
    ConvNorm,
    ConvNormAffine,
}

impl NormMode {
    pub fn label(self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::ConvNorm => "convnorm",
            NormMode::ConvNormAffine => "convnorm-affine",
        }
    }

    pub fn parse(s: &str) -> Result<NormMode> {
        match s {
            "none" => Ok(NormMode::None),
            "convnorm" => Ok(NormMode::ConvNorm),
            "convnorm-affine" => Ok(NormMode::ConvNormAffine),
            other => Err(Error::Argument(format!(
                "unknown mode {other:?}; expected none, convnorm, or convnorm-affine"
            ))),
        }
    }

    pub fn normalizes(self) -> bool {
        !matches!(self, NormMode::None)
    }

    pub fn has_affine(self) -> bool {
        matches!(self, NormMode::ConvNormAffine)
    }
}

/// Shape and mode of a [`ToyConvNet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub c_in: usize,
    pub c_hidden: usize,
    pub classes: usize,
    pub grid: (usize, usize),
    pub kernel: usize,
    pub mode: NormMode,
    pub epsilon: f64,
}

impl NetConfig {
    /// The demonstration network: 1 → 8 → 8 channels, 3×3 kernels,
    /// 16×16 grids, 4 classes.
    pub fn demo(mode: NormMode) -> NetConfig {
        NetConfig {
            c_in: 1,
            c_hidden: 8,
            classes: 4,
            grid: (16, 16),
            kernel: 3,
            mode,
            epsilon: 1e-12,
        }
    }

    /// A reduced network for gradient checks, where the finite-difference
    /// sweep over every parameter has to stay cheap.
    pub fn tiny(mode: NormMode) -> NetConfig {
        NetConfig {
            c_in: 1,
            c_hidden: 3,
            classes: 3,
            grid: (6, 6),
            kernel: 3,
            mode,
            epsilon: 1e-12,
        }
    }
}

/// Two circular convolution layers with optional normalization and
/// affine kernels, ReLU after each, global average pooling, and a dense
/// map to class logits.
///
/// Parameters flatten in a fixed order (conv1, affine1 if present,
/// conv2, affine2 if present, dense weights, dense bias); gradients use
/// the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConvNet {
    cfg: NetConfig,
    conv1: Vec<f64>,
    affine1: Vec<f64>,
    conv2: Vec<f64>,
    affine2: Vec<f64>,
    dense_w: Vec<f64>,
    dense_b: Vec<f64>,
}

fn xavier_fill(rng: &mut ChaCha20Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-b..b)).collect()
}

fn delta_fill(channels: usize, kk: usize) -> Vec<f64> {
    let mut data = vec![0.0; channels * kk];
    for c in 0..channels {
        data[c * kk] = 1.0;
    }
    data
}

impl ToyConvNet {
    /// Uniform Xavier initialization of the convolution and dense
    /// weights; affine kernels start at δ (identity), biases at zero.
    /// The random stream depends only on the seed and the layer sizes,
    /// so nets that differ only in mode share conv and dense weights.
    pub fn init(cfg: NetConfig, seed: u64) -> Result<ToyConvNet> {
        if cfg.c_in == 0 || cfg.c_hidden == 0 || cfg.classes < 2 {
            return Err(Error::Argument(format!(
                "degenerate net shape: c_in {}, c_hidden {}, classes {}",
                cfg.c_in, cfg.c_hidden, cfg.classes
            )));
        }
        if cfg.kernel == 0 || cfg.kernel > cfg.grid.0 || cfg.kernel > cfg.grid.1 {
            return Err(Error::Argument(format!(
                "kernel extent {} does not fit the {}×{} grid",
                cfg.kernel, cfg.grid.0, cfg.grid.1
            )));
        }
        if !(cfg.epsilon.is_finite() && cfg.epsilon >= 0.0) {
            return Err(Error::Argument(format!(
                "epsilon must be finite and non-negative, got {}",
                cfg.epsilon
            )));
        }
        let kk = cfg.kernel * cfg.kernel;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let conv1 = xavier_fill(
            &mut rng,
            cfg.c_hidden * cfg.c_in * kk,
            cfg.c_in * kk,
            cfg.c_hidden * kk,
        );
        let conv2 = xavier_fill(
            &mut rng,
            cfg.c_hidden * cfg.c_hidden * kk,
            cfg.c_hidden * kk,
            cfg.c_hidden * kk,
        );
        let dense_w = xavier_fill(
            &mut rng,
            cfg.classes * cfg.c_hidden,
            cfg.c_hidden,
            cfg.classes,
        );
        let affine = if cfg.mode.has_affine() {
            delta_fill(cfg.c_hidden, kk)
        } else {
            Vec::new()
        };
        Ok(ToyConvNet {
            cfg,
            conv1,
            affine1: affine.clone(),
            conv2,
            affine2: affine,
            dense_w,
            dense_b: vec![0.0; cfg.classes],
        })
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn kernels1(&self) -> KernelStack {
        let k = self.cfg.kernel;
        KernelStack::from_parts(self.cfg.c_hidden, self.cfg.c_in, k, k, self.conv1.clone())
            .expect("net weights stay well-formed")
    }

    pub fn kernels2(&self) -> KernelStack {
        let k = self.cfg.kernel;
        KernelStack::from_parts(
            self.cfg.c_hidden,
            self.cfg.c_hidden,
            k,
            k,
            self.conv2.clone(),
        )
        .expect("net weights stay well-formed")
    }

    pub fn affine(&self, layer: usize) -> Option<AffineKernels> {
        if !self.cfg.mode.has_affine() {
            return None;
        }
        let data = if layer == 0 {
            &self.affine1
        } else {
            &self.affine2
        };
        let k = self.cfg.kernel;
        Some(
            AffineKernels::from_parts(self.cfg.c_hidden, k, k, data.clone())
                .expect("net weights stay well-formed"),
        )
    }

    pub fn dense_weights(&self) -> (&[f64], &[f64]) {
        (&self.dense_w, &self.dense_b)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.len()
            + self.affine1.len()
            + self.conv2.len()
            + self.affine2.len()
            + self.dense_w.len()
            + self.dense_b.len()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.conv1);
        out.extend_from_slice(&self.affine1);
        out.extend_from_slice(&self.conv2);
        out.extend_from_slice(&self.affine2);
        out.extend_from_slice(&self.dense_w);
        out.extend_from_slice(&self.dense_b);
        out
    }

    pub fn load_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Argument(format!(
                "parameter vector length {} does not match net size {}",
                theta.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for field in [
            &mut self.conv1,
            &mut self.affine1,
            &mut self.conv2,
            &mut self.affine2,
            &mut self.dense_w,
            &mut self.dense_b,
        ] {
            let len = field.len();
            field.copy_from_slice(&theta[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (field, grad) in [
            (&mut self.conv1, &grads.conv1),
            (&mut self.affine1, &grads.affine1),
            (&mut self.conv2, &grads.conv2),
            (&mut self.affine2, &grads.affine2),
            (&mut self.dense_w, &grads.dense_w),
            (&mut self.dense_b, &grads.dense_b),
        ] {
            debug_assert_eq!(field.len(), grad.len());
            for (p, g) in field.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
    }
}

/// Gradients in the net's parameter layout. Affine slots are empty
/// vectors when the mode has no affine kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv1: Vec<f64>,
    pub affine1: Vec<f64>,
    pub conv2: Vec<f64>,
    pub affine2: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.conv1);
        out.extend_from_slice(&self.affine1);
        out.extend_from_slice(&self.conv2);
        out.extend_from_slice(&self.affine2);
        out.extend_from_slice(&self.dense_w);
        out.extend_from_slice(&self.dense_b);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Everything one layer's forward pass produces, kept for backward.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Raw convolution output (input to normalization, or to ReLU when
    /// the mode is `None`).
    pub conv_out: ActivationBatch,
    /// Normalized output, present only when an affine transform follows
    /// (it is the affine transform's input).
    pub norm_out: Option<ActivationBatch>,
    /// Input to ReLU, after the whole linear chain.
    pub pre_act: ActivationBatch,
    /// ReLU output: the layer's output.
    pub out: ActivationBatch,
    /// The preconditioner spectra used by this forward. Backward treats
    /// them as constants; they are recomputed fresh on the next forward.
    pub spectrum: Option<PrecondSpectrum>,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: ActivationBatch,
    pub layer1: LayerTrace,
    pub layer2: LayerTrace,
    /// Pooled features, batch-major: `features[b·C + d]`.
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

fn relu(z: &ActivationBatch) -> ActivationBatch {
    let data: Vec<f64> = z.values().data().iter().map(|&v| v.max(0.0)).collect();
    ActivationBatch::new(
        Tensor::new(z.values().shape().to_vec(), data).expect("relu preserves finiteness"),
    )
    .expect("relu preserves shape")
}

fn layer_forward(
    z: &ActivationBatch,
    kernels: &KernelStack,
    affine: Option<&AffineKernels>,
    mode: NormMode,
    eps: f64,
    frozen: Option<&PrecondSpectrum>,
) -> Result<LayerTrace> {
    let conv_out = conv_layer_circular(z, kernels)?;
    let (pre_act, norm_out, spectrum) = if mode.normalizes() {
        let spectrum = match frozen {
            Some(s) => s.clone(),
            None => PrecondSpectrum::compute(kernels, (conv_out.height(), conv_out.width()), eps)?,
        };
        let normed = normalize_activations(&conv_out, &spectrum)?;
        match affine {
            Some(r) => {
                let shifted = apply_affine(&normed, r)?;
                (shifted, Some(normed), Some(spectrum))
            }
            None => (normed, None, Some(spectrum)),
        }
    } else {
        (conv_out.clone(), None, None)
    };
    let out = relu(&pre_act);
    Ok(LayerTrace {
        conv_out,
        norm_out,
        pre_act,
        out,
        spectrum,
    })
}

/// Forward pass with fresh preconditioner spectra (training semantics).
pub fn forward(net: &ToyConvNet, batch: &ActivationBatch) -> Result<(Vec<f64>, ForwardCache)> {
    forward_with_spectra(net, batch, None, None)
}

/// Forward pass with externally supplied spectra per layer (evaluation
/// semantics, and the frozen objective of the gradient check). `None`
/// recomputes fresh from the current kernels.
pub fn forward_with_spectra(
    net: &ToyConvNet,
    batch: &ActivationBatch,
    s1: Option<&PrecondSpectrum>,
    s2: Option<&PrecondSpectrum>,
) -> Result<(Vec<f64>, ForwardCache)> {
    let cfg = net.cfg();
    if batch.channels() != cfg.c_in || (batch.height(), batch.width()) != cfg.grid {
        return Err(Error::Shape(format!(
            "batch shape ({}, {}, {}) does not match net input ({}, {}, {})",
            batch.channels(),
            batch.height(),
            batch.width(),
            cfg.c_in,
            cfg.grid.0,
            cfg.grid.1
        )));
    }
    let layer1 = layer_forward(
        batch,
        &net.kernels1(),
        net.affine(0).as_ref(),
        cfg.mode,
        cfg.epsilon,
        s1,
    )?;
    let layer2 = layer_forward(
        &layer1.out,
        &net.kernels2(),
        net.affine(1).as_ref(),
        cfg.mode,
        cfg.epsilon,
        s2,
    )?;

    let b = batch.batch();
    let (h, w) = cfg.grid;
    let plane = (h * w) as f64;
    let mut features = vec![0.0; b * cfg.c_hidden];
    for bi in 0..b {
        for d in 0..cfg.c_hidden {
            let sum: f64 = layer2.out.channel(bi, d).iter().sum();
            features[bi * cfg.c_hidden + d] = sum / plane;
        }
    }
    let mut logits = vec![0.0; b * cfg.classes];
    for bi in 0..b {
        for c in 0..cfg.classes {
            let mut acc = net.dense_b[c];
            for d in 0..cfg.c_hidden {
                acc += net.dense_w[c * cfg.c_hidden + d] * features[bi * cfg.c_hidden + d];
            }
            logits[bi * cfg.classes + c] = acc;
        }
    }
    let cache = ForwardCache {
        input: batch.clone(),
        layer1,
        layer2,
        features: features.clone(),
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

fn softmax_probs(logits: &[f64], classes: usize) -> Vec<f64> {
    let b = logits.len() / classes;
    let mut probs = vec![0.0; logits.len()];
    for bi in 0..b {
        let row = &logits[bi * classes..(bi + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        for (c, &l) in row.iter().enumerate() {
            probs[bi * classes + c] = (l - lse).exp();
        }
    }
    probs
}

/// Index of the largest logit; ties break toward the lower class index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Mean softmax cross-entropy and argmax accuracy over the batch.
pub fn loss_and_accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> (f64, f64) {
    let b = labels.len();
    assert_eq!(logits.len(), b * classes, "logit/label shape mismatch");
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (bi, &y) in labels.iter().enumerate() {
        let row = &logits[bi * classes..(bi + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        if argmax(row) == y {
            correct += 1;
        }
    }
    (loss / b as f64, correct as f64 / b as f64)
}

fn channel_tensor(z: &ActivationBatch, b: usize, c: usize) -> Tensor {
    Tensor::new(vec![z.height(), z.width()], z.channel(b, c).to_vec())
        .expect("activation planes are finite")
}

fn batch_from_planes(
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    planes: Vec<Vec<f64>>,
) -> ActivationBatch {
    debug_assert_eq!(planes.len(), b * c);
    let mut data = Vec::with_capacity(b * c * h * w);
    for p in planes {
        data.extend_from_slice(&p);
    }
    ActivationBatch::new(Tensor::new(vec![b, c, h, w], data).expect("planes are finite"))
        .expect("plane assembly preserves shape")
}

/// Extracts the low-index corner (the kernel support) of a full-extent
/// gradient grid.
fn corner(full: &Tensor, k1: usize, k2: usize) -> Vec<f64> {
    let w = full.shape()[1];
    let d = full.data();
    let mut out = Vec::with_capacity(k1 * k2);
    for r in 0..k1 {
        out.extend_from_slice(&d[r * w..r * w + k2]);
    }
    out
}

/// Accumulates conj(x̂)·ĝ into (re, im) planes; the adjoint of spectral
/// convolution with respect to the kernel, summed over the batch in
/// index order so results are deterministic.
fn accumulate_corr(acc_re: &mut [f64], acc_im: &mut [f64], xf: &FreqGrid, gf: &FreqGrid) {
    for i in 0..acc_re.len() {
        let (xr, xi) = (xf.re()[i], xf.im()[i]);
        let (gr, gi) = (gf.re()[i], gf.im()[i]);
        // conj(x) * g
        acc_re[i] += xr * gr + xi * gi;
        acc_im[i] += xr * gi - xi * gr;
    }
}

struct LayerGrads {
    kernels: Vec<f64>,
    affine: Vec<f64>,
    input: Option<ActivationBatch>,
}

fn layer_backward(
    input: &ActivationBatch,
    trace: &LayerTrace,
    kernels: &KernelStack,
    affine: Option<&AffineKernels>,
    dpre: &ActivationBatch,
    need_input_grad: bool,
) -> Result<LayerGrads> {
    let (b, co) = (dpre.batch(), dpre.channels());
    let (h, w) = (dpre.height(), dpre.width());
    let n = h * w;
    let shape = vec![h, w];

    // Affine adjoint: z̄ = r ∗ z̃ gives dz̃ = idft(conj(r̂)·dẑ̄) and
    // dr = Σ_b corner(idft(conj(ẑ̃)·dẑ̄)).
    let (dnorm, affine_grad) = match affine {
        Some(r) => {
            let norm_out = trace
                .norm_out
                .as_ref()
                .expect("affine layers cache their normalization output");
            let (k1, k2) = r.extents();
            let r_spectra: Vec<FreqGrid> = (0..co)
                .map(|k| dft(&pad_to_extents(&r.kernel(k), &[h, w])))
                .collect();
            let mut dr_re = vec![vec![0.0; n]; co];
            let mut dr_im = vec![vec![0.0; n]; co];
            let mut planes = Vec::with_capacity(b * co);
            for bi in 0..b {
                for k in 0..co {
                    let gf = dft(&channel_tensor(dpre, bi, k));
                    let zf = dft(&channel_tensor(norm_out, bi, k));
                    accumulate_corr(&mut dr_re[k], &mut dr_im[k], &zf, &gf);
                    let dz = idft(&r_spectra[k].conj().mul(&gf));
                    planes.push(dz.into_data());
                }
            }
            let mut dr = Vec::with_capacity(co * k1 * k2);
            for k in 0..co {
                let full = idft(&FreqGrid::new(
                    shape.clone(),
                    dr_re[k].clone(),
                    dr_im[k].clone(),
                )?);
                dr.extend_from_slice(&corner(&full, k1, k2));
            }
            (batch_from_planes(b, co, h, w, planes), dr)
        }
        None => (dpre.clone(), Vec::new()),
    };

    // Normalization adjoint: the preconditioner spectrum is real and
    // even, so the adjoint is the same spectral multiplication. The
    // spectrum is the cached constant; no gradient flows into it.
    let dconv = match &trace.spectrum {
        Some(s) => normalize_activations(&dnorm, s)?,
        None => dnorm,
    };

    // Convolution adjoints.
    let ci = kernels.c_in();
    let (k1, k2) = (kernels.k1(), kernels.k2());
    let in_spectra: Vec<FreqGrid> = (0..b)
        .flat_map(|bi| (0..ci).map(move |j| (bi, j)))
        .map(|(bi, j)| dft(&channel_tensor(input, bi, j)))
        .collect();
    let out_spectra: Vec<FreqGrid> = (0..b)
        .flat_map(|bi| (0..co).map(move |k| (bi, k)))
        .map(|(bi, k)| dft(&channel_tensor(&dconv, bi, k)))
        .collect();

    let mut dkernels = Vec::with_capacity(co * ci * k1 * k2);
    for k in 0..co {
        for j in 0..ci {
            let mut acc_re = vec![0.0; n];
            let mut acc_im = vec![0.0; n];
            for bi in 0..b {
                accumulate_corr(
                    &mut acc_re,
                    &mut acc_im,
                    &in_spectra[bi * ci + j],
                    &out_spectra[bi * co + k],
                );
            }
            let full = idft(&FreqGrid::new(shape.clone(), acc_re, acc_im)?);
            dkernels.extend_from_slice(&corner(&full, k1, k2));
        }
    }

    let input_grad = if need_input_grad {
        // Grouped by input channel: row j holds â_kj for every k.
        let kernel_spectra: Vec<Vec<FreqGrid>> = (0..ci)
            .map(|j| {
                (0..co)
                    .map(|k| dft(&pad_to_extents(&kernels.kernel(k, j), &[h, w])))
                    .collect()
            })
            .collect();
        let mut planes = Vec::with_capacity(b * ci);
        for bi in 0..b {
            for row in &kernel_spectra {
                let mut acc_re = vec![0.0; n];
                let mut acc_im = vec![0.0; n];
                for (spec, out_spec) in row.iter().zip(&out_spectra[bi * co..(bi + 1) * co]) {
                    accumulate_corr(&mut acc_re, &mut acc_im, spec, out_spec);
                }
                let dz = idft(&FreqGrid::new(shape.clone(), acc_re, acc_im)?);
                planes.push(dz.into_data());
            }
        }
        Some(batch_from_planes(b, ci, h, w, planes))
    } else {
        None
    };

    Ok(LayerGrads {
        kernels: dkernels,
        affine: affine_grad,
        input: input_grad,
    })
}

fn relu_mask(d: &ActivationBatch, pre: &ActivationBatch) -> ActivationBatch {
    let data: Vec<f64> = d
        .values()
        .data()
        .iter()
        .zip(pre.values().data())
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect();
    ActivationBatch::new(
        Tensor::new(d.values().shape().to_vec(), data).expect("mask preserves finiteness"),
    )
    .expect("mask preserves shape")
}

/// Gradients of the mean cross-entropy with respect to every parameter,
/// treating the cached preconditioner spectra as constants.
pub fn backward(net: &ToyConvNet, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
    let cfg = net.cfg();
    let b = cache.input.batch();
    if labels.len() != b {
        return Err(Error::Argument(format!(
            "label count {} does not match batch size {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cfg.classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {} classes",
            cfg.classes
        )));
    }
    let classes = cfg.classes;
    let ch = cfg.c_hidden;
    let (h, w) = cfg.grid;
    let plane = (h * w) as f64;

    let probs = softmax_probs(&cache.logits, classes);
    let scale = 1.0 / b as f64;
    let mut dlogits = probs;
    for (bi, &y) in labels.iter().enumerate() {
        dlogits[bi * classes + y] -= 1.0;
    }
    for v in dlogits.iter_mut() {
        *v *= scale;
    }

    let mut dense_w = vec![0.0; classes * ch];
    let mut dense_b = vec![0.0; classes];
    for bi in 0..b {
        for c in 0..classes {
            let g = dlogits[bi * classes + c];
            dense_b[c] += g;
            for d in 0..ch {
                dense_w[c * ch + d] += g * cache.features[bi * ch + d];
            }
        }
    }

    // Pooled-feature gradient spread uniformly over the plane.
    let mut planes = Vec::with_capacity(b * ch);
    for bi in 0..b {
        for d in 0..ch {
            let mut df = 0.0;
            for c in 0..classes {
                df += dlogits[bi * classes + c] * net.dense_w[c * ch + d];
            }
            planes.push(vec![df / plane; h * w]);
        }
    }
    let dz2 = batch_from_planes(b, ch, h, w, planes);

    let dpre2 = relu_mask(&dz2, &cache.layer2.pre_act);
    let l2 = layer_backward(
        &cache.layer1.out,
        &cache.layer2,
        &net.kernels2(),
        net.affine(1).as_ref(),
        &dpre2,
        true,
    )?;
    let dz1 = l2
        .input
        .expect("layer 2 backward produces an input gradient");
    let dpre1 = relu_mask(&dz1, &cache.layer1.pre_act);
    let l1 = layer_backward(
        &cache.input,
        &cache.layer1,
        &net.kernels1(),
        net.affine(0).as_ref(),
        &dpre1,
        false,
    )?;

    Ok(Gradients {
        conv1: l1.kernels,
        affine1: l1.affine,
        conv2: l2.kernels,
        affine2: l2.affine,
        dense_w,
        dense_b,
    })
}

/// Max over entries of |fd − bp| / max(1e−8, |fd| + |bp|).
pub fn relative_gradient_error(fd: &[f64], bp: &[f64]) -> f64 {
    assert_eq!(fd.len(), bp.len(), "gradient length mismatch");
    fd.iter()
        .zip(bp)
        .map(|(&f, &g)| (f - g).abs() / (1e-8f64).max(f.abs() + g.abs()))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar function at `theta`.
pub fn fd_gradient(mut eval: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let plus = eval(&work);
        work[i] = theta[i] - h;
        let minus = eval(&work);
        work[i] = theta[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Compares backward against central finite differences of the frozen
/// objective: the preconditioner spectra are computed once at the
/// evaluation point and held fixed for every perturbed forward, matching
/// the stop-gradient semantics of backward. Returns the max relative
/// error over all parameters. Intended for small nets; the sweep costs
/// two forwards per parameter.
pub fn gradcheck(
    net: &ToyConvNet,
    batch: &ActivationBatch,
    labels: &[usize],
    h: f64,
) -> Result<f64> {
    let cfg = *net.cfg();
    let (s1, s2) = if cfg.mode.normalizes() {
        let s1 = PrecondSpectrum::compute(&net.kernels1(), cfg.grid, cfg.epsilon)?;
        let s2 = PrecondSpectrum::compute(&net.kernels2(), cfg.grid, cfg.epsilon)?;
        (Some(s1), Some(s2))
    } else {
        (None, None)
    };

    let (_, cache) = forward_with_spectra(net, batch, s1.as_ref(), s2.as_ref())?;
    let bp = backward(net, &cache, labels)?.flatten();

    let theta = net.flatten_params();
    let mut probe = net.clone();
    let fd = fd_gradient(
        |t| {
            probe.load_params(t).expect("parameter layout is fixed");
            let (logits, _) = forward_with_spectra(&probe, batch, s1.as_ref(), s2.as_ref())
                .expect("perturbed forward stays finite");
            loss_and_accuracy(&logits, cfg.classes, labels).0
        },
        &theta,
        h,
    );
    Ok(relative_gradient_error(&fd, &bp))
}

/// Deterministic synthetic classification data: per-class template grids
/// plus Gaussian noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub seed: u64,
    pub classes: usize,
    pub noise: f64,
    pub templates: Vec<Tensor>,
    pub train: ActivationBatch,
    pub train_labels: Vec<usize>,
    pub test: ActivationBatch,
    pub test_labels: Vec<usize>,
}

impl SyntheticTask {
    /// The demonstration task: 4 classes on 16×16 grids, 128 train and
    /// 64 test samples, noise 0.5.
    pub fn demo(seed: u64) -> SyntheticTask {
        generate_synthetic_task(seed, 4, (16, 16), 128, 64, 0.5).expect("demo parameters are valid")
    }
}

fn draw_split(
    rng: &mut ChaCha20Rng,
    templates: &[Tensor],
    classes: usize,
    grid: (usize, usize),
    count: usize,
    noise: f64,
) -> (ActivationBatch, Vec<usize>) {
    let (h, w) = grid;
    let mut data = Vec::with_capacity(count * h * w);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let y = i % classes;
        labels.push(y);
        for &t in templates[y].data() {
            let g: f64 = rng.sample(StandardNormal);
            data.push(t + noise * g);
        }
    }
    let values = Tensor::new(vec![count, 1, h, w], data).expect("synthetic data is finite");
    (
        ActivationBatch::new(values).expect("synthetic batch is well-formed"),
        labels,
    )
}

/// Deterministic task generation: templates are standard-normal grids,
/// samples add scaled Gaussian noise, labels cycle through the classes
/// so splits stay balanced. Identical seeds give bit-identical tasks.
pub fn generate_synthetic_task(
    seed: u64,
    classes: usize,
    grid: (usize, usize),
    n_train: usize,
    n_test: usize,
    noise: f64,
) -> Result<SyntheticTask> {
    if classes < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::Argument(
            "train and test splits must be non-empty".to_string(),
        ));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Argument(format!(
            "noise scale must be finite and non-negative, got {noise}"
        )));
    }
    let (h, w) = grid;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let templates: Vec<Tensor> = (0..classes)
        .map(|_| {
            let data: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(vec![h, w], data).expect("templates are finite")
        })
        .collect();
    let (train, train_labels) = draw_split(&mut rng, &templates, classes, grid, n_train, noise);
    let (test, test_labels) = draw_split(&mut rng, &templates, classes, grid, n_test, noise);
    Ok(SyntheticTask {
        seed,
        classes,
        noise,
        templates,
        train,
        train_labels,
        test,
        test_labels,
    })
}

/// SGD hyperparameters. The learning rate default mirrors the training
/// setup the harness demonstrates; there is no momentum or weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn demo(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            epochs,
            batch_size: 32,
            seed,
        }
    }
}

/// One SGD step's record: minibatch loss before the step and full
/// training-set accuracy after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss: f64,
    pub train_acc: f64,
}

/// Test accuracy at the end of an epoch, evaluated with the running
/// spectral averages when the mode normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_acc: f64,
}

/// Full trace of a run, including the configuration echo. Serializes
/// deterministically; identical (seed, config) give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub mode: String,
    pub seed: u64,
    pub lr: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations: Vec<IterationRecord>,
    pub epoch_metrics: Vec<EpochRecord>,
    pub diverged: bool,
}

/// First iteration whose recorded training accuracy reaches `threshold`.
pub fn iterations_to_accuracy(trace: &TrainTrace, threshold: f64) -> Option<usize> {
    trace
        .iterations
        .iter()
        .find(|r| r.train_acc >= threshold)
        .map(|r| r.iteration)
}

fn gather(
    batch: &ActivationBatch,
    labels: &[usize],
    idx: &[usize],
) -> (ActivationBatch, Vec<usize>) {
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let mut data = Vec::with_capacity(idx.len() * c * h * w);
    for &i in idx {
        for ch in 0..c {
            data.extend_from_slice(batch.channel(i, ch));
        }
    }
    let values = Tensor::new(vec![idx.len(), c, h, w], data).expect("gather preserves finiteness");
    (
        ActivationBatch::new(values).expect("gather preserves shape"),
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

enum EvalOutcome {
    Accuracy(f64),
    Diverged,
}

fn try_evaluate(
    net: &ToyConvNet,
    batch: &ActivationBatch,
    labels: &[usize],
    s1: Option<&PrecondSpectrum>,
    s2: Option<&PrecondSpectrum>,
) -> Result<EvalOutcome> {
    match forward_with_spectra(net, batch, s1, s2) {
        Ok((logits, _)) => {
            let (loss, acc) = loss_and_accuracy(&logits, net.cfg().classes, labels);
            if loss.is_finite() {
                Ok(EvalOutcome::Accuracy(acc))
            } else {
                Ok(EvalOutcome::Diverged)
            }
        }
        // Overflowed weights surface as non-finite tensors mid-forward.
        Err(Error::NonFinite { .. }) => Ok(EvalOutcome::Diverged),
        Err(e) => Err(e),
    }
}

/// Plain SGD over the synthetic task. Deterministic given the seed: the
/// epoch shuffles come from one ChaCha stream, batches are visited in
/// shuffled order, and all reductions run in index order. Divergence
/// (non-finite loss or weights) sets the trace flag and halts cleanly.
pub fn train(net: &mut ToyConvNet, task: &SyntheticTask, cfg: &TrainConfig) -> Result<TrainTrace> {
    let ncfg = *net.cfg();
    if cfg.batch_size == 0 || cfg.batch_size > task.train.batch() {
        return Err(Error::Argument(format!(
            "batch size {} is outside 1..={}",
            cfg.batch_size,
            task.train.batch()
        )));
    }
    if task.classes != ncfg.classes {
        return Err(Error::Argument(format!(
            "task has {} classes but the net expects {}",
            task.classes, ncfg.classes
        )));
    }
    let mut trace = TrainTrace {
        mode: ncfg.mode.label().to_string(),
        seed: cfg.seed,
        lr: cfg.lr,
        epsilon: ncfg.epsilon,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        iterations: Vec::new(),
        epoch_metrics: Vec::new(),
        diverged: false,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..task.train.batch()).collect();
    let mut eval_state: Option<(EvalAverageState, EvalAverageState)> = None;
    let mut iter: u64 = 0;
    // The eval average's cosine rampdown spans the planned run, so the
    // average is still the early-iterate blend at the start and exactly
    // the fresh spectrum by the last step.
    let steps_per_epoch = task.train.batch().div_ceil(cfg.batch_size);
    let rampdown_cap = (cfg.epochs * steps_per_epoch).max(1) as u64;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (xb, yb) = gather(&task.train, &task.train_labels, chunk);
            let (logits, cache) = match forward(net, &xb) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => {
                    trace.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let (loss, _) = loss_and_accuracy(&logits, ncfg.classes, &yb);
            if !loss.is_finite() {
                trace.diverged = true;
                break 'epochs;
            }

            if ncfg.mode.normalizes() {
                let s1 = cache.layer1.spectrum.as_ref().expect("normalizing forward");
                let s2 = cache.layer2.spectrum.as_ref().expect("normalizing forward");
                let (st1, st2) = eval_state.get_or_insert_with(|| {
                    (
                        EvalAverageState::new(s1, rampdown_cap),
                        EvalAverageState::new(s2, rampdown_cap),
                    )
                });
                update_eval_average(st1, s1, iter);
                update_eval_average(st2, s2, iter);
            }

            let grads = backward(net, &cache, &yb)?;
            net.sgd_step(&grads, cfg.lr);
            iter += 1;

            let train_acc = match try_evaluate(net, &task.train, &task.train_labels, None, None)? {
                EvalOutcome::Accuracy(acc) => acc,
                EvalOutcome::Diverged => {
                    trace.diverged = true;
                    break 'epochs;
                }
            };
            trace.iterations.push(IterationRecord {
                iteration: iter as usize,
                loss,
                train_acc,
            });
        }

        let eval_spectra = eval_state
            .as_ref()
            .map(|(a, b)| (a.as_spectrum(ncfg.epsilon), b.as_spectrum(ncfg.epsilon)));
        let (s1, s2) = match &eval_spectra {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let test_acc = match try_evaluate(net, &task.test, &task.test_labels, s1, s2)? {
            EvalOutcome::Accuracy(acc) => acc,
            EvalOutcome::Diverged => {
                trace.diverged = true;
                break 'epochs;
            }
        };
        trace.epoch_metrics.push(EpochRecord {
            epoch: epoch + 1,
            test_acc,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_task(seed: u64) -> SyntheticTask {
        generate_synthetic_task(seed, 3, (6, 6), 24, 12, 0.5).unwrap()
    }

    fn identity_kernel_net(mode: NormMode, eps: f64) -> ToyConvNet {
        // c_in = c_hidden = 2 with a_kj = δ·[k = j]: both layers are the
        // identity operator, and the combined spectrum is exactly 1.
        let cfg = NetConfig {
            c_in: 2,
            c_hidden: 2,
            classes: 3,
            grid: (5, 5),
            kernel: 1,
            mode,
            epsilon: eps,
        };
        let mut net = ToyConvNet::init(cfg, 1).unwrap();
        let mut theta = net.flatten_params();
        // conv1 and conv2 are both 2×2×1×1.
        theta[0..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        theta[4..8].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        net.load_params(&theta).unwrap();
        net
    }

    fn random_batch(b: usize, c: usize, h: usize, w: usize, seed: u64) -> ActivationBatch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * c * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        ActivationBatch::new(Tensor::new(vec![b, c, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn task_generation_is_deterministic() {
        let a = generate_synthetic_task(0, 4, (8, 8), 32, 16, 0.5).unwrap();
        let b = generate_synthetic_task(0, 4, (8, 8), 32, 16, 0.5).unwrap();
        let bits = |t: &ActivationBatch| -> Vec<u64> {
            t.values().data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a.train), bits(&b.train));
        assert_eq!(bits(&a.test), bits(&b.test));
        assert_eq!(a.train_labels, b.train_labels);
    }

    #[test]
    fn zero_noise_samples_equal_their_templates() {
        let task = generate_synthetic_task(3, 2, (4, 4), 6, 4, 0.0).unwrap();
        for (i, &y) in task.train_labels.iter().enumerate() {
            assert_eq!(task.train.channel(i, 0), task.templates[y].data());
        }
    }

    #[test]
    fn labels_are_balanced() {
        let task = generate_synthetic_task(0, 4, (16, 16), 256, 128, 0.5).unwrap();
        for class in 0..4 {
            assert_eq!(
                task.train_labels.iter().filter(|&&y| y == class).count(),
                64
            );
            assert_eq!(task.test_labels.iter().filter(|&&y| y == class).count(), 32);
        }
        assert!(generate_synthetic_task(0, 1, (4, 4), 8, 4, 0.5).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits_and_uniform_softmax() {
        let cfg = NetConfig::tiny(NormMode::ConvNorm);
        let mut net = ToyConvNet::init(cfg, 0).unwrap();
        let zeros = vec![0.0; net.param_count()];
        net.load_params(&zeros).unwrap();
        let batch = random_batch(2, 1, 6, 6, 5);
        let (logits, _) = forward(&net, &batch).unwrap();
        assert!(logits.iter().all(|&l| l == 0.0));
        let probs = softmax_probs(&logits, cfg.classes);
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_kernels_make_normalization_a_no_op() {
        // With the combined spectrum exactly 1 and ε = 0, the normalized
        // forward equals the plain forward up to transform roundoff.
        let plain = identity_kernel_net(NormMode::None, 0.0);
        let normed = identity_kernel_net(NormMode::ConvNorm, 0.0);
        let batch = random_batch(3, 2, 5, 5, 7);
        let (l0, _) = forward(&plain, &batch).unwrap();
        let (l1, _) = forward(&normed, &batch).unwrap();
        for (a, b) in l0.iter().zip(&l1) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn samples_are_independent_within_a_batch() {
        let cfg = NetConfig::tiny(NormMode::ConvNormAffine);
        let net = ToyConvNet::init(cfg, 2).unwrap();
        let batch = random_batch(8, 1, 6, 6, 9);
        let (all, _) = forward(&net, &batch).unwrap();
        let one = gather(&batch, &[0; 8], &[5]).0;
        let (solo, _) = forward(&net, &one).unwrap();
        assert_eq!(&all[5 * 3..6 * 3], &solo[..]);
    }

    #[test]
    fn one_hot_limit_sends_gradients_to_zero() {
        let cfg = NetConfig::tiny(NormMode::None);
        let mut net = ToyConvNet::init(cfg, 0).unwrap();
        let mut theta = vec![0.0; net.param_count()];
        // Zero weights, bias strongly favoring class 0: softmax is one-hot
        // to machine precision, so with labels = 0 the loss gradient
        // vanishes.
        let n = theta.len();
        theta[n - 3] = 50.0;
        theta[n - 2] = -50.0;
        theta[n - 1] = -50.0;
        net.load_params(&theta).unwrap();
        let batch = random_batch(4, 1, 6, 6, 3);
        let (_, cache) = forward(&net, &batch).unwrap();
        let grads = backward(&net, &cache, &[0, 0, 0, 0]).unwrap();
        assert!(grads.max_abs() < 1e-30);
    }

    #[test]
    fn duplicated_batch_leaves_gradients_unchanged() {
        let cfg = NetConfig::tiny(NormMode::ConvNorm);
        let net = ToyConvNet::init(cfg, 4).unwrap();
        let batch = random_batch(3, 1, 6, 6, 11);
        let labels = [0usize, 1, 2];
        let doubled = {
            let mut data = batch.values().data().to_vec();
            data.extend_from_slice(batch.values().data());
            ActivationBatch::new(Tensor::new(vec![6, 1, 6, 6], data).unwrap()).unwrap()
        };
        let (_, c1) = forward(&net, &batch).unwrap();
        let (_, c2) = forward(&net, &doubled).unwrap();
        let g1 = backward(&net, &c1, &labels).unwrap().flatten();
        let g2 = backward(&net, &c2, &[0, 1, 2, 0, 1, 2]).unwrap().flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn quadratic_stub_matches_analytic_gradient() {
        // f(θ) = Σ cᵢθᵢ² has gradient 2cᵢθᵢ; central differences are
        // exact for quadratics up to float cancellation.
        let coeffs = [0.7, -1.3, 2.1, 0.4];
        let theta = [0.3, -0.8, 1.1, -0.2];
        let fd = fd_gradient(
            |t| t.iter().zip(&coeffs).map(|(&x, &c)| c * x * x).sum(),
            &theta,
            1e-6,
        );
        let analytic: Vec<f64> = theta
            .iter()
            .zip(&coeffs)
            .map(|(&x, &c)| 2.0 * c * x)
            .collect();
        assert!(relative_gradient_error(&fd, &analytic) < 1e-9);
    }

    #[test]
    fn gradcheck_passes_in_every_mode() {
        let batch = random_batch(3, 1, 6, 6, 13);
        let labels = [0usize, 1, 2];
        for mode in [NormMode::None, NormMode::ConvNorm, NormMode::ConvNormAffine] {
            let net = ToyConvNet::init(NetConfig::tiny(mode), 17).unwrap();
            let err = gradcheck(&net, &batch, &labels, 1e-6).unwrap();
            assert!(err < 1e-5, "{}: {err}", mode.label());
        }
    }

    #[test]
    fn normalization_changes_conv_gradients_off_the_identity_point() {
        // Perturb the identity kernels: the forward passes now differ, so
        // the conv gradients must differ too, while each mode still

        // matches its own finite-difference oracle.
        fn perturb(net: &mut ToyConvNet, seed: u64) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut theta = net.flatten_params();
            for v in theta[0..8].iter_mut() {
                *v += 0.1 * rng.gen_range(-1.0..1.0f64);
            }
            net.load_params(&theta).unwrap();
        }
        let mut plain = identity_kernel_net(NormMode::None, 1e-12);
        let mut normed = identity_kernel_net(NormMode::ConvNorm, 1e-12);
        // Same seed: both nets get the same perturbed kernels.
        perturb(&mut plain, 19);
        perturb(&mut normed, 19);

        let batch = random_batch(3, 2, 5, 5, 23);
        let labels = [0usize, 1, 2];
        assert!(gradcheck(&plain, &batch, &labels, 1e-6).unwrap() < 1e-5);
        assert!(gradcheck(&normed, &batch, &labels, 1e-6).unwrap() < 1e-5);

        let (_, cp) = forward(&plain, &batch).unwrap();
        let (_, cn) = forward(&normed, &batch).unwrap();
        let gp = backward(&plain, &cp, &labels).unwrap();
        let gn = backward(&normed, &cn, &labels).unwrap();
        let diff: f64 = gp
            .conv1
            .iter()
            .zip(&gn.conv1)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "conv gradients should differ, max diff {diff}");
    }

    #[test]
    fn scaled_kernels_leave_the_normalized_forward_unchanged() {
        let mut cfg = NetConfig::tiny(NormMode::ConvNorm);
        cfg.epsilon = 0.0;
        let net = ToyConvNet::init(cfg, 29).unwrap();
        let batch = random_batch(2, 1, 6, 6, 31);
        let (base, _) = forward(&net, &batch).unwrap();
        for c in [0.1, 10.0] {
            let mut scaled = net.clone();
            let mut theta = scaled.flatten_params();
            let conv_len = scaled.conv1.len() + scaled.conv2.len();
            for v in theta[0..conv_len].iter_mut() {
                *v *= c;
            }
            scaled.load_params(&theta).unwrap();
            let (out, _) = forward(&scaled, &batch).unwrap();
            for (a, b) in base.iter().zip(&out) {
                assert!((a - b).abs() < 1e-10, "c = {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn spectra_are_stable_within_a_step_and_move_across_steps() {
        let cfg = NetConfig::tiny(NormMode::ConvNorm);
        let mut net = ToyConvNet::init(cfg, 37).unwrap();
        let batch = random_batch(3, 1, 6, 6, 41);
        let labels = [0usize, 1, 2];
        let (_, cache) = forward(&net, &batch).unwrap();
        let before = cache.layer1.spectrum.clone().unwrap();
        // Recomputing from the same kernels is bit-identical.
        let again = PrecondSpectrum::compute(&net.kernels1(), (6, 6), cfg.epsilon).unwrap();
        for k in 0..before.channels() {
            assert_eq!(before.channel(k).re(), again.channel(k).re());
        }
        let grads = backward(&net, &cache, &labels).unwrap();
        net.sgd_step(&grads, 0.5);
        let (_, cache2) = forward(&net, &batch).unwrap();
        let after = cache2.layer1.spectrum.clone().unwrap();
        let moved = (0..before.channels()).any(|k| {
            before
                .channel(k)
                .re()
                .iter()
                .zip(after.channel(k).re())
                .any(|(a, b)| a != b)
        });
        assert!(moved, "spectra should change after a parameter update");
    }

    #[test]
    fn zero_learning_rate_freezes_the_loss() {
        let task = tiny_task(0);
        let cfg = NetConfig {
            grid: (6, 6),
            ..NetConfig::tiny(NormMode::ConvNorm)
        };
        let mut net = ToyConvNet::init(cfg, 5).unwrap();
        let tcfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: task.train.batch(),
            seed: 0,
        };
        let trace = train(&mut net, &task, &tcfg).unwrap();
        assert_eq!(trace.iterations.len(), 3);
        let first = trace.iterations[0];
        for r in &trace.iterations {
            assert!((r.loss - first.loss).abs() < 1e-12);
            assert_eq!(r.train_acc, first.train_acc);
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let task = tiny_task(1);
        let tcfg = TrainConfig {
            lr: 0.1,
            epochs: 2,
            batch_size: 8,
            seed: 9,
        };
        let cfg = NetConfig::tiny(NormMode::ConvNormAffine);
        let mut n1 = ToyConvNet::init(cfg, 3).unwrap();
        let mut n2 = ToyConvNet::init(cfg, 3).unwrap();
        let t1 = train(&mut n1, &task, &tcfg).unwrap();
        let t2 = train(&mut n2, &task, &tcfg).unwrap();
        assert_eq!(
            serde_json::to_string(&t1).unwrap(),
            serde_json::to_string(&t2).unwrap()
        );
    }

    #[test]
    fn divergence_is_flagged_and_halts_the_run() {
        // Conv weights near the overflow scale: products blow past the
        // f64 range within the first couple of steps, and the run must
        // flag divergence and stop instead of erroring out.
        let task = tiny_task(2);
        let cfg = NetConfig::tiny(NormMode::None);
        let mut net = ToyConvNet::init(cfg, 7).unwrap();
        let mut theta = net.flatten_params();
        let conv_len = 3 * 9 + 9 * 9;
        for v in theta[0..conv_len].iter_mut() {
            *v = 1e150;
        }
        net.load_params(&theta).unwrap();
        let tcfg = TrainConfig {
            lr: 0.1,
            epochs: 4,
            batch_size: 8,
            seed: 1,
        };
        let trace = train(&mut net, &task, &tcfg).unwrap();
        assert!(trace.diverged);
        assert!(trace.iterations.len() < 4 * 3);
    }

    #[test]
    fn accuracy_threshold_lookup() {
        let mk = |accs: &[f64]| TrainTrace {
            mode: "none".into(),
            seed: 0,
            lr: 0.1,
            epsilon: 1e-12,
            batch_size: 1,
            epochs: 1,
            iterations: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| IterationRecord {
                    iteration: i + 1,
                    loss: 1.0,
                    train_acc: a,
                })
                .collect(),
            epoch_metrics: Vec::new(),
            diverged: false,
        };
        assert_eq!(iterations_to_accuracy(&mk(&[0.2, 0.9, 0.95]), 0.9), Some(2));
        assert_eq!(iterations_to_accuracy(&mk(&[0.2, 0.3]), 0.9), None);
    }
}
