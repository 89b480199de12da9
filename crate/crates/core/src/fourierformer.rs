//! Fourier Prior Embedding (FPE) blocks and the FourierFormer stack.
//!
//! A block mixes tokens in the frequency domain instead of with attention:
//!
//! ```text
//! y1 = x  + spatial_interaction(LN(x))
//! y2 = y1 + channel_evolution(LN(y1))
//! ```
//!
//! Spatial interaction filters the real and imaginary spectra of every
//! channel with a depthwise 3x3 convolution, returns to the spatial domain
//! and layer-normalizes. Channel evolution mixes channels per frequency with
//! a 1x1 convolution on each spectral part. Real and imaginary branches have
//! separate weights. Only the real part of each inverse transform is kept.
//!
//! [`attention_baseline_forward`] is a single-head softmax attention block
//! with the same residual interface, used as the quadratic-cost reference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{dft2d, idft2d_complex, ComplexPair};
use crate::numeric::kernels::{self, gemm, gemm_nt, layer_norm_forward};
use crate::numeric::{Scalar, Tape, Tensor, Var};
use crate::params::{param_struct, Bind, Binder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpeConfig {
    pub channels: usize,
    pub blocks: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    /// Ablation switch for the spatial interaction sub-module.
    pub spatial_interaction: bool,
    /// Ablation switch for the channel evolution sub-module.
    pub channel_evolution: bool,
}

impl Default for FpeConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: 2,
            leaky_slope: 0.2,
            ln_eps: 1e-5,
            spatial_interaction: true,
            channel_evolution: true,
        }
    }
}

impl FpeConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, message: &str| Error::Config {
            path: format!("{path}.{field}"),
            message: message.to_string(),
        };
        if self.channels == 0 {
            return Err(bad("channels", "must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(bad("leaky_slope", "must lie in (0, 1)"));
        }
        if self.ln_eps <= 0.0 {
            return Err(bad("ln_eps", "must be positive"));
        }
        Ok(())
    }
}

param_struct! {
    /// Weights of one FPE block for `C` channels.
    pub struct BlockParams => BlockVars {
        norm1_gamma,
        norm1_beta,
        spatial_kernel_re,
        spatial_bias_re,
        spatial_kernel_im,
        spatial_bias_im,
        spatial_norm_gamma,
        spatial_norm_beta,
        norm2_gamma,
        norm2_beta,
        channel_weight_re,
        channel_bias_re,
        channel_weight_im,
        channel_bias_im,
    }
}

impl BlockParams {
    /// All convolution weights and biases zero, unit gains: the block is the identity.
    pub fn zeros(c: usize) -> Self {
        Self {
            norm1_gamma: Tensor::ones(&[c]),
            norm1_beta: Tensor::zeros(&[c]),
            spatial_kernel_re: Tensor::zeros(&[3, 3, c]),
            spatial_bias_re: Tensor::zeros(&[c]),
            spatial_kernel_im: Tensor::zeros(&[3, 3, c]),
            spatial_bias_im: Tensor::zeros(&[c]),
            spatial_norm_gamma: Tensor::ones(&[c]),
            spatial_norm_beta: Tensor::zeros(&[c]),
            norm2_gamma: Tensor::ones(&[c]),
            norm2_beta: Tensor::zeros(&[c]),
            channel_weight_re: Tensor::zeros(&[c, c]),
            channel_bias_re: Tensor::zeros(&[c]),
            channel_weight_im: Tensor::zeros(&[c, c]),
            channel_bias_im: Tensor::zeros(&[c]),
        }
    }

    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(c);
        p.spatial_kernel_re = Tensor::randn(&[3, 3, c], 1.0 / 3.0, rng);
        p.spatial_kernel_im = Tensor::randn(&[3, 3, c], 1.0 / 3.0, rng);
        let std = 1.0 / (c as f64).sqrt();
        p.channel_weight_re = Tensor::randn(&[c, c], std, rng);
        p.channel_weight_im = Tensor::randn(&[c, c], std, rng);
        // the spatial branch output is unit-variance after its norm; start it small
        p.spatial_norm_gamma = Tensor::full(&[c], 0.1);
        p
    }

    pub fn channels(&self) -> usize {
        self.norm1_gamma.len()
    }

    pub fn check(&self, c: usize) -> Result<()> {
        if self.channels() != c || self.channel_weight_re.shape() != [c, c] {
            return Err(Error::dim(
                "fpe_block",
                format!(
                    "block built for {} channels, input has {c}",
                    self.channels()
                ),
            ));
        }
        Ok(())
    }
}

/// Switches used to test the spatial branch in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixOptions {
    pub activation: bool,
    pub normalize: bool,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self {
            activation: true,
            normalize: true,
        }
    }
}

fn channels_of<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() < 3 {
        return Err(Error::dim(op, format!("expected [.., H, W, C], got {s:?}")));
    }
    Ok(s[s.len() - 1])
}

/// DFT -> depthwise conv + LeakyReLU per spectral part -> inverse DFT -> layer norm.
pub fn fourier_spatial_interaction<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockVars,
    cfg: &FpeConfig,
    opts: MixOptions,
) -> Result<Var> {
    channels_of(tape, x, "fourier_spatial_interaction")?;
    let (re, im) = tape.dft2d(x)?;
    let mut sr = tape.depthwise_conv3x3(re, p.spatial_kernel_re, p.spatial_bias_re)?;
    let mut si = tape.depthwise_conv3x3(im, p.spatial_kernel_im, p.spatial_bias_im)?;
    if opts.activation {
        sr = tape.leaky_relu(sr, cfg.leaky_slope);
        si = tape.leaky_relu(si, cfg.leaky_slope);
    }
    let xs = tape.idft2d(sr, si)?;
    if opts.normalize {
        tape.layer_norm(xs, p.spatial_norm_gamma, p.spatial_norm_beta, cfg.ln_eps)
    } else {
        Ok(xs)
    }
}

/// DFT -> 1x1 conv + LeakyReLU on the real and imaginary channel stacks -> inverse DFT.
pub fn fourier_channel_evolution<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockVars,
    cfg: &FpeConfig,
    opts: MixOptions,
) -> Result<Var> {
    channels_of(tape, x, "fourier_channel_evolution")?;
    let (re, im) = tape.dft2d(x)?;
    let mut cr = tape.pointwise_conv(re, p.channel_weight_re, p.channel_bias_re)?;
    let mut ci = tape.pointwise_conv(im, p.channel_weight_im, p.channel_bias_im)?;
    if opts.activation {
        cr = tape.leaky_relu(cr, cfg.leaky_slope);
        ci = tape.leaky_relu(ci, cfg.leaky_slope);
    }
    tape.idft2d(cr, ci)
}

pub fn fpe_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &BlockVars,
    cfg: &FpeConfig,
) -> Result<Var> {
    let mut y = x;
    if cfg.spatial_interaction {
        let n = tape.layer_norm(y, p.norm1_gamma, p.norm1_beta, cfg.ln_eps)?;
        let s = fourier_spatial_interaction(tape, n, p, cfg, MixOptions::default())?;
        y = tape.add(y, s)?;
    }
    if cfg.channel_evolution {
        let n = tape.layer_norm(y, p.norm2_gamma, p.norm2_beta, cfg.ln_eps)?;
        let c = fourier_channel_evolution(tape, n, p, cfg, MixOptions::default())?;
        y = tape.add(y, c)?;
    }
    Ok(y)
}

pub fn fourierformer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    blocks: &[BlockVars],
    cfg: &FpeConfig,
) -> Result<Var> {
    blocks
        .iter()
        .try_fold(x, |h, b| fpe_block_forward(tape, h, b, cfg))
}

pub fn bind_blocks<T: Scalar>(
    blocks: &[BlockParams],
    binder: &mut Binder,
    tape: &mut Tape<T>,
    prefix: &str,
) -> Vec<BlockVars> {
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| b.bind(binder, tape, &format!("{prefix}.{i}")))
        .collect()
}

fn eval_with<F>(x: &Tensor, p: &BlockParams, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape<f32>, Var, &BlockVars) -> Result<Var>,
{
    let c = x.last_dim();
    p.check(c)?;
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&mut Binder::frozen(), &mut tape, "block");
    let out = f(&mut tape, xv, &vars)?;
    Ok(tape.value(out).clone())
}

/// Forward-only spatial interaction on `[.., H, W, C]`.
pub fn spatial_interaction_eval(
    x: &Tensor,
    p: &BlockParams,
    cfg: &FpeConfig,
    opts: MixOptions,
) -> Result<Tensor> {
    eval_with(x, p, |t, xv, v| {
        fourier_spatial_interaction(t, xv, v, cfg, opts)
    })
}

pub fn channel_evolution_eval(
    x: &Tensor,
    p: &BlockParams,
    cfg: &FpeConfig,
    opts: MixOptions,
) -> Result<Tensor> {
    eval_with(x, p, |t, xv, v| {
        fourier_channel_evolution(t, xv, v, cfg, opts)
    })
}

pub fn fpe_block_eval(x: &Tensor, p: &BlockParams, cfg: &FpeConfig) -> Result<Tensor> {
    eval_with(x, p, |t, xv, v| fpe_block_forward(t, xv, v, cfg))
}

pub fn fourierformer_eval(x: &Tensor, blocks: &[BlockParams], cfg: &FpeConfig) -> Result<Tensor> {
    if let Some(b) = blocks.first() {
        b.check(x.last_dim())?;
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let vars = bind_blocks(blocks, &mut Binder::frozen(), &mut tape, "blocks");
    let out = fourierformer_forward(&mut tape, xv, &vars, cfg)?;
    Ok(tape.value(out).clone())
}

/// Largest imaginary magnitude discarded by the spatial branch's inverse DFT.
pub fn spatial_imag_residue(x: &Tensor, p: &BlockParams, cfg: &FpeConfig) -> Result<f64> {
    p.check(x.last_dim())?;
    let f = dft2d(x)?;
    let slope = cfg.leaky_slope;
    let sr = kernels::depthwise_conv3x3(&f.real, &p.spatial_kernel_re, &p.spatial_bias_re)?;
    let si = kernels::depthwise_conv3x3(&f.imag, &p.spatial_kernel_im, &p.spatial_bias_im)?;
    let back = idft2d_complex(&ComplexPair::new(
        kernels::leaky_relu(&sr, slope),
        kernels::leaky_relu(&si, slope),
    )?)?;
    Ok(back.imag.max_abs())
}

param_struct! {
    /// Single-head self-attention block weights for width `D`.
    pub struct AttentionParams => AttentionVars { norm_gamma, norm_beta, wq, wk, wv }
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            norm_gamma: Tensor::ones(&[d]),
            norm_beta: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
        }
    }
}

/// `x + softmax(Q K^T / sqrt(D)) V` with `Q, K, V` projected from `LN(x)`.
///
/// Scores are produced one query row at a time, so memory stays linear in
/// the token count while compute is quadratic.
pub fn attention_baseline_forward(tokens: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    if tokens.rank() != 2 {
        return Err(Error::dim(
            "attention_baseline",
            format!("expected [T, D], got {:?}", tokens.shape()),
        ));
    }
    let (t, d) = (tokens.shape()[0], tokens.shape()[1]);
    if p.wq.shape() != [d, d] || p.norm_gamma.shape() != [d] {
        return Err(Error::dim(
            "attention_baseline",
            format!("weights {:?} for width {d}", p.wq.shape()),
        ));
    }
    let (normed, _, _) =
        layer_norm_forward(tokens.data(), p.norm_gamma.data(), p.norm_beta.data(), 1e-5);
    let q = gemm(&normed, p.wq.data(), t, d, d);
    let k = gemm(&normed, p.wk.data(), t, d, d);
    let v = gemm(&normed, p.wv.data(), t, d, d);
    let scale = 1.0 / (d as f32).sqrt();

    let mut out = tokens.data().to_vec();
    let mut scores = vec![0.0f32; t];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        let row = gemm_nt(qi, &k, 1, d, t);
        let mut max = f32::NEG_INFINITY;
        for (s, r) in scores.iter_mut().zip(row) {
            *s = r * scale;
            max = max.max(*s);
        }
        let mut total = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let o = &mut out[i * d..(i + 1) * d];
        for (j, &s) in scores.iter().enumerate() {
            let w = s / total;
            for (ov, &vv) in o.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *ov += w * vv;
            }
        }
    }
    Tensor::new(vec![t, d], out)
}
