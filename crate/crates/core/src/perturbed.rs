//! Perturbed-maximum smoothing of index-sorted Top-K.
//!
//! Forward: draw `n` Gaussian vectors `Z_j ∈ ℝ^N`, take the hard
//! index-sorted Top-K indicator of `s + σ·Z_j` for each, and average.
//! Noise perturbs the score vector itself rather than the replicated
//! `s·1ᵀ` matrix, so every column of a sample sees the same perturbed
//! scores.
//!
//! Backward: the Gaussian Jacobian estimator
//!
//! ```text
//! ∂L/∂s[d] = 1/(n·σ) · Σ_j ⟨∂L/∂Y, Y_j⟩ · Z_j[d]
//! ```
//!
//! reusing the forward's noise draws. At `σ = 0` the forward is the hard
//! operator and the backward is identically zero.

use rayon::prelude::*;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::gaussian_fill;
use crate::tensor::Tensor;
use crate::topk::{hard_topk_indices, indicator_from_indices, topk_into, IndicatorMatrix};

pub const DEFAULT_SAMPLES: usize = 500;

/// Upper bound on `n·N·K`, the size of the dense per-sample indicators.
pub const MAX_CONTEXT_ENTRIES: usize = 1 << 26;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbedConfig {
    /// Number of noise samples.
    pub n: usize,
    pub sigma: f32,
    pub seed: u64,
}

impl Default for PerturbedConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_SAMPLES,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl PerturbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return arg_err("perturbed sample count must be at least 1");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return arg_err(format!("sigma must be finite and ≥ 0, got {}", self.sigma));
        }
        Ok(())
    }
}

/// Saved state for the backward pass: the noise draws and the sorted
/// index set chosen under each draw.
#[derive(Clone, Debug)]
pub struct PerturbedContext {
    /// `n×N`, row `j` is `Z_j`.
    noise: Tensor,
    /// `n×K`, row `j` holds the sorted Top-K indices of `s + σ·Z_j`.
    indices: Vec<u32>,
    sigma: f32,
    n: usize,
    num_items: usize,
    k: usize,
}

impl PerturbedContext {
    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    pub fn sigma(&self) -> f32 {
        self.sigma
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Built with `σ = 0`: one sample, zero noise, hard indicator.
    pub fn is_degenerate(&self) -> bool {
        self.sigma == 0.0
    }

    /// Sorted selection of sample `j`.
    pub fn sample_indices(&self, j: usize) -> &[u32] {
        &self.indices[j * self.k..(j + 1) * self.k]
    }

    /// Dense `n×N×K` one-hot indicators, one integral `N×K` slice per sample.
    pub fn per_sample_indicators(&self) -> Tensor {
        let (n, nn, k) = (self.n, self.num_items, self.k);
        let mut data = vec![0.0f32; n * nn * k];
        for j in 0..n {
            for (col, &row) in self.sample_indices(j).iter().enumerate() {
                data[(j * nn + row as usize) * k + col] = 1.0;
            }
        }
        Tensor::new(vec![n, nn, k], data).expect("sized from context dims")
    }
}

fn check_inputs(s: &[f32], k: usize, cfg: &PerturbedConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(i) = s.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score[{i}] = {}", s[i])));
    }
    if s.is_empty() || k < 1 || k > s.len() {
        return arg_err(format!("K={k} must lie in [1, N={}]", s.len()));
    }
    Ok(())
}

/// Monte-Carlo smoothed Top-K indicator `Y_σ` (`N×K`) and its context.
pub fn perturbed_topk_forward(
    s: &[f32],
    k: usize,
    cfg: &PerturbedConfig,
) -> Result<(IndicatorMatrix, PerturbedContext)> {
    check_inputs(s, k, cfg)?;
    let num_items = s.len();

    if cfg.sigma == 0.0 {
        let hard = hard_topk_indices(s, k)?;
        let y = indicator_from_indices(&hard, num_items)?;
        let ctx = PerturbedContext {
            noise: Tensor::zeros(&[1, num_items]),
            indices: hard.as_slice().iter().map(|&i| i as u32).collect(),
            sigma: 0.0,
            n: 1,
            num_items,
            k,
        };
        return Ok((y, ctx));
    }

    let n = cfg.n;
    let entries = n.checked_mul(num_items).and_then(|v| v.checked_mul(k));
    if entries.is_none_or(|e| e > MAX_CONTEXT_ENTRIES) {
        return arg_err(format!(
            "n·N·K = {n}·{num_items}·{k} exceeds the context limit of {MAX_CONTEXT_ENTRIES}"
        ));
    }

    let mut noise = vec![0.0f32; n * num_items];
    let mut indices = vec![0u32; n * k];
    let sigma = cfg.sigma;
    noise
        .par_chunks_mut(num_items)
        .zip(indices.par_chunks_mut(k))
        .enumerate()
        .for_each_init(
            || (vec![0.0f32; num_items], Vec::with_capacity(k)),
            |(perturbed, picked), (j, (z, out))| {
                gaussian_fill(cfg.seed, j as u64, z);
                for ((p, &si), &zi) in perturbed.iter_mut().zip(s).zip(z.iter()) {
                    *p = si + sigma * zi;
                }
                topk_into(perturbed, k, picked);
                for (o, &i) in out.iter_mut().zip(picked.iter()) {
                    *o = i as u32;
                }
            },
        );

    // Integer counts make the mean independent of reduction order.
    let mut counts = vec![0u32; num_items * k];
    for row in indices.chunks_exact(k) {
        for (col, &i) in row.iter().enumerate() {
            counts[i as usize * k + col] += 1;
        }
    }
    let inv = 1.0 / n as f64;
    let y: Vec<f32> = counts.iter().map(|&c| (c as f64 * inv) as f32).collect();

    let ctx = PerturbedContext {
        noise: Tensor::new(vec![n, num_items], noise)?,
        indices,
        sigma,
        n,
        num_items,
        k,
    };
    Ok((
        IndicatorMatrix::from_tensor_unchecked(Tensor::new(vec![num_items, k], y)?),
        ctx,
    ))
}

/// Vector-Jacobian product of the smoothed operator: `grad_out` is
/// `∂L/∂Y_σ` (`N×K`), the result is `∂L/∂s` (`N`).
pub fn perturbed_topk_backward(ctx: &PerturbedContext, grad_out: &Tensor) -> Result<Tensor> {
    let (nn, k) = (ctx.num_items, ctx.k);
    if grad_out.shape() != [nn, k] {
        return shape_err(format!(
            "grad_out is {:?}, context expects [{nn}, {k}]",
            grad_out.shape()
        ));
    }
    if ctx.is_degenerate() {
        return Ok(Tensor::zeros(&[nn]));
    }
    let g = grad_out.data();
    let z = ctx.noise.data();
    let mut acc = vec![0.0f64; nn];
    for j in 0..ctx.n {
        // ⟨grad_out, Y_j⟩ for the one-hot Y_j.
        let coef: f64 = ctx
            .sample_indices(j)
            .iter()
            .enumerate()
            .map(|(col, &row)| g[row as usize * k + col] as f64)
            .sum();
        if coef != 0.0 {
            for (a, &zd) in acc.iter_mut().zip(&z[j * nn..(j + 1) * nn]) {
                *a += coef * zd as f64;
            }
        }
    }
    let scale = 1.0 / (ctx.n as f64 * ctx.sigma as f64);
    Ok(Tensor::vector(acc.into_iter().map(|v| (v * scale) as f32).collect()))
}

/// Exact smoothed operator and Jacobian for `N = 2, K = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedFormN2 {
    /// Expected indicator column `[Y0, Y1]`.
    pub y: [f64; 2],
    /// `jacobian[i][d] = ∂Y_i / ∂s_d`.
    pub jacobian: [[f64; 2]; 2],
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// With two scores, index 1 wins iff `s1 + σz1 > s0 + σz0`, which has
/// probability `Φ((s1 − s0) / (σ√2))`.
pub fn closed_form_n2(s: [f64; 2], sigma: f64) -> Result<ClosedFormN2> {
    if !(sigma > 0.0) {
        return arg_err(format!("closed form needs sigma > 0, got {sigma}"));
    }
    let scale = sigma * std::f64::consts::SQRT_2;
    let t = (s[1] - s[0]) / scale;
    let y1 = std_normal_cdf(t);
    let d = std_normal_pdf(t) / scale;
    Ok(ClosedFormN2 {
        y: [1.0 - y1, y1],
        jacobian: [[d, -d], [-d, d]],
    })
}

/// Linear decay `σ₀·(1 − step/total)`.
pub fn sigma_schedule(step: usize, total_steps: usize, sigma0: f32) -> Result<f32> {
    if total_steps < 1 {
        return arg_err("total_steps must be at least 1");
    }
    if step > total_steps {
        return arg_err(format!("step {step} beyond total {total_steps}"));
    }
    if !(sigma0 >= 0.0) {
        return arg_err(format!("sigma0 must be ≥ 0, got {sigma0}"));
    }
    Ok((sigma0 as f64 * (1.0 - step as f64 / total_steps as f64)) as f32)
}
