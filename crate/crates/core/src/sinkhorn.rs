//! Top-K as entropic optimal transport.
//!
//! The `N` scores are points with mass `1/N` each; the target has two
//! points, `0` ("rejected", mass `(N−K)/N`) and `1` ("selected", mass
//! `K/N`), with squared-distance cost. Log-domain Sinkhorn iterations
//! give the transport plan `Γ`, and `N·Γ[i, selected]` is the selected
//! mass of element `i`. Scores are expected on a unit scale (the pipeline
//! feeds min-max normalized scores).
//!
//! The backward pass differentiates the recorded iterations in reverse.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

const TARGETS: [f64; 2] = [0.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon_reg: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon_reg: 0.1,
            max_iters: 2000,
            tol: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_reg > 0.0) {
            return arg_err(format!("epsilon_reg must be > 0, got {}", self.epsilon_reg));
        }
        if self.max_iters < 1 {
            return arg_err("max_iters must be at least 1");
        }
        if !(self.tol > 0.0) {
            return arg_err(format!("tol must be > 0, got {}", self.tol));
        }
        Ok(())
    }
}

/// Iterates recorded by the forward pass.
#[derive(Clone, Debug)]
pub struct SinkhornTrace {
    scores: Vec<f64>,
    eps: f64,
    /// Row potentials after each iteration.
    f_hist: Vec<Vec<f64>>,
    /// Column potentials after each iteration; `g_hist[0]` is the zero start.
    g_hist: Vec<[f64; 2]>,
    /// `K = N`: every element fully selected, no iterations run.
    trivial: bool,
}

#[derive(Clone, Debug)]
pub struct SinkhornOutput {
    /// Selected mass per element, in `[0, 1]`, summing to `K`.
    pub mass: Tensor,
    pub converged: bool,
    pub iterations: usize,
    /// Largest row-marginal violation, in per-element mass units.
    pub residual: f64,
    pub trace: SinkhornTrace,
}

fn cost(s: f64, j: usize) -> f64 {
    (s - TARGETS[j]) * (s - TARGETS[j])
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn f_update(scores: &[f64], g: &[f64; 2], eps: f64, log_a: f64) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| eps * log_a - eps * log_sum_exp((0..2).map(|j| (g[j] - cost(s, j)) / eps)))
        .collect()
}

fn g_update(scores: &[f64], f: &[f64], eps: f64, log_b: &[f64; 2]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for (j, gj) in g.iter_mut().enumerate() {
        let lse = log_sum_exp(scores.iter().zip(f).map(|(&s, &fi)| (fi - cost(s, j)) / eps));
        *gj = eps * log_b[j] - eps * lse;
    }
    g
}

/// Soft Top-K membership by Sinkhorn iterations. Hitting `max_iters`
/// with residual above `tol` is reported through `converged = false`.
pub fn sinkhorn_topk_forward(s: &[f32], k: usize, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    cfg.validate()?;
    let n = s.len();
    if n == 0 || k < 1 || k > n {
        return arg_err(format!("K={k} must lie in [1, N={n}]"));
    }
    if let Some(i) = s.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score[{i}] = {}", s[i])));
    }
    let scores: Vec<f64> = s.iter().map(|&v| v as f64).collect();
    let eps = cfg.epsilon_reg;
    if k == n {
        return Ok(SinkhornOutput {
            mass: Tensor::ones(&[n]),
            converged: true,
            iterations: 0,
            residual: 0.0,
            trace: SinkhornTrace {
                scores,
                eps,
                f_hist: vec![],
                g_hist: vec![[0.0; 2]],
                trivial: true,
            },
        });
    }

    let log_a = -(n as f64).ln();
    let log_b = [((n - k) as f64 / n as f64).ln(), (k as f64 / n as f64).ln()];
    let mut f_hist = Vec::new();
    let mut g_hist = vec![[0.0f64; 2]];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let g_prev = *g_hist.last().unwrap();
        let f = f_update(&scores, &g_prev, eps, log_a);
        let g = g_update(&scores, &f, eps, &log_b);
        // Column marginals are exact after the g-update; rows carry the error.
        residual = scores
            .iter()
            .zip(&f)
            .map(|(&si, &fi)| {
                let row: f64 = (0..2).map(|j| ((fi + g[j] - cost(si, j)) / eps).exp()).sum();
                (row * n as f64 - 1.0).abs()
            })
            .fold(0.0, f64::max);
        f_hist.push(f);
        g_hist.push(g);
        iterations += 1;
        if residual <= cfg.tol {
            break;
        }
    }

    let f = f_hist.last().unwrap();
    let g = g_hist.last().unwrap();
    let mass: Vec<f32> = scores
        .iter()
        .zip(f)
        .map(|(&si, &fi)| (n as f64 * ((fi + g[1] - cost(si, 1)) / eps).exp()) as f32)
        .collect();
    Ok(SinkhornOutput {
        mass: Tensor::vector(mass),
        converged: residual <= cfg.tol,
        iterations,
        residual,
        trace: SinkhornTrace {
            scores,
            eps,
            f_hist,
            g_hist,
            trivial: false,
        },
    })
}

/// Reverse-mode pass through the recorded iterations: `∂L/∂mass` → `∂L/∂s`.
pub fn sinkhorn_topk_backward(trace: &SinkhornTrace, grad_out: &Tensor) -> Result<Tensor> {
    let n = trace.scores.len();
    if grad_out.shape() != [n] {
        return shape_err(format!("grad_out is {:?}, expected [{n}]", grad_out.shape()));
    }
    if trace.trivial {
        return Ok(Tensor::zeros(&[n]));
    }
    let eps = trace.eps;
    let s = &trace.scores;
    let steps = trace.f_hist.len();
    let mut g_c = vec![[0.0f64; 2]; n];
    let mut g_f = vec![0.0f64; n];
    let mut g_g = [0.0f64; 2];

    // mass_i = N·exp((f_i + g_1 − C_i1)/ε)
    let f_last = &trace.f_hist[steps - 1];
    let g_last = trace.g_hist[steps];
    for i in 0..n {
        let m = n as f64 * ((f_last[i] + g_last[1] - cost(s[i], 1)) / eps).exp();
        let d = grad_out.data()[i] as f64 * m / eps;
        g_f[i] += d;
        g_g[1] += d;
        g_c[i][1] -= d;
    }

    for t in (1..=steps).rev() {
        let f = &trace.f_hist[t - 1];
        let g_prev = trace.g_hist[t - 1];
        // g^t = ε log b − ε LSE_i((f^t_i − C_ij)/ε)
        for j in 0..2 {
            if g_g[j] == 0.0 {
                continue;
            }
            let logits: Vec<f64> = (0..n).map(|i| (f[i] - cost(s[i], j)) / eps).collect();
            let lse = log_sum_exp(logits.iter().copied());
            for i in 0..n {
                let q = (logits[i] - lse).exp();
                g_f[i] -= g_g[j] * q;
                g_c[i][j] += g_g[j] * q;
            }
        }
        // f^t = ε log a − ε LSE_j((g^{t−1}_j − C_ij)/ε)
        let mut g_g_prev = [0.0f64; 2];
        for i in 0..n {
            if g_f[i] == 0.0 {
                continue;
            }
            let logits = [(g_prev[0] - cost(s[i], 0)) / eps, (g_prev[1] - cost(s[i], 1)) / eps];
            let lse = log_sum_exp(logits.iter().copied());
            for j in 0..2 {
                let p = (logits[j] - lse).exp();
                g_g_prev[j] -= g_f[i] * p;
                g_c[i][j] += g_f[i] * p;
            }
        }
        g_f.iter_mut().for_each(|v| *v = 0.0);
        g_g = g_g_prev;
    }

    let grad: Vec<f32> = (0..n)
        .map(|i| {
            (0..2)
                .map(|j| g_c[i][j] * 2.0 * (s[i] - TARGETS[j]))
                .sum::<f64>() as f32
        })
        .collect();
    Ok(Tensor::vector(grad))
}
