//! Inference throughput of the hard selector against the perturbed one.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::perturbed::PerturbedConfig;
use crate::pipeline::{Model, ModelConfig, Selection, SelectorKind};
use crate::rng::{gaussian_sample, RngStream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    /// Perturbed sample counts.
    pub samples: Vec<usize>,
    /// Timed trials after one warm-up pass.
    pub trials: usize,
    /// Images per trial.
    pub images: usize,
    pub sigma: f32,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 4, 16],
            samples: vec![10, 100, 500],
            trials: 5,
            images: 32,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.samples.is_empty() {
            return Err(Error::Config("bench_ks/bench_samples: need at least one value".into()));
        }
        if self.trials < 1 || self.images < 1 {
            return Err(Error::Config("bench_trials/bench_images: must be at least 1".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma0: bench needs σ > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// One timed pass. Hard rows carry `n = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub selector: SelectorKind,
    pub k: usize,
    pub n: usize,
    pub trial: usize,
    pub images_per_s: f64,
}

/// Median over trials of one `(selector, K, n)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub selector: SelectorKind,
    pub k: usize,
    pub n: usize,
    pub images_per_s: f64,
}

pub const CSV_HEADER: &str = "selector,K,n,images_per_s";
pub const TRIALS_CSV_HEADER: &str = "selector,K,n,trial,images_per_s";

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.3}", r.selector, r.k, r.n, r.images_per_s);
    }
    out
}

pub fn trials_csv(trials: &[Trial]) -> String {
    let mut out = format!("{TRIALS_CSV_HEADER}\n");
    for t in trials {
        let _ = writeln!(out, "{},{},{},{},{:.3}", t.selector, t.k, t.n, t.trial, t.images_per_s);
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn time_pass(model: &Model, images: &[Tensor], selection: &Selection) -> Result<f64> {
    let start = Instant::now();
    for img in images {
        std::hint::black_box(model.forward(img, selection)?);
    }
    Ok(images.len() as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Times every `(selector, K, n)` cell on the same inputs. Within a trial
/// the cells run back to back so slow drift hits all of them alike.
///
/// `base` supplies parameters when given; otherwise each `K` gets a fresh
/// initialization from `model_cfg` and `cfg.seed`.
pub fn run_bench(model_cfg: &ModelConfig, base: Option<&Model>, cfg: &BenchConfig) -> Result<(Vec<BenchRow>, Vec<Trial>)> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed);
    let shape = [model_cfg.image_h, model_cfg.image_w, model_cfg.channels];
    let images: Vec<Tensor> = (0..cfg.images)
        .map(|_| gaussian_sample(&mut rng, &shape).map(|v| (0.5 + 0.25 * v).clamp(0.0, 1.0)))
        .collect();

    let mut cells: Vec<(SelectorKind, usize, usize, Model, Selection)> = Vec::new();
    for &k in &cfg.ks {
        let mc = ModelConfig { k, ..model_cfg.clone() };
        let model = match base {
            Some(m) => Model::from_params(&mc, m.params().clone())?,
            None => Model::init(&mc, cfg.seed)?,
        };
        cells.push((SelectorKind::Hard, k, 0, model.clone(), Selection::Hard));
        for &n in &cfg.samples {
            let sel = Selection::Perturbed(PerturbedConfig {
                n,
                sigma: cfg.sigma,
                seed: cfg.seed,
            });
            cells.push((SelectorKind::Perturbed, k, n, model.clone(), sel));
        }
    }

    for (_, _, _, model, sel) in &cells {
        time_pass(model, &images, sel)?;
    }
    let mut trials = Vec::with_capacity(cells.len() * cfg.trials);
    for t in 0..cfg.trials {
        for (selector, k, n, model, sel) in &cells {
            trials.push(Trial {
                selector: *selector,
                k: *k,
                n: *n,
                trial: t,
                images_per_s: time_pass(model, &images, sel)?,
            });
        }
    }

    let rows = cells
        .iter()
        .map(|(selector, k, n, _, _)| {
            let mut v: Vec<f64> = trials
                .iter()
                .filter(|t| t.selector == *selector && t.k == *k && t.n == *n)
                .map(|t| t.images_per_s)
                .collect();
            BenchRow {
                selector: *selector,
                k: *k,
                n: *n,
                images_per_s: median(&mut v),
            }
        })
        .collect();
    Ok((rows, trials))
}

/// `(K, hard trial, perturbed trial)` triples where the hard selector was
/// not strictly faster than the perturbed one at `n`, over every pair of
/// trials with the same `K`.
pub fn hard_not_faster(trials: &[Trial], n: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for h in trials.iter().filter(|t| t.selector == SelectorKind::Hard) {
        for p in trials
            .iter()
            .filter(|t| t.selector == SelectorKind::Perturbed && t.n == n && t.k == h.k)
        {
            if h.images_per_s <= p.images_per_s {
                out.push((h.k, h.trial, p.trial));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_bench_shapes_and_csv() {
        let mc = ModelConfig {
            image_h: 16,
            image_w: 16,
            hidden: 8,
            ..Default::default()
        };
        let cfg = BenchConfig {
            ks: vec![1, 2],
            samples: vec![10, 50],
            trials: 2,
            images: 2,
            ..Default::default()
        };
        let (rows, trials) = run_bench(&mc, None, &cfg).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        assert_eq!(trials.len(), 2 * 3 * 2);
        assert!(rows.iter().all(|r| r.images_per_s > 0.0));
        let csv = rows_csv(&rows);
        assert!(csv.starts_with("selector,K,n,images_per_s\nhard,1,0,"));
        assert_eq!(csv.lines().count(), 7);
        assert!(trials_csv(&trials).starts_with("selector,K,n,trial,images_per_s\n"));
    }

    #[test]
    fn slower_hard_trial_is_reported() {
        let t = |selector, n, trial, v| Trial {
            selector,
            k: 2,
            n,
            trial,
            images_per_s: v,
        };
        let trials = vec![
            t(SelectorKind::Hard, 0, 0, 100.0),
            t(SelectorKind::Hard, 0, 1, 40.0),
            t(SelectorKind::Perturbed, 500, 0, 50.0),
            t(SelectorKind::Perturbed, 500, 1, 30.0),
        ];
        assert_eq!(hard_not_faster(&trials, 500), vec![(2, 1, 0)]);
        assert!(hard_not_faster(&trials, 10).is_empty());
    }
}
