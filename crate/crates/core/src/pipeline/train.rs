use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::perturbed::{sigma_schedule, PerturbedConfig};
use crate::ptkt;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[cfg(feature = "sinkhorn")]
use crate::sinkhorn::SinkhornConfig;

use super::config::{format_kv, parse_kv, ModelConfig, SelectorKind, TrainConfig};
use super::model::{argmax, group_of, Group, Model, ParamStore, Selection};
use super::optim::{clip_group_norms, lr_at, AdamW};

const NOISE_TAG: u64 = 0x6e6f;
const SHUFFLE_TAG: u64 = 0x5348;

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    /// Batch mean of cross-entropy minus the entropy bonus.
    pub loss: f64,
    /// Batch accuracy of the training-time forward pass.
    pub accuracy: f64,
    pub sigma: f32,
    pub lr: f32,
    /// Norm of the batch gradient wrt scorer parameters, before clipping.
    pub scorer_grad_norm: f64,
    /// Batch mean softmax entropy of the raw scores, in nats.
    pub entropy: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,accuracy,sigma,lr,scorer_grad_norm,entropy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss, self.accuracy, self.sigma, self.lr, self.scorer_grad_norm, self.entropy
        )
    }
}

/// Per-example result of a forward/backward sweep.
struct ExampleGrads {
    loss: f64,
    correct: bool,
    entropy: f64,
    grads: Vec<Tensor>,
}

/// Cross-entropy minus `λ_H·H(softmax(S))`, backpropagated to every
/// parameter.
fn example_grads(
    model: &Model,
    image: &Tensor,
    label: usize,
    selection: &Selection,
    entropy_coeff: f32,
    step: usize,
) -> Result<ExampleGrads> {
    let mut g = Graph::new();
    let f = model.build(&mut g, image, selection, true)?;
    let ce = g.cross_entropy(f.logits, label)?;
    let h = g.softmax_entropy(f.scores);
    let entropy = g.value(h).item() as f64;
    let loss = if entropy_coeff > 0.0 {
        let bonus = g.scale(h, -entropy_coeff);
        g.add(ce, bonus)?
    } else {
        ce
    };
    let loss_value = g.value(loss).item() as f64;
    if !loss_value.is_finite() {
        let mut detail = format!("loss = {loss_value}\nS = {:?}\nY = {:?}", g.value(f.scores), g.value(f.y));
        let _ = write!(detail, "\nlogits = {:?}", g.value(f.logits));
        return Err(Error::Diverged { step, detail });
    }
    let correct = argmax(g.value(f.logits).data()) == label;
    let grads = g.backward(loss)?;
    let grads = f
        .params
        .iter()
        .zip(model.params().iter())
        .map(|(&id, (_, t))| grads.get_or_zeros(id, t))
        .collect();
    Ok(ExampleGrads {
        loss: loss_value,
        correct,
        entropy,
        grads,
    })
}

/// Training state: model, optimizer and step counter.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut opt = AdamW::new(model.params(), cfg.lr, cfg.weight_decay);
        // Hard selection has no gradient path to the scorer; keep it as is
        // rather than letting weight decay shrink it.
        if cfg.selector == SelectorKind::Hard {
            for (i, (name, _)) in model.params().iter().enumerate() {
                if group_of(name) == Group::Scorer {
                    opt.freeze(i);
                }
            }
        }
        Ok(Self {
            model,
            cfg: cfg.clone(),
            opt,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Index of the next step.
    pub fn step(&self) -> usize {
        self.step
    }

    /// σ used at `step`.
    pub fn sigma_at(&self, step: usize) -> Result<f32> {
        if self.cfg.sigma_decay {
            sigma_schedule(step.min(self.cfg.steps), self.cfg.steps, self.cfg.sigma0)
        } else {
            Ok(self.cfg.sigma0)
        }
    }

    /// Training-time selector for example `slot` of `step`.
    pub fn selection(&self, step: usize, slot: usize) -> Result<Selection> {
        Ok(match self.cfg.selector {
            SelectorKind::Hard => Selection::Hard,
            SelectorKind::Perturbed => Selection::Perturbed(PerturbedConfig {
                n: self.cfg.samples,
                sigma: self.sigma_at(step)?,
                seed: derive_seed(derive_seed(derive_seed(self.cfg.seed, NOISE_TAG), step as u64), slot as u64),
            }),
            #[cfg(feature = "sinkhorn")]
            SelectorKind::Sinkhorn => Selection::Sinkhorn(SinkhornConfig {
                epsilon_reg: self.cfg.sinkhorn_eps,
                max_iters: self.cfg.sinkhorn_iters,
                tol: 1e-6,
            }),
            #[cfg(not(feature = "sinkhorn"))]
            SelectorKind::Sinkhorn => {
                return Err(Error::Config("selector: built without the `sinkhorn` feature".into()))
            }
        })
    }

    /// One optimizer update on `batch` of `(image, label)` pairs.
    pub fn train_step(&mut self, batch: &[(&Tensor, usize)]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let step = self.step;
        let selections: Vec<Selection> = (0..batch.len()).map(|i| self.selection(step, i)).collect::<Result<_>>()?;
        let entropy_coeff = self.cfg.entropy_coeff;
        let model = &self.model;
        let results: Vec<ExampleGrads> = batch
            .par_iter()
            .zip(selections.par_iter())
            .map(|(&(image, label), sel)| example_grads(model, image, label, sel, entropy_coeff, step))
            .collect::<Result<_>>()?;

        let inv = 1.0 / batch.len() as f32;
        let mut grads: Vec<Tensor> = self.model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        // The scorer's gradient is the Monte-Carlo estimate, whose variance
        // grows like 1/σ² as σ decays; clipped jointly it would throttle the
        // feature and aggregation updates.
        let group: Vec<usize> = self
            .model
            .params()
            .iter()
            .map(|(name, _)| usize::from(group_of(name) != Group::Scorer))
            .collect();
        let scorer_grad_norm = clip_group_norms(&mut grads, &group, self.cfg.grad_clip)[0];
        let lr = lr_at(&self.cfg, step);
        self.opt.lr = lr;
        self.opt.step(self.model.params_mut(), &grads)?;
        if !self.model.params().is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameter after update".into(),
            });
        }

        let b = batch.len() as f64;
        let metrics = StepMetrics {
            step,
            loss: results.iter().map(|r| r.loss).sum::<f64>() / b,
            accuracy: results.iter().filter(|r| r.correct).count() as f64 / b,
            sigma: self.sigma_at(step)?,
            lr,
            scorer_grad_norm,
            entropy: results.iter().map(|r| r.entropy).sum::<f64>() / b,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs the remaining steps over `(images, labels)`, drawing batches
    /// from per-epoch shuffles.
    pub fn fit(
        &mut self,
        images: &[Tensor],
        labels: &[usize],
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        let mut sampler = BatchSampler::new(images.len(), self.cfg.batch_size, derive_seed(self.cfg.seed, SHUFFLE_TAG));
        sampler.skip_steps(self.step);
        while self.step < self.cfg.steps {
            let batch: Vec<(&Tensor, usize)> = sampler.next_batch().iter().map(|&i| (&images[i], labels[i])).collect();
            let m = self.train_step(&batch)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// Batches drawn in order from a fresh permutation each epoch.
pub struct BatchSampler {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            batch: batch.min(len).max(1),
            seed,
            epoch: 0,
            perm: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.perm = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.epoch));
        self.perm.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.perm[start..self.pos]
    }

    fn skip_steps(&mut self, steps: usize) {
        for _ in 0..steps {
            self.next_batch();
        }
    }
}

/// Fraction of correct hard-Top-K predictions.
pub fn evaluate(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    let correct: Vec<bool> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| Ok(model.predict(img)?.class() == label))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / images.len() as f64)
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes `<name>.ptkt` per parameter, `manifest.txt` (`name=shape`) and
/// `model.txt` (architecture keys).
pub fn save_checkpoint(dir: impl AsRef<Path>, model: &Model) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, t) in model.params().iter() {
        ptkt::save(dir.join(format!("{name}.ptkt")), t)?;
        let _ = writeln!(manifest, "{name}={}", shape_string(t.shape()));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(dir.join("model.txt"), format_kv(&model.config().entries()))?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let mut cfg = ModelConfig::default();
    for (k, v) in parse_kv(&fs::read_to_string(dir.join("model.txt"))?)? {
        if !cfg.set(&k, &v)? {
            return Err(Error::Config(format!("model.txt: unknown key {k:?}")));
        }
    }
    let mut params = ParamStore::default();
    for (name, shape) in parse_kv(&fs::read_to_string(dir.join("manifest.txt"))?)? {
        if name.contains('/') || name.contains("..") {
            return Err(Error::Config(format!("manifest: invalid parameter name {name:?}")));
        }
        let t = ptkt::load(dir.join(format!("{name}.ptkt")))?;
        if shape_string(t.shape()) != shape {
            return Err(Error::Config(format!(
                "manifest: {name} listed as {shape}, file holds {}",
                shape_string(t.shape())
            )));
        }
        params.insert(&name, t);
    }
    Model::from_params(&cfg, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::tiny_model_config;
    use crate::rng::{gaussian_sample, RngStream};

    fn images(n: usize, seed: u64) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                gaussian_sample(&mut RngStream::at(seed, i as u64), &[16, 16, 1]).map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0))
            })
            .collect()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            sigma0: 0.2,
            samples: 50,
            steps,
            batch_size: 4,
            ..Default::default()
        }
    }

    #[test]
    fn overfits_a_single_example() {
        let x = images(1, 1);
        let model = Model::init(&tiny_model_config(), 2).unwrap();
        let mut t = Trainer::new(model, &TrainConfig { lr: 1e-2, warmup: 0.0, ..cfg(80) }).unwrap();
        let mut losses = Vec::new();
        t.fit(&x, &[2], |_, m| {
            losses.push(m.loss);
            Ok(())
        })
        .unwrap();
        assert!(losses[79] < 0.05 * losses[0], "{} -> {}", losses[0], losses[79]);
        assert_eq!(t.model().predict(&x[0]).unwrap().class(), 2);
    }

    #[test]
    fn steps_are_deterministic() {
        let x = images(8, 3);
        let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let run = || {
            let mut t = Trainer::new(Model::init(&tiny_model_config(), 4).unwrap(), &cfg(5)).unwrap();
            let mut rows = Vec::new();
            t.fit(&x, &y, |_, m| {
                rows.push(m.csv_row());
                Ok(())
            })
            .unwrap();
            (rows, t.into_model())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn entropy_bonus_shifts_the_loss() {
        let x = images(4, 5);
        let batch: Vec<(&Tensor, usize)> = x.iter().zip([0, 1, 2, 0]).collect();
        let step = |coeff: f32| {
            let mut t = Trainer::new(Model::init(&tiny_model_config(), 6).unwrap(), &TrainConfig {
                entropy_coeff: coeff,
                ..cfg(1)
            })
            .unwrap();
            t.train_step(&batch).unwrap()
        };
        let (plain, reg) = (step(0.0), step(0.5));
        assert_eq!(plain.entropy, reg.entropy);
        assert!((reg.loss - (plain.loss - 0.5 * plain.entropy)).abs() < 1e-5);
    }

    #[test]
    fn hard_selector_leaves_the_scorer_unchanged() {
        let x = images(4, 7);
        let batch: Vec<(&Tensor, usize)> = x.iter().zip([0, 1, 2, 1]).collect();
        let before = Model::init(&tiny_model_config(), 8).unwrap();
        let mut t = Trainer::new(before.clone(), &TrainConfig {
            selector: SelectorKind::Hard,
            ..cfg(1)
        })
        .unwrap();
        let m = t.train_step(&batch).unwrap();
        assert_eq!(m.scorer_grad_norm, 0.0);
        for ((name, a), (_, b)) in before.params().iter().zip(t.model().params().iter()) {
            assert_eq!(group_of(name) == Group::Scorer, a == b, "{name}");
        }
    }

    #[test]
    fn sampler_covers_each_index_once_per_epoch() {
        let mut s = BatchSampler::new(10, 3, 9);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        // The fourth batch would run past the end, so a new epoch starts.
        assert_eq!(s.next_batch().len(), 3);
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(&ModelConfig {
            aggregation: super::super::Aggregation::Attention,
            ..tiny_model_config()
        }, 10)
        .unwrap();
        save_checkpoint(dir.path(), &model).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), model);

        fs::write(dir.path().join("manifest.txt"), "../escape=1\n").unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
