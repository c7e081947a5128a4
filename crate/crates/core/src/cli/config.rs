//! Run configuration: every key of the task, model, training and run
//! settings in one flat `key=value` namespace.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::pipeline::{format_kv, parse_kv, ModelConfig, PipelineConfig, TrainConfig};
use crate::tasks::TaskConfig;

/// Model keys fixed by the task; setting them is an error.
const DERIVED: [&str; 4] = ["image_h", "image_w", "channels", "classes"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
    /// Dataset directory; empty generates the dataset from the task keys.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
    pub bench_ks: Vec<usize>,
    pub bench_samples: Vec<usize>,
    pub bench_trials: usize,
    pub bench_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchConfig::default();
        let mut c = Self {
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("out"),
            data: None,
            checkpoint: None,
            checkpoint_every: 0,
            log_every: 50,
            threads: 0,
            bench_ks: bench.ks,
            bench_samples: bench.samples,
            bench_trials: bench.trials,
            bench_images: bench.images,
        };
        c.derive();
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_opt(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Assigns one key. `seed` drives both data generation and training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if DERIVED.contains(&key) {
            return Err(Error::Config(format!("{key}: derived from the task, not settable")));
        }
        match key {
            "seed" => {
                self.task.seed = parse(key, value)?;
                self.train.seed = self.task.seed;
            }
            "out" => self.out = PathBuf::from(value.trim()),
            "data" => self.data = path_opt(value),
            "checkpoint" => self.checkpoint = path_opt(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "bench_ks" => self.bench_ks = parse_list(key, value)?,
            "bench_samples" => self.bench_samples = parse_list(key, value)?,
            "bench_trials" => self.bench_trials = parse(key, value)?,
            "bench_images" => self.bench_images = parse(key, value)?,
            _ => {
                let known = self.task.set(key, value)? || self.model.set(key, value)? || self.train.set(key, value)?;
                if !known {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        self.derive();
        Ok(())
    }

    /// Applies a `key=value` file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Copies the task's image geometry and class count into the model.
    fn derive(&mut self) {
        self.model.image_h = self.task.image_size;
        self.model.image_w = self.task.image_size;
        self.model.channels = 1;
        self.model.classes = self.task.task.classes();
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            ks: self.bench_ks.clone(),
            samples: self.bench_samples.clone(),
            trials: self.bench_trials,
            images: self.bench_images,
            sigma: self.train.sigma0,
            seed: self.train.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.pipeline().validate()?;
        if self.log_every < 1 {
            return Err(Error::Config("log_every: must be at least 1".into()));
        }
        Ok(())
    }

    /// Every settable key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![("seed", self.task.seed.to_string())];
        out.extend(self.task.entries().into_iter().filter(|(k, _)| *k != "seed"));
        out.extend(self.model.entries().into_iter().filter(|(k, _)| !DERIVED.contains(k)));
        out.extend(self.train.entries().into_iter().filter(|(k, _)| *k != "seed"));
        out.extend([
            ("out", self.out.display().to_string()),
            ("data", path_str(&self.data)),
            ("checkpoint", path_str(&self.checkpoint)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("threads", self.threads.to_string()),
            ("bench_ks", join(&self.bench_ks)),
            ("bench_samples", join(&self.bench_samples)),
            ("bench_trials", self.bench_trials.to_string()),
            ("bench_images", self.bench_images.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        format_kv(&self.entries())
    }

    /// Writes `config.txt` into the output directory.
    pub fn write_effective(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("config.txt"), self.to_text())?;
        Ok(())
    }
}
