use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::patches::PatchGeometry;
use crate::perturbed::DEFAULT_SAMPLES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
    Attention,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "attention" => Ok(Self::Attention),
            _ => Err(Error::Config(format!(
                "aggregation: unknown mode {s:?} (expected mean|max|attention)"
            ))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Attention => "attention",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectorKind {
    Perturbed,
    Sinkhorn,
    Hard,
}

impl FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perturbed" => Ok(Self::Perturbed),
            "sinkhorn" => Ok(Self::Sinkhorn),
            "hard" => Ok(Self::Hard),
            _ => Err(Error::Config(format!(
                "selector: unknown selector {s:?} (expected perturbed|sinkhorn|hard)"
            ))),
        }
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Perturbed => "perturbed",
            Self::Sinkhorn => "sinkhorn",
            Self::Hard => "hard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to 0 after the warm-up.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!(
                "lr_schedule: unknown schedule {s:?} (expected constant|cosine)"
            ))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

/// Architecture; everything a checkpoint needs to rebuild the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    /// Append normalized row/column coordinate planes to the feature-net
    /// input.
    pub coord_channels: bool,
    pub k: usize,
    pub aggregation: Aggregation,
    /// Embedding width `D_h`.
    pub hidden: usize,
    /// Number of output logits `D_o`.
    pub classes: usize,
    /// Average-pooling factor applied before the scorer.
    pub scorer_downscale: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            channels: 1,
            patch: 8,
            stride: 8,
            coord_channels: false,
            k: 2,
            aggregation: Aggregation::Mean,
            hidden: 32,
            classes: 4,
            scorer_downscale: 2,
        }
    }
}

impl ModelConfig {
    pub fn input_channels(&self) -> usize {
        self.channels + if self.coord_channels { 2 } else { 0 }
    }

    /// Patch grid over the network input (coordinate planes included).
    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(
            (self.image_h, self.image_w, self.input_channels()),
            (self.patch, self.patch),
            (self.stride, self.stride),
        )
    }

    pub fn num_patches(&self) -> Result<usize> {
        Ok(self.geometry()?.num_patches())
    }

    pub fn validate(&self) -> Result<()> {
        let geom = self.geometry().map_err(|e| Error::Config(e.to_string()))?;
        let n = geom.num_patches();
        if self.k < 1 || self.k > n {
            return Err(Error::Config(format!("k: must lie in [1, {n}], got {}", self.k)));
        }
        if self.patch < 2 || self.patch % 2 != 0 {
            return Err(Error::Config(format!("patch: must be even and ≥ 2, got {}", self.patch)));
        }
        let f = self.scorer_downscale;
        if f < 1 || self.image_h % f != 0 || self.image_w % f != 0 {
            return Err(Error::Config(format!(
                "scorer_downscale: {f} must divide the image size {}×{}",
                self.image_h, self.image_w
            )));
        }
        if self.image_h / f < geom.grid_h || self.image_w / f < geom.grid_w {
            return Err(Error::Config("scorer input smaller than the patch grid".into()));
        }
        if self.hidden < 2 || self.hidden % 2 != 0 {
            return Err(Error::Config(format!("hidden: must be even and ≥ 2, got {}", self.hidden)));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("classes: need at least 2, got {}", self.classes)));
        }
        Ok(())
    }
}

/// Optimization and selector settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub selector: SelectorKind,
    pub sigma0: f32,
    /// Decay σ linearly to 0 over the run; otherwise hold σ₀.
    pub sigma_decay: bool,
    /// Perturbed samples `n`.
    pub samples: usize,
    pub entropy_coeff: f32,
    pub lr: f32,
    pub lr_schedule: LrSchedule,
    /// Fraction of steps with a linear learning-rate ramp.
    pub warmup: f32,
    pub weight_decay: f32,
    /// Gradient-norm clip, applied to the scorer and to the remaining
    /// parameters separately; 0 disables.
    pub grad_clip: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            selector: SelectorKind::Perturbed,
            sigma0: 0.05,
            sigma_decay: true,
            samples: DEFAULT_SAMPLES,
            entropy_coeff: 0.0,
            lr: 3e-3,
            lr_schedule: LrSchedule::Cosine,
            warmup: 0.05,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            steps: 1000,
            batch_size: 32,
            seed: 0,
            sinkhorn_eps: 0.1,
            sinkhorn_iters: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, msg: String| Err(Error::Config(format!("{k}: {msg}")));
        if !(self.sigma0 >= 0.0) || !self.sigma0.is_finite() {
            return bad("sigma0", format!("must be finite and ≥ 0, got {}", self.sigma0));
        }
        if self.samples < 1 {
            return bad("samples", "must be at least 1".into());
        }
        if !(self.entropy_coeff >= 0.0) {
            return bad("entropy_coeff", format!("must be ≥ 0, got {}", self.entropy_coeff));
        }
        if !(self.lr > 0.0) {
            return bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return bad("warmup", format!("must lie in [0, 1), got {}", self.warmup));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be ≥ 0, got {}", self.weight_decay));
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip", format!("must be ≥ 0, got {}", self.grad_clip));
        }
        if self.steps < 1 {
            return bad("steps", "must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.sinkhorn_eps > 0.0) {
            return bad("sinkhorn_eps", format!("must be > 0, got {}", self.sinkhorn_eps));
        }
        if self.sinkhorn_iters < 1 {
            return bad("sinkhorn_iters", "must be at least 1".into());
        }
        if self.selector == SelectorKind::Sinkhorn && !cfg!(feature = "sinkhorn") {
            return bad("selector", "built without the `sinkhorn` feature".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ModelConfig {
    /// Assigns a key; `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_h" => self.image_h = parse(key, value)?,
            "image_w" => self.image_w = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "coord_channels" => self.coord_channels = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "aggregation" => self.aggregation = value.trim().parse()?,
            "hidden" => self.hidden = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "scorer_downscale" => self.scorer_downscale = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("channels", self.channels.to_string()),
            ("patch", self.patch.to_string()),
            ("stride", self.stride.to_string()),
            ("coord_channels", self.coord_channels.to_string()),
            ("k", self.k.to_string()),
            ("aggregation", self.aggregation.to_string()),
            ("hidden", self.hidden.to_string()),
            ("classes", self.classes.to_string()),
            ("scorer_downscale", self.scorer_downscale.to_string()),
        ]
    }
}

impl TrainConfig {
    /// Assigns a key; `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "selector" => self.selector = value.trim().parse()?,
            "sigma0" => self.sigma0 = parse(key, value)?,
            "sigma_decay" => self.sigma_decay = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "entropy_coeff" => self.entropy_coeff = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_schedule" => self.lr_schedule = value.trim().parse()?,
            "warmup" => self.warmup = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "sinkhorn_eps" => self.sinkhorn_eps = parse(key, value)?,
            "sinkhorn_iters" => self.sinkhorn_iters = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("selector", self.selector.to_string()),
            ("sigma0", self.sigma0.to_string()),
            ("sigma_decay", self.sigma_decay.to_string()),
            ("samples", self.samples.to_string()),
            ("entropy_coeff", self.entropy_coeff.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_schedule", self.lr_schedule.to_string()),
            ("warmup", self.warmup.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("sinkhorn_eps", self.sinkhorn_eps.to_string()),
            ("sinkhorn_iters", self.sinkhorn_iters.to_string()),
        ]
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_round_trip() {
        let mut m = ModelConfig {
            aggregation: Aggregation::Attention,
            coord_channels: true,
            k: 5,
            ..Default::default()
        };
        let mut t = TrainConfig {
            sigma0: 0.125,
            selector: SelectorKind::Hard,
            ..Default::default()
        };
        let text = format_kv(&[m.entries(), t.entries()].concat());
        let (m0, t0) = (m.clone(), t.clone());
        m = ModelConfig::default();
        t = TrainConfig::default();
        for (k, v) in parse_kv(&text).unwrap() {
            assert!(m.set(&k, &v).unwrap() || t.set(&k, &v).unwrap(), "{k}");
        }
        assert_eq!((m, t), (m0, t0));
    }

    #[test]
    fn unknown_and_malformed_values() {
        let mut m = ModelConfig::default();
        assert!(!m.set("bogus", "1").unwrap());
        assert!(m.set("k", "two").is_err());
        assert!(m.set("aggregation", "sum").unwrap_err().to_string().contains("aggregation"));
        assert!(parse_kv("k 3").is_err());
    }

    #[test]
    fn validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let mut c = PipelineConfig::default();
        c.model.k = 65;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.train.entropy_coeff = -1.0;
        assert!(c.validate().is_err());
    }
}
