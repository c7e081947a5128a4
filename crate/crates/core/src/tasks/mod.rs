//! Deterministic synthetic datasets.
//!
//! * needle: at most one sign glyph on a cluttered canvas; the label is
//!   the sign type, or 0 when there is none.
//! * relational: 4 to 8 digit glyphs in distinct grid cells; the label is
//!   the larger of the leftmost and rightmost digit.
//!
//! Glyphs sit exactly on cells of the 8×8-pixel patch grid.

pub mod glyphs;

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ptkt;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

use glyphs::{Bitmap, GLYPH};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Needle,
    Relational,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needle" => Ok(Self::Needle),
            "relational" => Ok(Self::Relational),
            _ => Err(Error::Config(format!("task: unknown task {s:?} (expected needle|relational)"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Needle => "needle",
            Self::Relational => "relational",
        })
    }
}

impl TaskKind {
    /// Number of label values (`D_o`).
    pub fn classes(self) -> usize {
        match self {
            Self::Needle => 1 + glyphs::NUM_SIGNS,
            // Labels are 1..=9; class 0 is never used.
            Self::Relational => 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["train", "val", "test"][self.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub task: TaskKind,
    /// Square image side in pixels; a multiple of the glyph size.
    pub image_size: usize,
    /// Noise blobs per needle image.
    pub clutter: usize,
    /// Fraction of lit pixels inside a noise blob.
    pub clutter_density: f64,
    pub min_glyphs: usize,
    pub max_glyphs: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Needle,
            image_size: 64,
            clutter: 4,
            clutter_density: 0.35,
            min_glyphs: 4,
            max_glyphs: 8,
            train: 4000,
            val: 500,
            test: 1000,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_size < GLYPH || self.image_size % GLYPH != 0 {
            return bad(format!(
                "image_size: glyph of {GLYPH}×{GLYPH} needs a multiple of {GLYPH}, got {}",
                self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return bad(format!("clutter_density: must lie in [0, 1], got {}", self.clutter_density));
        }
        let cells_per_side = self.image_size / GLYPH;
        if self.task == TaskKind::Relational {
            if self.min_glyphs < 2 || self.min_glyphs > self.max_glyphs {
                return bad(format!(
                    "min_glyphs/max_glyphs: need 2 ≤ min ≤ max, got {}..{}",
                    self.min_glyphs, self.max_glyphs
                ));
            }
            if cells_per_side < 2 || self.max_glyphs > cells_per_side * cells_per_side {
                return bad(format!(
                    "max_glyphs: {} glyphs cannot be placed disjointly on a {cells_per_side}×{cells_per_side} grid",
                    self.max_glyphs
                ));
            }
        }
        if self.train + self.val + self.test == 0 {
            return bad("train/val/test: dataset would be empty".into());
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        [self.train, self.val, self.test][split.index()]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "task" => self.task = value.trim().parse()?,
            "image_size" => self.image_size = p(key, value)?,
            "clutter" => self.clutter = p(key, value)?,
            "clutter_density" => self.clutter_density = p(key, value)?,
            "min_glyphs" => self.min_glyphs = p(key, value)?,
            "max_glyphs" => self.max_glyphs = p(key, value)?,
            "train" => self.train = p(key, value)?,
            "val" => self.val = p(key, value)?,
            "test" => self.test = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.to_string()),
            ("image_size", self.image_size.to_string()),
            ("clutter", self.clutter.to_string()),
            ("clutter_density", self.clutter_density.to_string()),
            ("min_glyphs", self.min_glyphs.to_string()),
            ("max_glyphs", self.max_glyphs.to_string()),
            ("train", self.train.to_string()),
            ("val", self.val.to_string()),
            ("test", self.test.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// A glyph stamped at grid cell `(row, col)`. `glyph` is the sign index
/// (0-based) for needle images and the digit value for relational ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub glyph: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: TaskConfig,
    /// `count×H×W×1`, splits concatenated in train/val/test order.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub placements: Vec<Vec<Placement>>,
    pub registry: Vec<(String, String)>,
}

fn stamp(img: &mut [f32], size: usize, y0: usize, x0: usize, bitmap: &Bitmap) {
    for (r, row) in bitmap.iter().enumerate() {
        for (c, &on) in row.iter().enumerate() {
            if on {
                img[(y0 + r) * size + x0 + c] = 1.0;
            }
        }
    }
}

fn window_matches(img: &[f32], size: usize, y0: usize, x0: usize, bitmap: &Bitmap) -> bool {
    bitmap.iter().enumerate().all(|(r, row)| {
        row.iter()
            .enumerate()
            .all(|(c, &on)| (img[(y0 + r) * size + x0 + c] == 1.0) == on)
    })
}

/// Every pixel position `(y, x)` where an 8×8 window equals `bitmap`.
pub fn template_matches(img: &[f32], size: usize, bitmap: &Bitmap) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..=size - GLYPH {
        for x in 0..=size - GLYPH {
            if window_matches(img, size, y, x, bitmap) {
                out.push((y, x));
            }
        }
    }
    out
}

fn needle_sample(cfg: &TaskConfig, label: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<Placement>) {
    let size = cfg.image_size;
    let cells = size / GLYPH;
    let placement = (label > 0).then(|| Placement {
        row: rng.random_range(0..cells),
        col: rng.random_range(0..cells),
        glyph: label - 1,
    });
    loop {
        let mut img = vec![0.0f32; size * size];
        if let Some(p) = placement {
            stamp(&mut img, size, p.row * GLYPH, p.col * GLYPH, &glyphs::sign(p.glyph));
        }
        for _ in 0..cfg.clutter {
            let (y0, x0) = loop {
                let y0 = rng.random_range(0..=size - GLYPH);
                let x0 = rng.random_range(0..=size - GLYPH);
                let clear = placement.is_none_or(|p| {
                    let (gy, gx) = (p.row * GLYPH, p.col * GLYPH);
                    y0 + GLYPH <= gy || gy + GLYPH <= y0 || x0 + GLYPH <= gx || gx + GLYPH <= x0
                });
                if clear {
                    break (y0, x0);
                }
            };
            for r in 0..GLYPH {
                for c in 0..GLYPH {
                    if rng.random_bool(cfg.clutter_density) {
                        img[(y0 + r) * size + x0 + c] = 1.0;
                    }
                }
            }
        }
        // Clutter must never reproduce a sign anywhere.
        let expected = placement.map(|p| (p.glyph, (p.row * GLYPH, p.col * GLYPH)));
        let spurious = (0..glyphs::NUM_SIGNS).any(|s| {
            template_matches(&img, size, &glyphs::sign(s))
                .into_iter()
                .any(|pos| expected != Some((s, pos)))
        });
        if !spurious {
            return (img, placement.into_iter().collect());
        }
    }
}

/// `max(leftmost, rightmost)` digit value.
pub fn relational_label(placements: &[Placement]) -> Option<usize> {
    let left = placements.iter().min_by_key(|p| p.col)?;
    let right = placements.iter().max_by_key(|p| p.col)?;
    Some(left.glyph.max(right.glyph))
}

fn extreme_columns_unique(placements: &[Placement]) -> bool {
    let min = placements.iter().map(|p| p.col).min();
    let max = placements.iter().map(|p| p.col).max();
    let count = |c| placements.iter().filter(|p| Some(p.col) == c).count();
    count(min) == 1 && count(max) == 1
}

fn relational_sample(cfg: &TaskConfig, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<Placement>, usize) {
    let size = cfg.image_size;
    let cells = size / GLYPH;
    let count = rng.random_range(cfg.min_glyphs..=cfg.max_glyphs);
    let mut all: Vec<usize> = (0..cells * cells).collect();
    let placements = loop {
        all.shuffle(rng);
        let mut chosen: Vec<usize> = all[..count].to_vec();
        chosen.sort_unstable();
        let placements: Vec<Placement> = chosen
            .iter()
            .map(|&cell| Placement {
                row: cell / cells,
                col: cell % cells,
                glyph: 0,
            })
            .collect();
        if extreme_columns_unique(&placements) {
            break placements;
        }
    };
    let placements: Vec<Placement> = placements
        .into_iter()
        .map(|p| Placement {
            glyph: rng.random_range(1..=9),
            ..p
        })
        .collect();
    let mut img = vec![0.0f32; size * size];
    for p in &placements {
        stamp(&mut img, size, p.row * GLYPH, p.col * GLYPH, &glyphs::digit(p.glyph));
    }
    let label = relational_label(&placements).expect("at least two glyphs");
    (img, placements, label)
}

const SPLIT_TAGS: [u64; 3] = [0x7472, 0x7661, 0x7465];

/// Generates all three splits.
pub fn generate(cfg: &TaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut placements = Vec::new();
    for split in Split::ALL {
        let n = cfg.size(split);
        let split_seed = derive_seed(cfg.seed, SPLIT_TAGS[split.index()]);
        // Balanced needle labels: a shuffled round-robin over classes.
        let mut needle_labels: Vec<usize> = (0..n).map(|i| i % cfg.task.classes()).collect();
        needle_labels.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
        let samples: Vec<(Vec<f32>, Vec<Placement>, usize)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(split_seed, i as u64 + 1));
                match cfg.task {
                    TaskKind::Needle => {
                        let (img, pl) = needle_sample(cfg, needle_labels[i], &mut rng);
                        (img, pl, needle_labels[i])
                    }
                    TaskKind::Relational => relational_sample(cfg, &mut rng),
                }
            })
            .collect();
        for (img, pl, label) in samples {
            pixels.extend_from_slice(&img);
            placements.push(pl);
            labels.push(label);
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        images: Tensor::new(vec![labels.len(), size, size, 1], pixels)?,
        labels,
        placements,
        registry: glyphs::registry(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let c = &self.config;
        match split {
            Split::Train => 0..c.train,
            Split::Val => c.train..c.train + c.val,
            Split::Test => c.train + c.val..c.train + c.val + c.test,
        }
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_axis0(i)
    }

    /// `(images, labels)` of one split.
    pub fn split(&self, split: Split) -> (Vec<Tensor>, Vec<usize>) {
        let r = self.split_range(split);
        (r.clone().map(|i| self.image(i)).collect(), self.labels[r].to_vec())
    }

    pub fn label_histogram(&self, split: Split) -> Vec<usize> {
        let mut h = vec![0; self.config.task.classes()];
        for &l in &self.labels[self.split_range(split)] {
            h[l] += 1;
        }
        h
    }

    /// Writes `images.ptkt`, `labels.ptkt` and `meta.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        ptkt::save(dir.join("images.ptkt"), &self.images)?;
        let labels = Tensor::vector(self.labels.iter().map(|&l| l as f32).collect());
        ptkt::save(dir.join("labels.ptkt"), &labels)?;
        let mut meta = crate::pipeline::format_kv(&self.config.entries());
        for (name, bits) in &self.registry {
            let _ = writeln!(meta, "glyph.{name}={bits}");
        }
        for (i, pl) in self.placements.iter().enumerate() {
            let cells: Vec<String> = pl.iter().map(|p| format!("{},{},{}", p.row, p.col, p.glyph)).collect();
            let _ = writeln!(meta, "sample.{i}={}", cells.join(";"));
        }
        fs::write(dir.join("meta.txt"), meta)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let images = ptkt::load(dir.join("images.ptkt"))?;
        let labels_t = ptkt::load(dir.join("labels.ptkt"))?;
        let meta = fs::read_to_string(dir.join("meta.txt"))?;
        let mut config = TaskConfig::default();
        let mut registry = Vec::new();
        let mut placements: Vec<Option<Vec<Placement>>> = Vec::new();
        for (key, value) in crate::pipeline::parse_kv(&meta)? {
            if let Some(name) = key.strip_prefix("glyph.") {
                registry.push((name.to_string(), value));
            } else if let Some(idx) = key.strip_prefix("sample.") {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::Config(format!("meta.txt: bad sample key {key:?}")))?;
                if placements.len() <= i {
                    placements.resize(i + 1, None);
                }
                placements[i] = Some(parse_placements(&value)?);
            } else if !config.set(&key, &value)? {
                return Err(Error::Config(format!("meta.txt: unknown key {key:?}")));
            }
        }
        let count = config.train + config.val + config.test;
        let s = config.image_size;
        images.expect_shape(&[count, s, s, 1])?;
        labels_t.expect_shape(&[count])?;
        let labels = labels_t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && (v as usize) < config.task.classes() {
                    Ok(v as usize)
                } else {
                    Err(Error::Config(format!("labels.ptkt: invalid label {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if placements.len() != count || placements.iter().any(Option::is_none) {
            return Err(Error::Config(format!("meta.txt: expected sample.0 … sample.{}", count - 1)));
        }
        Ok(Dataset {
            config,
            images,
            labels,
            placements: placements.into_iter().map(Option::unwrap).collect(),
            registry,
        })
    }
}

fn parse_placements(value: &str) -> Result<Vec<Placement>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(';')
        .map(|cell| {
            let parts: Vec<usize> = cell
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("meta.txt: bad placement {cell:?}")))?;
            match parts[..] {
                [row, col, glyph] => Ok(Placement { row, col, glyph }),
                _ => Err(Error::Config(format!("meta.txt: bad placement {cell:?}"))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::downscale;

    fn small(task: TaskKind) -> TaskConfig {
        TaskConfig {
            task,
            train: 40,
            val: 8,
            test: 12,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn needle_is_balanced_and_deterministic() {
        let cfg = TaskConfig {
            train: 4000,
            val: 4,
            test: 4,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.label_histogram(Split::Train), vec![1000; 4]);
        let cfg = small(TaskKind::Needle);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn needle_templates_only_where_placed() {
        let d = generate(&small(TaskKind::Needle)).unwrap();
        let s = d.config.image_size;
        for i in 0..d.len() {
            let img = d.image(i);
            let found: Vec<(usize, (usize, usize))> = (0..glyphs::NUM_SIGNS)
                .flat_map(|g| template_matches(img.data(), s, &glyphs::sign(g)).into_iter().map(move |p| (g, p)))
                .collect();
            let expected: Vec<(usize, (usize, usize))> = d.placements[i]
                .iter()
                .map(|p| (p.glyph, (p.row * GLYPH, p.col * GLYPH)))
                .collect();
            assert_eq!(found, expected, "sample {i}");
            assert_eq!(d.labels[i], d.placements[i].first().map_or(0, |p| p.glyph + 1));
        }
    }

    #[test]
    fn relational_labels_recompute_from_metadata() {
        let d = generate(&small(TaskKind::Relational)).unwrap();
        for i in 0..d.len() {
            let pl = &d.placements[i];
            assert!((4..=8).contains(&pl.len()));
            assert!(extreme_columns_unique(pl));
            assert_eq!(relational_label(pl), Some(d.labels[i]));
            assert!((1..=9).contains(&d.labels[i]));
        }
    }

    #[test]
    fn oracle_reading_true_cells_is_perfect() {
        for task in [TaskKind::Needle, TaskKind::Relational] {
            let d = generate(&small(task)).unwrap();
            let s = d.config.image_size;
            for i in 0..d.len() {
                let img = d.image(i);
                let read = |p: &Placement| -> usize {
                    let candidates: Vec<usize> = match task {
                        TaskKind::Needle => (0..glyphs::NUM_SIGNS).collect(),
                        TaskKind::Relational => (1..=9).collect(),
                    };
                    let bitmap = |g| match task {
                        TaskKind::Needle => glyphs::sign(g),
                        TaskKind::Relational => glyphs::digit(g),
                    };
                    let hits: Vec<usize> = candidates
                        .into_iter()
                        .filter(|&g| window_matches(img.data(), s, p.row * GLYPH, p.col * GLYPH, &bitmap(g)))
                        .collect();
                    assert_eq!(hits.len(), 1);
                    hits[0]
                };
                let predicted = match task {
                    TaskKind::Needle => d.placements[i].first().map_or(0, |p| read(p) + 1),
                    TaskKind::Relational => {
                        let read_back: Vec<Placement> =
                            d.placements[i].iter().map(|p| Placement { glyph: read(p), ..*p }).collect();
                        relational_label(&read_back).unwrap()
                    }
                };
                assert_eq!(predicted, d.labels[i]);
            }
        }
    }

    #[test]
    fn quarter_resolution_makes_some_digits_indistinguishable() {
        let small_digit = |v: usize| {
            let mut img = vec![0.0f32; GLYPH * GLYPH];
            stamp(&mut img, GLYPH, 0, 0, &glyphs::digit(v));
            downscale(&Tensor::new(vec![GLYPH, GLYPH, 1], img).unwrap(), 4).unwrap()
        };
        let mut close = Vec::new();
        for a in 1..=9 {
            for b in a + 1..=9 {
                if small_digit(a).max_abs_diff(&small_digit(b)) <= 0.1 {
                    close.push((a, b));
                }
            }
        }
        assert!(!close.is_empty());
    }

    #[test]
    fn relational_class_frequencies_skew_to_nine() {
        let cfg = TaskConfig {
            task: TaskKind::Relational,
            train: 4000,
            val: 0,
            test: 0,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        let h = d.label_histogram(Split::Train);
        let p9 = h[9] as f64 / 4000.0;
        // Max of two independent uniform draws on 1..=9: P(9) = 17/81.
        let exact = 17.0 / 81.0;
        let se = (exact * (1.0 - exact) / 4000.0f64).sqrt();
        assert!((p9 - exact).abs() < 4.0 * se, "{p9} vs {exact}");
        assert_eq!(h[0], 0);
    }

    #[test]
    fn write_read_round_trip() {
        let d = generate(&small(TaskKind::Relational)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), d);
        let first = fs::read(dir.path().join("images.ptkt")).unwrap();
        generate(&small(TaskKind::Relational)).unwrap().write(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("images.ptkt")).unwrap(), first);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small(TaskKind::Relational);
        c.image_size = 12;
        assert!(generate(&c).is_err());
        let mut c = small(TaskKind::Relational);
        c.image_size = 16;
        c.max_glyphs = 5;
        assert!(generate(&c).unwrap_err().to_string().contains("max_glyphs"));
    }
}
