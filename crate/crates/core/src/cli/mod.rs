//! Command-line front end: `gendata`, `train`, `eval`, `gradcheck`, `bench`.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

pub use config::RunConfig;

use crate::bench::{hard_not_faster, rows_csv, run_bench, trials_csv};
use crate::checks::{run_gradcheck, to_csv, GradcheckOptions};
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, load_checkpoint, save_checkpoint, Model, StepMetrics, Trainer};
use crate::tasks::{generate, Dataset, Split};

#[derive(Parser, Debug)]
#[command(name = "ptopk", version, about = "Differentiable Top-K patch selection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset into --out.
    Gendata(Common),
    /// Train a model; writes metrics.csv, eval.csv and checkpoint/.
    Train(Common),
    /// Evaluate --checkpoint with hard Top-K on the val and test splits.
    Eval(Common),
    /// Run the selector and full-chain gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale the selector backward by 1.5 (negative test).
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Time hard against perturbed inference.
    Bench(Common),
}

/// Flags shared by every command. Each maps onto one config key; `--set`
/// reaches the rest. Precedence: defaults, `--config`, flags, `--set`.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    /// needle or relational.
    #[arg(long)]
    pub task: Option<String>,
    /// perturbed, sinkhorn or hard.
    #[arg(long)]
    pub selector: Option<String>,
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub sigma0: Option<String>,
    /// Perturbed samples n.
    #[arg(long)]
    pub samples: Option<String>,
    /// mean, max or attention.
    #[arg(long)]
    pub aggregation: Option<String>,
    #[arg(long)]
    pub entropy_coeff: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub threads: Option<String>,
    /// Dataset directory written by gendata.
    #[arg(long)]
    pub data: Option<String>,
    /// Checkpoint directory for eval and bench.
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Any config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("seed", &self.seed),
            ("task", &self.task),
            ("selector", &self.selector),
            ("k", &self.k),
            ("sigma0", &self.sigma0),
            ("samples", &self.samples),
            ("aggregation", &self.aggregation),
            ("entropy_coeff", &self.entropy_coeff),
            ("steps", &self.steps),
            ("out", &self.out),
            ("threads", &self.threads),
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")));
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one parsed command inside a pool sized by `threads`.
pub fn execute(cli: Cli) -> Result<()> {
    let (common, corrupt) = match &cli.command {
        Command::Gradcheck {
            common,
            corrupt_backward,
        } => (common, *corrupt_backward),
        Command::Gendata(c) | Command::Train(c) | Command::Eval(c) | Command::Bench(c) => (c, false),
    };
    let cfg = common.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gendata(_) => cmd_gendata(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Gradcheck { .. } => cmd_gradcheck(&cfg, corrupt),
        Command::Bench(_) => cmd_bench(&cfg),
    })
}

fn histogram_line(h: &[usize]) -> String {
    h.iter()
        .enumerate()
        .map(|(c, n)| format!("{c}:{n}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cmd_gendata(cfg: &RunConfig) -> Result<()> {
    let ds = generate(&cfg.task)?;
    ds.write(&cfg.out)?;
    println!("{} dataset written to {}", cfg.task.task, cfg.out.display());
    for split in Split::ALL {
        println!(
            "{}: {} samples, labels {}",
            split.name(),
            cfg.task.size(split),
            histogram_line(&ds.label_histogram(split))
        );
    }
    Ok(())
}

/// The dataset named by `data`, or a fresh one from the task keys. A
/// stored dataset must agree with the configured task and image size.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let Some(dir) = &cfg.data else {
        return generate(&cfg.task);
    };
    let ds = Dataset::read(dir)?;
    if ds.config.task != cfg.task.task || ds.config.image_size != cfg.task.image_size {
        return Err(Error::Config(format!(
            "data: {} holds a {} dataset of {}px images, config says {} at {}px",
            dir.display(),
            ds.config.task,
            ds.config.image_size,
            cfg.task.task,
            cfg.task.image_size
        )));
    }
    Ok(ds)
}

const EVAL_HEADER: &str = "split,count,accuracy";

fn write_eval(cfg: &RunConfig, model: &Model, ds: &Dataset) -> Result<Vec<(Split, f64)>> {
    let mut out = format!("{EVAL_HEADER}\n");
    let mut accs = Vec::new();
    for split in [Split::Val, Split::Test] {
        let (x, y) = ds.split(split);
        if x.is_empty() {
            continue;
        }
        let acc = evaluate(model, &x, &y)?;
        out.push_str(&format!("{},{},{acc:.6}\n", split.name(), x.len()));
        accs.push((split, acc));
    }
    fs::write(cfg.out.join("eval.csv"), out)?;
    Ok(accs)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.write_effective()?;
    let ds = load_dataset(cfg)?;
    let (x, y) = ds.split(Split::Train);
    let model = Model::init(&cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, &cfg.train)?;

    let mut metrics = BufWriter::new(File::create(cfg.out.join("metrics.csv"))?);
    writeln!(metrics, "{}", StepMetrics::CSV_HEADER)?;
    let start = Instant::now();
    let result = trainer.fit(&x, &y, |t, m| {
        writeln!(metrics, "{}", m.csv_row())?;
        let done = m.step + 1;
        if done % cfg.log_every == 0 || done == cfg.train.steps {
            info!(
                "step {done}/{} loss {:.4} acc {:.3} sigma {:.4} ({:.0}s)",
                cfg.train.steps,
                m.loss,
                m.accuracy,
                m.sigma,
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(cfg.out.join("checkpoints").join(format!("step_{done}")), t.model())?;
        }
        Ok(())
    });
    metrics.flush()?;
    result?;

    let model = trainer.into_model();
    save_checkpoint(cfg.out.join("checkpoint"), &model)?;
    for (split, acc) in write_eval(cfg, &model, &ds)? {
        println!("{} accuracy {acc:.4}", split.name());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let Some(dir) = &cfg.checkpoint else {
        return Err(Error::Config("checkpoint: required for eval".into()));
    };
    let model = load_checkpoint(dir)?;
    cfg.write_effective()?;
    let ds = load_dataset(cfg)?;
    for (split, acc) in write_eval(cfg, &model, &ds)? {
        println!("{} accuracy {acc:.4}", split.name());
    }
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig, corrupt_backward: bool) -> Result<()> {
    cfg.write_effective()?;
    let rows = run_gradcheck(&GradcheckOptions {
        seed: cfg.train.seed,
        corrupt_backward,
    })?;
    fs::write(cfg.out.join("gradcheck.csv"), to_csv(&rows))?;
    for r in &rows {
        println!(
            "{:<24} {:>12.6} ref {:>10.6} tol {:>10.6} {}",
            r.check,
            r.value,
            r.reference,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = rows.into_iter().filter(|r| !r.pass).map(|r| r.check).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::ChecksFailed(failed))
    }
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    cfg.write_effective()?;
    let base = cfg.checkpoint.as_ref().map(load_checkpoint).transpose()?;
    let model_cfg = base.as_ref().map_or(&cfg.model, |m| m.config());
    let (rows, trials) = run_bench(model_cfg, base.as_ref(), &cfg.bench())?;
    fs::write(cfg.out.join("bench.csv"), rows_csv(&rows))?;
    fs::write(cfg.out.join("bench_trials.csv"), trials_csv(&trials))?;
    for r in &rows {
        println!("{:<10} K={:<3} n={:<4} {:>10.1} images/s", r.selector, r.k, r.n, r.images_per_s);
    }
    for n in &cfg.bench_samples {
        for (k, h, p) in hard_not_faster(&trials, *n) {
            warn!("K={k}: hard trial {h} not faster than perturbed n={n} trial {p}");
        }
    }
    Ok(())
}
