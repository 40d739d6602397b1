//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or integrity error,
//! 3 numeric error. Flags override the matching config-file fields.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::data_model::{corpus_hash, read_corpus, validate_corpus, Corpus, Split};
use crate::error::Error;
use crate::eval::{evaluate_fresh, render_table, run_ablation, AblationTable, Variant};
use crate::gradcheck::GradCheckConfig;
use crate::gradsuite::run_suites;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::synthetic::{build_corpus, GenConfig};
use crate::training::{fit, read_json, unix_now, write_json, RunManifest, TrainConfig, BEST_CHECKPOINT, CONFIG_FILE, FINAL_CHECKPOINT, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "forgeref", version, about = "Reference-assisted multimodal forgery detection on synthetic corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoints to a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a trained run on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "best", value_parser = ["best", "final"])]
        checkpoint: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        variants: String,
        /// Corpus directory; a default corpus is generated under OUT/data when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render result tables for a run or ablation directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplies analytic gradients; any value but 1 must fail.
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub const ABLATION_FILE: &str = "ablation.json";

fn eval_file(split: Split) -> String {
    format!("eval_{}.json", split.name())
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or(2, Error::exit_code)
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(read_json(p)?),
        None => Ok(T::default()),
    }
}

fn json_hash<T: serde::Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("config serializes")))
}

fn load_corpus(dir: &Path) -> Result<(Corpus, String)> {
    let corpus = read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?;
    let report = validate_corpus(&corpus);
    if !report.is_valid() {
        let first: Vec<String> = report.violations.iter().take(5).map(|v| format!("{v:?}")).collect();
        return Err(Error::Integrity(format!("corpus {} has {} violations: {}", dir.display(), report.violations.len(), first.join("; "))).into());
    }
    Ok((corpus, corpus_hash(dir)?))
}

fn train_config(path: Option<&Path>, seed: Option<u64>, steps: Option<usize>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_or_default(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.steps = n;
        if cfg.warmup_steps >= n {
            cfg.warmup_steps = n / 10;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let started = unix_now();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg: GenConfig = load_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (corpus, _) = build_corpus(&cfg, &out)?;
            let hash = corpus_hash(&out)?;
            eprintln!("wrote {} shots to {}", corpus.shots.len(), out.display());
            RunManifest::new("gen-data", config, json_hash(&cfg), &hash, cfg.seed, started).finish(&out)?;
        }
        Command::Train { config, data, out, seed, steps } => {
            let cfg = train_config(config.as_deref(), seed, steps)?;
            let (corpus, hash) = load_corpus(&data)?;
            let outcome = fit(&cfg, &corpus, &hash, Some(&out))?;
            eprintln!("trained {} steps; best validation AUC {:?} at step {}", cfg.steps, outcome.report.best_val_auc, outcome.report.best_step);
            let mut m = RunManifest::new("train", config, cfg.hash(), &hash, cfg.seed, started);
            m.data_dir = Some(data);
            m.finish(&out)?;
        }
        Command::Eval { run, split, checkpoint, seed } => {
            let split = Split::parse(&split).ok_or_else(|| Error::Argument(format!("unknown split {split:?}")))?;
            let manifest = RunManifest::load(&run).with_context(|| format!("{} is not a training run directory", run.display()))?;
            let data = manifest.data_dir.clone().ok_or_else(|| Error::State(format!("{} does not record a corpus directory", run.join(MANIFEST_FILE).display())))?;
            let cfg: TrainConfig = read_json(&run.join(CONFIG_FILE))?;
            let (corpus, hash) = load_corpus(&data)?;
            if hash != manifest.corpus_hash {
                return Err(Error::Integrity(format!("corpus {} changed since training (hash {hash}, run recorded {})", data.display(), manifest.corpus_hash)).into());
            }
            let file = if checkpoint == "final" { FINAL_CHECKPOINT } else { BEST_CHECKPOINT };
            let mut model_cfg = cfg.model.clone();
            model_cfg.init_seed = 0;
            let model = Model::load(model_cfg, &run.join(file))?;
            let report = evaluate_fresh(&model, &corpus, split, &hash, &cfg.eval_config())?;
            write_json(&run.join(eval_file(split)), &report)?;
            print!("{}", render_table(&[(format!("{} ({})", split.name(), checkpoint), report)]));
            RunManifest::append(&run, "eval", seed.unwrap_or(cfg.seed), started)?;
        }
        Command::Ablate { config, variants, data, out, seed, steps } => {
            let cfg = train_config(config.as_deref(), seed, steps)?;
            let variants = Variant::parse_list(&variants)?;
            let data = match data {
                Some(d) => d,
                None => {
                    let d = out.join("data");
                    build_corpus(&GenConfig::default(), &d)?;
                    d
                }
            };
            let (corpus, hash) = load_corpus(&data)?;
            let table = run_ablation(&cfg, &corpus, &hash, &variants)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(&out.join(ABLATION_FILE), &table)?;
            let text = table.render();
            std::fs::write(out.join("ablation.txt"), &text).map_err(|e| Error::io(&out, e))?;
            print!("{text}");
            let mut m = RunManifest::new("ablate", config, cfg.hash(), &hash, cfg.seed, started);
            m.data_dir = Some(data);
            m.finish(&out)?;
        }
        Command::Report { run, seed } => {
            let text = render_report(&run)?;
            std::fs::write(run.join("report.txt"), &text).map_err(|e| Error::io(&run, e))?;
            print!("{text}");
            if run.join(MANIFEST_FILE).exists() {
                RunManifest::append(&run, "report", seed.unwrap_or(0), started)?;
            }
        }
        Command::Gradcheck { seed, corrupt, out } => {
            let seed = seed.unwrap_or(0);
            let cfg = GradCheckConfig { analytic_scale: corrupt.unwrap_or(1.0), ..GradCheckConfig::default() };
            let report = run_suites(seed, &cfg);
            for e in &report.entries {
                eprintln!("{:<8} {:<48} {:.3e}", if e.passed { "ok" } else { "FAIL" }, e.name, e.rel_error);
            }
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_json(&dir.join("gradcheck.json"), &report)?;
                RunManifest::new("gradcheck", None, json_hash(&(cfg.step, cfg.tolerance, cfg.analytic_scale)), "", seed, started).finish(dir)?;
            }
            if !report.passed() {
                let failed = report.entries.iter().filter(|e| !e.passed).count();
                return Err(Error::Numeric(format!("{failed} of {} gradient checks failed (max relative error {:.3e})", report.entries.len(), report.max_error())).into());
            }
            eprintln!("all {} gradient checks passed", report.entries.len());
        }
    }
    Ok(())
}

/// Ablation table when present, otherwise one row per evaluated split.
pub fn render_report(dir: &Path) -> Result<String> {
    let ablation = dir.join(ABLATION_FILE);
    if ablation.exists() {
        let table: AblationTable = read_json(&ablation)?;
        return Ok(table.render());
    }
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test, Split::Reference] {
        let path = dir.join(eval_file(split));
        if path.exists() {
            let m: MetricsReport = read_json(&path)?;
            rows.push((split.name().to_string(), m));
        }
    }
    if rows.is_empty() {
        return Err(Error::State(format!("{} holds neither an ablation table nor evaluation reports", dir.display())).into());
    }
    Ok(render_table(&rows))
}
