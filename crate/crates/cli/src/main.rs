//! `sadepth`: train, evaluate and inspect depth models from the command line.
//!
//! Errors print one line `error: kind=<kind> <reason>` to stderr before
//! anything else. Exit codes: 0 success, 1 validation or runtime failure,
//! 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sadepth_core::config;
use sadepth_core::data::{generate_synthetic, load_image, write_synthetic, SyntheticScene};
use sadepth_core::evaluation::{evaluate_split, load_eval_split, EvalProtocol};
use sadepth_core::export::export_predictions;
use sadepth_core::gradcheck::run_suite;
use sadepth_core::networks::Model;
use sadepth_core::trainer::{fit, TrainConfig, TrainData, TrainState, BEST_CHECKPOINT};
use sadepth_core::Tensor;

/// File the resolved configuration of a command is echoed into.
const RESOLVED_CONFIG: &str = "resolved_config.json";
const WORKERS_ENV: &str = "SADEPTH_NUM_WORKERS";
/// Sequence directory written by `synth`.
const SYNTH_SEQUENCE: &str = "synthetic";

#[derive(Parser, Debug)]
#[command(name = "sadepth", version, about = "Self-supervised monocular depth with attention and disparity volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML or JSON config layered over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset root, or an image file or directory for `infer`.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Model or training checkpoint.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Dotted config override, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N` (train, synth).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from `--data`, writing logs and checkpoints to `--out`.
    Train,
    /// Evaluate `--checkpoint` on a split of `--data`.
    Eval,
    /// Export disparity, depth, uncertainty and attention maps for images.
    Infer,
    /// Render a synthetic sequence with ground truth into `--out`.
    Synth,
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalCommandConfig {
    /// Split file relative to the dataset root.
    split: String,
    protocol: EvalProtocol,
    /// Also writes every predicted map under `<out>/maps`.
    export: bool,
    /// `[row, col]` attention queries on the 1/8 lattice; empty picks defaults.
    attention_queries: Vec<(usize, usize)>,
}

impl Default for EvalCommandConfig {
    fn default() -> Self {
        Self {
            split: "test.txt".into(),
            protocol: EvalProtocol::default(),
            export: false,
            attention_queries: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InferCommandConfig {
    attention_queries: Vec<(usize, usize)>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(sadepth_core::Error),
    Check(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Core(e) => e.kind(),
            Failure::Check(_) => "check-failed",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            _ => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Check(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

impl From<sadepth_core::Error> for Failure {
    fn from(e: sadepth_core::Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn report(f: &Failure) -> ExitCode {
    eprintln!("error: kind={} {}", f.kind(), one_line(&f.message()));
    ExitCode::from(f.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("error: kind=usage {}", one_line(&first));
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match configure_workers().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}

fn configure_workers() -> Outcome<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size the worker pool: {e}")))
}

fn run(cli: &Cli) -> Outcome<()> {
    let c = &cli.common;
    match cli.command {
        Command::Train => train(c),
        Command::Eval => eval(c),
        Command::Infer => infer(c),
        Command::Synth => synth(c),
        Command::Gradcheck => gradcheck(c),
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Outcome<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("`{command}` needs --{flag}")))
}

fn seeded_overrides(c: &Common) -> Vec<String> {
    let mut out = c.overrides.clone();
    if let Some(s) = c.seed {
        out.push(format!("seed={s}"));
    }
    out
}

fn ignore_seed(c: &Common, command: &str) {
    if c.seed.is_some() {
        log::warn!("--seed has no effect on `{command}`");
    }
}

fn resolve_plain<T: Serialize + serde::de::DeserializeOwned + Default>(c: &Common, overrides: &[String]) -> Outcome<T> {
    let file = c.config.as_deref().map(config::load_value).transpose()?;
    Ok(config::resolve(&T::default(), file.as_ref(), overrides)?)
}

fn echo_config<T: Serialize>(out: &Path, cfg: &T) -> Outcome<()> {
    std::fs::create_dir_all(out).map_err(|e| sadepth_core::Error::io(out, e))?;
    let path = out.join(RESOLVED_CONFIG);
    let text = serde_json::to_string_pretty(cfg).map_err(sadepth_core::Error::from)?;
    std::fs::write(&path, text).map_err(|e| sadepth_core::Error::io(&path, e))?;
    Ok(())
}

fn train(c: &Common) -> Outcome<()> {
    let data_root = require(&c.data, "data", "train")?;
    let out = require(&c.out, "out", "train")?;
    let cfg = TrainConfig::resolve(c.config.as_deref(), &seeded_overrides(c))?;
    echo_config(out, &cfg)?;
    let data = TrainData::load(data_root, &cfg)?;
    let state = match &c.checkpoint {
        Some(p) => TrainState::load(p, &cfg)?,
        None => TrainState::new(&cfg)?,
    };
    let outcome = fit(&cfg, &data, state, Some(out))?;
    for e in &outcome.epochs {
        let val = e.val.map_or_else(String::new, |m| format!(" val_abs_rel {:.4}", m.abs_rel));
        println!("epoch {:>3} steps {:>5} loss {:.5} photometric {:.5}{val}", e.epoch, e.steps, e.mean_total, e.mean_photometric);
    }
    println!(
        "selected epoch {} -> {}",
        outcome.best_epoch.map_or_else(|| "none".into(), |e| e.to_string()),
        out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn eval(c: &Common) -> Outcome<()> {
    let data_root = require(&c.data, "data", "eval")?;
    let checkpoint = require(&c.checkpoint, "checkpoint", "eval")?;
    ignore_seed(c, "eval");
    let cfg: EvalCommandConfig = resolve_plain(c, &c.overrides)?;
    cfg.protocol.validate()?;
    let model = Model::load(checkpoint)?;
    let size = (model.config.depth.input_height, model.config.depth.input_width);
    let samples = load_eval_split(data_root, &data_root.join(&cfg.split), size)?;
    let report = evaluate_split(&model, &samples, &cfg.protocol)?;
    println!("{}", report.table());
    if let Some(out) = &c.out {
        echo_config(out, &cfg)?;
        let json = serde_json::to_string_pretty(&report).map_err(sadepth_core::Error::from)?;
        for (name, text) in [("eval_report.json", json), ("eval_table.txt", report.table())] {
            let path = out.join(name);
            std::fs::write(&path, text).map_err(|e| sadepth_core::Error::io(&path, e))?;
        }
        if cfg.export {
            let images: Vec<(String, Tensor)> = samples.into_iter().map(|s| (s.id, s.image)).collect();
            export_predictions(&out.join("maps"), &model, &images, &cfg.attention_queries)?;
        }
    } else if cfg.export {
        return Err(Failure::Usage("`export = true` needs --out".into()));
    }
    Ok(())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn infer(c: &Common) -> Outcome<()> {
    let input = require(&c.data, "data", "infer")?;
    let checkpoint = require(&c.checkpoint, "checkpoint", "infer")?;
    let out = require(&c.out, "out", "infer")?;
    ignore_seed(c, "infer");
    let cfg: InferCommandConfig = resolve_plain(c, &c.overrides)?;
    let model = Model::load(checkpoint)?;
    let size = (model.config.depth.input_height, model.config.depth.input_width);
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| sadepth_core::Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Failure::Core(sadepth_core::Error::invalid(format!(
            "no PNG or JPEG images in {}",
            input.display()
        ))));
    }
    let images = files
        .iter()
        .map(|p| {
            let id = p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            Ok((id, load_image(p, Some(size))?))
        })
        .collect::<sadepth_core::Result<Vec<_>>>()?;
    echo_config(out, &cfg)?;
    let summary = export_predictions(out, &model, &images, &cfg.attention_queries)?;
    println!(
        "exported {} image(s) and {} attention map(s) to {}",
        summary.images,
        summary.attention.len(),
        out.display()
    );
    Ok(())
}

fn synth(c: &Common) -> Outcome<()> {
    let out = require(&c.out, "out", "synth")?;
    let scene: SyntheticScene = resolve_plain(c, &seeded_overrides(c))?;
    let seq = generate_synthetic(&scene)?;
    write_synthetic(&seq, out, SYNTH_SEQUENCE)?;
    echo_config(out, &scene)?;
    let splits = seq.splits();
    println!(
        "wrote {} frames to {} (train {}, val {}, test {})",
        seq.frames.len(),
        out.join(SYNTH_SEQUENCE).display(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

fn gradcheck(c: &Common) -> Outcome<()> {
    ignore_seed(c, "gradcheck");
    let suite = run_suite()?;
    for e in &suite {
        println!(
            "{:<18} max_rel {:.3e} max_abs {:.3e} entries {:>4} tol {:.0e} {}",
            e.check.name,
            e.check.max_rel_error,
            e.check.max_abs_error,
            e.check.entries,
            e.tolerance,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &c.out {
        std::fs::create_dir_all(out).map_err(|e| sadepth_core::Error::io(out, e))?;
        let path = out.join("gradcheck.json");
        let text = serde_json::to_string_pretty(&suite).map_err(sadepth_core::Error::from)?;
        std::fs::write(&path, text).map_err(|e| sadepth_core::Error::io(&path, e))?;
    }
    let failed: Vec<&str> = suite.iter().filter(|e| !e.passed()).map(|e| e.check.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}
