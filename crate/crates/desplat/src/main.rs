//! Command-line front door.
//!
//! Subcommands: synth, train, render, eval, prune, ablate. Exit codes:
//! 0 success, 1 usage error, 2 runtime failure.

use desplat::config::RunConfig;
use desplat::runs::{
    run_ablate, run_eval, run_prune, run_render, run_synth, run_train, PruneMode, RunError,
};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
desplat - desk-scale Gaussian-splatting trainer

USAGE:
  desplat synth  --out DIR [--config FILE] [--set key=value]... [--seed N]
  desplat train  --out DIR --config FILE [--set key=value]... [--seed N] [--threads N]
  desplat render --scene PLY --cameras FILE --out DIR [--threads N]
  desplat eval   --scene PLY --cameras FILE --targets DIR [--out DIR] [--threads N]
  desplat prune  --checkpoint DIR --out DIR --fraction F [--mode uncertainty|random]
                 [--cameras FILE --targets DIR] [--seed N] [--threads N]
  desplat ablate --out DIR --config FILE --axis KEY --values V1,V2,... [--set key=value]...

FLAGS:
  --config FILE       flat `section.key = value` config; defaults otherwise
  --set key=value     override a config key (repeatable, wins over the file)
  --seed N            shorthand for --set run.seed=N
  --threads N         worker threads (default: DESPLAT_THREADS env or 1)
  --out DIR           output directory

Every run echoes its fully resolved config to <out>/manifest.cfg; training
from a manifest reproduces the run byte for byte.";

struct ParsedArgs {
    flags: Vec<(String, String)>,
}

impl ParsedArgs {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Self, String> {
        let mut flags = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let name = arg
                .strip_prefix("--")
                .ok_or_else(|| format!("unexpected argument `{arg}`"))?;
            if !allowed.contains(&name) {
                return Err(format!("unknown flag `--{name}`"));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| format!("flag --{name} needs a value"))?;
            flags.push((name.to_string(), value.clone()));
            i += 2;
        }
        Ok(Self { flags })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, String> {
        self.get(name)
            .ok_or_else(|| format!("missing required flag --{name}"))
    }

    fn sets(&self) -> impl Iterator<Item = &str> {
        self.flags
            .iter()
            .filter(|(k, _)| k == "set")
            .map(|(_, v)| v.as_str())
    }
}

fn default_threads() -> usize {
    std::env::var("DESPLAT_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

/// Build a RunConfig from --config / --set / --seed / --threads flags.
fn resolve_config(args: &ParsedArgs) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    cfg.threads = default_threads();
    if let Some(path) = args.get("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {path}: {e}"))?;
        cfg.apply_text(&text, path)?;
    }
    for kv in args.sets() {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got `{kv}`"))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.get("seed") {
        cfg.set("run.seed", seed)?;
        cfg.set("synth.seed", seed)?;
    }
    if let Some(threads) = args.get("threads") {
        cfg.set("run.threads", threads)?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn dispatch(argv: &[String]) -> Result<(), CliError> {
    let Some(cmd) = argv.first() else {
        return usage("no subcommand given");
    };
    let rest = &argv[1..];
    let parse = |allowed: &[&str]| {
        ParsedArgs::parse(rest, allowed).map_err(CliError::Usage)
    };

    match cmd.as_str() {
        "synth" => {
            let args = parse(&["out", "config", "set", "seed", "threads"])?;
            let cfg = resolve_config(&args).map_err(CliError::Usage)?;
            let out = PathBuf::from(args.require("out").map_err(CliError::Usage)?);
            run_synth(&cfg, &out)?;
            println!("synthesized {} primitives, {} views -> {}", cfg.synth.primitive_count, cfg.synth.camera_count, out.display());
            Ok(())
        }
        "train" => {
            let args = parse(&["out", "config", "set", "seed", "threads"])?;
            if args.get("config").is_none() {
                return usage("train requires --config");
            }
            let cfg = resolve_config(&args).map_err(CliError::Usage)?;
            let out = PathBuf::from(args.require("out").map_err(CliError::Usage)?);
            let summary = run_train(&cfg, &out)?;
            println!(
                "trained {} steps -> holdout psnr {:.3} dB, ssim {:.4}, {} primitives",
                cfg.train.max_steps,
                summary.report.mean_psnr,
                summary.report.mean_ssim,
                summary.final_primitives
            );
            println!("manifest: {}", summary.manifest_path.display());
            Ok(())
        }
        "render" => {
            let args = parse(&["scene", "cameras", "out", "threads", "set"])?;
            let cfg = resolve_config(&args).map_err(CliError::Usage)?;
            run_render(
                PathBuf::from(args.require("scene").map_err(CliError::Usage)?).as_path(),
                PathBuf::from(args.require("cameras").map_err(CliError::Usage)?).as_path(),
                PathBuf::from(args.require("out").map_err(CliError::Usage)?).as_path(),
                cfg.threads,
                cfg.background(),
            )?;
            Ok(())
        }
        "eval" => {
            let args = parse(&["scene", "cameras", "targets", "out", "threads", "set"])?;
            let cfg = resolve_config(&args).map_err(CliError::Usage)?;
            let report = run_eval(
                PathBuf::from(args.require("scene").map_err(CliError::Usage)?).as_path(),
                PathBuf::from(args.require("cameras").map_err(CliError::Usage)?).as_path(),
                PathBuf::from(args.require("targets").map_err(CliError::Usage)?).as_path(),
                args.get("out").map(PathBuf::from).as_deref(),
                cfg.threads,
                cfg.background(),
            )?;
            for v in &report.per_view {
                println!("view {}: psnr {:.3} dB, ssim {:.4}", v.view, v.psnr, v.ssim);
            }
            println!("mean: psnr {:.3} dB, ssim {:.4}", report.mean_psnr, report.mean_ssim);
            Ok(())
        }
        "prune" => {
            let args = parse(&[
                "checkpoint", "out", "fraction", "mode", "cameras", "targets", "seed", "threads",
                "set",
            ])?;
            let cfg = resolve_config(&args).map_err(CliError::Usage)?;
            let fraction: f64 = args
                .require("fraction")
                .map_err(CliError::Usage)?
                .parse()
                .map_err(|_| CliError::Usage("--fraction expects a number".into()))?;
            let mode = match args.get("mode").unwrap_or("uncertainty") {
                "uncertainty" => PruneMode::Uncertainty,
                "random" => PruneMode::Random,
                other => return usage(format!("unknown prune mode `{other}`")),
            };
            if mode == PruneMode::Uncertainty
                && (args.get("cameras").is_none() || args.get("targets").is_none())
            {
                return usage("uncertainty pruning needs --cameras and --targets");
            }
            let removed = run_prune(
                PathBuf::from(args.require("checkpoint").map_err(CliError::Usage)?).as_path(),
                PathBuf::from(args.get("cameras").unwrap_or_default()).as_path(),
                PathBuf::from(args.get("targets").unwrap_or_default()).as_path(),
                fraction,
                mode,
                cfg.seed,
                PathBuf::from(args.require("out").map_err(CliError::Usage)?).as_path(),
                cfg.threads,
                cfg.background(),
            )?;
            println!("pruned {removed} primitives");
            Ok(())
        }
        "ablate" => {
            let args = parse(&["out", "config", "axis", "values", "set", "seed", "threads"])?;
            if args.get("config").is_none() {
                return usage("ablate requires --config");
            }
            let cfg = resolve_config(&args).map_err(CliError::Usage)?;
            let axis = args.require("axis").map_err(CliError::Usage)?;
            let values: Vec<String> = args
                .require("values")
                .map_err(CliError::Usage)?
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if values.is_empty() {
                return usage("--values needs at least one value");
            }
            let out = PathBuf::from(args.require("out").map_err(CliError::Usage)?);
            let csv = run_ablate(&cfg, axis, &values, &out)?;
            println!("ablation table: {}", csv.display());
            Ok(())
        }
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            Ok(())
        }
        other => usage(format!("unknown subcommand `{other}`")),
    }
}
