//! Subcommand implementations behind the CLI: each takes a resolved
//! [`RunConfig`] plus paths, does the work, and writes its outputs.

use crate::cameras::{read_cameras, write_cameras};
use crate::checkpoint::{load_checkpoint, load_scene_with_optional_state, save_checkpoint};
use crate::config::{RunConfig, TauSetting};
use crate::logs::{eval_csv, metrics_csv, mutation_log};
use crate::ply::{read_ply, write_ply};
use crate::ppm::{read_ppm, write_ppm, PpmDepth};
use crate::threads::Threads;
use desplat_core::error::Error as CoreError;
use desplat_core::img::ImageBuf;
use desplat_core::lifecycle::{
    fisher_accumulate, prune_uncertain, remove_primitives, uncertainty_scores, FisherAccumulator,
};
use desplat_core::optim::resolve_tau;
use desplat_core::render::render_with;
use desplat_core::rng::StreamRng;
use desplat_core::train::{evaluate, holdout_split, synthesize, train, EvalReport, TrainLog};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum RunError {
    Io(io::Error),
    Core(CoreError),
    Other(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Io(e) => write!(f, "{e}"),
            RunError::Core(e) => write!(f, "{e}"),
            RunError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        RunError::Core(e)
    }
}

impl From<String> for RunError {
    fn from(e: String) -> Self {
        RunError::Other(e)
    }
}

pub type RunResult<T> = Result<T, RunError>;

pub fn target_file_name(view: usize) -> String {
    format!("target_{view:03}.ppm")
}

/// Write the synthetic scene bundle: ground truth, noisy init, cameras,
/// 16-bit targets, and a ready-to-train config pointing at them.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> RunResult<()> {
    fs::create_dir_all(out)?;
    let synth = synthesize(&cfg.synth)?;
    write_ply(&out.join("gt.ply"), &synth.ground_truth)?;
    write_ply(&out.join("init.ply"), &synth.init)?;
    write_cameras(&out.join("cameras.txt"), &synth.cameras)?;
    for (i, target) in synth.targets.iter().enumerate() {
        write_ppm(&out.join(target_file_name(i)), target, PpmDepth::Sixteen)?;
    }

    let mut train_cfg = cfg.clone();
    train_cfg.init_path = out.join("init.ply").to_string_lossy().into_owned();
    train_cfg.cameras_path = out.join("cameras.txt").to_string_lossy().into_owned();
    train_cfg.targets_path = out.to_string_lossy().into_owned();
    fs::write(out.join("train.cfg"), train_cfg.to_text())?;
    fs::write(out.join("synth_manifest.cfg"), cfg.to_text())?;
    Ok(())
}

fn load_targets(dir: &Path, count: usize) -> RunResult<Vec<ImageBuf>> {
    (0..count)
        .map(|i| read_ppm(&dir.join(target_file_name(i))).map_err(RunError::from))
        .collect()
}

pub struct TrainSummary {
    pub report: EvalReport,
    pub final_primitives: usize,
    pub manifest_path: PathBuf,
}

/// Train from the config's data paths into `out`: manifest first, then
/// metrics CSV, mutation log, checkpoint, eval CSV, and holdout renders.
/// On divergence the last scene state is still checkpointed.
pub fn run_train(cfg: &RunConfig, out: &Path) -> RunResult<TrainSummary> {
    fs::create_dir_all(out)?;
    if cfg.init_path.is_empty() || cfg.cameras_path.is_empty() || cfg.targets_path.is_empty() {
        return Err(RunError::Other(
            "train needs data.init, data.cameras, and data.targets".into(),
        ));
    }
    let (mut scene, mut state) = load_scene_with_optional_state(Path::new(&cfg.init_path))?;
    scene.rng_seed = cfg.seed;
    let cameras = read_cameras(Path::new(&cfg.cameras_path))?;
    let targets = load_targets(Path::new(&cfg.targets_path), cameras.len())?;

    // Resolve the temperature against the scene, then freeze the manifest.
    let mut resolved = cfg.clone();
    let mut train_cfg = cfg.train.clone();
    train_cfg.explore.tau = match cfg.tau {
        TauSetting::Value(v) => v,
        TauSetting::Auto => resolve_tau(train_cfg.lr_mean_init, scene.extent()),
    };
    resolved.tau = TauSetting::Value(train_cfg.explore.tau);
    let manifest_path = out.join("manifest.cfg");
    fs::write(&manifest_path, resolved.to_text())?;

    let exec = Threads::new(cfg.threads);
    let mut log = TrainLog::new();
    let outcome = train(
        &mut scene,
        &mut state,
        &cameras,
        &targets,
        &train_cfg,
        &exec,
        &mut log,
    );

    fs::write(out.join("metrics.csv"), metrics_csv(&log.metrics))?;
    fs::write(out.join("mutations.log"), mutation_log(&log.mutations))?;
    save_checkpoint(&out.join("checkpoint"), &scene, &state)?;

    let report = outcome?;
    fs::write(out.join("eval.csv"), eval_csv(&report))?;

    // Final renders of the holdout views.
    let renders_dir = out.join("renders");
    fs::create_dir_all(&renders_dir)?;
    let (_, holdout) = holdout_split(cameras.len(), train_cfg.holdout_every);
    for view in holdout {
        let img = render_with(&exec, &scene, &cameras[view], train_cfg.background).rgb;
        write_ppm(
            &renders_dir.join(format!("holdout_{view:03}.ppm")),
            &img,
            PpmDepth::Sixteen,
        )?;
    }

    Ok(TrainSummary {
        report,
        final_primitives: scene.len(),
        manifest_path,
    })
}

/// Render every camera in the list from a scene PLY.
pub fn run_render(
    scene_path: &Path,
    cameras_path: &Path,
    out: &Path,
    threads: usize,
    background: desplat_core::math::Vec3,
) -> RunResult<()> {
    fs::create_dir_all(out)?;
    let scene = read_ply(scene_path)?;
    let cameras = read_cameras(cameras_path)?;
    let exec = Threads::new(threads);
    for (i, cam) in cameras.iter().enumerate() {
        let img = render_with(&exec, &scene, cam, background).rgb;
        write_ppm(
            &out.join(format!("render_{i:03}.ppm")),
            &img,
            PpmDepth::Sixteen,
        )?;
    }
    Ok(())
}

/// Evaluate a scene against targets; returns the report and optionally
/// writes eval.csv.
pub fn run_eval(
    scene_path: &Path,
    cameras_path: &Path,
    targets_path: &Path,
    out: Option<&Path>,
    threads: usize,
    background: desplat_core::math::Vec3,
) -> RunResult<EvalReport> {
    let scene = read_ply(scene_path)?;
    let cameras = read_cameras(cameras_path)?;
    let targets = load_targets(targets_path, cameras.len())?;
    let exec = Threads::new(threads);
    let report = evaluate(&scene, &cameras, &targets, background, &exec)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.csv"), eval_csv(&report))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMode {
    Uncertainty,
    Random,
}

/// Prune a checkpoint by Fisher uncertainty (or uniformly at random, for
/// comparison arms) and save the result as a new checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_prune(
    checkpoint_dir: &Path,
    cameras_path: &Path,
    targets_path: &Path,
    fraction: f64,
    mode: PruneMode,
    seed: u64,
    out: &Path,
    threads: usize,
    background: desplat_core::math::Vec3,
) -> RunResult<usize> {
    let (mut scene, mut state) = load_checkpoint(checkpoint_dir)?;
    let exec = Threads::new(threads);
    let removed = match mode {
        PruneMode::Uncertainty => {
            let cameras = read_cameras(cameras_path)?;
            let targets = load_targets(targets_path, cameras.len())?;
            let mut acc = FisherAccumulator::new(scene.len());
            fisher_accumulate(&mut acc, &scene, &cameras, &targets, background, &exec)?;
            let scores = uncertainty_scores(&acc)?;
            let (removed, _) = prune_uncertain(&mut scene, &mut state, &scores, fraction)?;
            removed
        }
        PruneMode::Random => {
            let removed = sample_random_prune(scene.len(), fraction, seed);
            remove_primitives(&mut scene, &mut state, &removed);
            removed
        }
    };
    save_checkpoint(out, &scene, &state)?;
    Ok(removed.len())
}

/// Uniform random prune victim set (sorted, distinct).
pub fn sample_random_prune(n: usize, fraction: f64, seed: u64) -> Vec<u32> {
    let m = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = StreamRng::new(seed, 7);
    let mut ids: Vec<u32> = (0..n as u32).collect();
    // Partial Fisher-Yates: the first m entries become the victim set.
    for i in 0..m {
        let j = i + rng.next_index(n - i);
        ids.swap(i, j);
    }
    let mut chosen = ids[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Run one training per axis value, writing each run under
/// `out/<axis>=<value>/` and collecting a comparison CSV.
pub fn run_ablate(
    base: &RunConfig,
    axis: &str,
    values: &[String],
    out: &Path,
) -> RunResult<PathBuf> {
    fs::create_dir_all(out)?;
    let mut rows = String::from("value,mean_psnr,mean_ssim,primitive_count\n");
    for value in values {
        let mut cfg = base.clone();
        cfg.set(axis, value)?;
        let run_dir = out.join(format!("{axis}={value}"));
        let summary = run_train(&cfg, &run_dir)?;
        use std::fmt::Write as _;
        let _ = writeln!(
            rows,
            "{},{},{},{}",
            value, summary.report.mean_psnr, summary.report.mean_ssim, summary.final_primitives
        );
    }
    let csv_path = out.join("ablate.csv");
    fs::write(&csv_path, rows)?;
    Ok(csv_path)
}

/// Shared helper for tests and the acceptance suite: synthesize to a fresh
/// directory and train from the written files.
pub fn synth_then_train(cfg: &RunConfig, dir: &Path) -> RunResult<TrainSummary> {
    let synth_dir = dir.join("data");
    run_synth(cfg, &synth_dir)?;
    let mut train_cfg = cfg.clone();
    train_cfg.init_path = synth_dir.join("init.ply").to_string_lossy().into_owned();
    train_cfg.cameras_path = synth_dir.join("cameras.txt").to_string_lossy().into_owned();
    train_cfg.targets_path = synth_dir.to_string_lossy().into_owned();
    run_train(&train_cfg, &dir.join("run"))
}
