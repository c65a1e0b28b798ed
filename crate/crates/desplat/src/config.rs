//! Flat `section.key = value` run configuration.
//!
//! One line per key, `#` comments, unknown keys rejected with the offending
//! line. A run's manifest is the same format with every key present and the
//! temperature resolved to a number, so re-running from a manifest
//! reproduces the run bitwise.

use desplat_core::math::Vec3;
use desplat_core::optim::{AdamConfig, ExploreConfig};
use desplat_core::train::{StageFlags, SyntheticSceneSpec, TrainConfig};
use std::fmt::Write as _;

/// Exploration temperature: resolved against the scene extent at run start
/// unless given explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSetting {
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub train: TrainConfig,
    pub tau: TauSetting,
    pub synth: SyntheticSceneSpec,
    /// Paths consumed by `train`: initial scene, camera list, target images.
    pub init_path: String,
    pub cameras_path: String,
    pub targets_path: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            train: TrainConfig::default(),
            tau: TauSetting::Auto,
            synth: SyntheticSceneSpec::desk_default(0),
            init_path: String::new(),
            cameras_path: String::new(),
            targets_path: String::new(),
        }
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

impl RunConfig {
    /// All keys with their current values, in canonical order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let e = &t.explore;
        let s = &self.synth;
        vec![
            ("run.seed", self.seed.to_string()),
            ("run.threads", self.threads.to_string()),
            ("run.max_steps", t.max_steps.to_string()),
            ("run.eval_interval", t.eval_interval.to_string()),
            ("run.background_r", fmt_f64(t.background.x)),
            ("run.background_g", fmt_f64(t.background.y)),
            ("run.background_b", fmt_f64(t.background.z)),
            ("data.init", self.init_path.clone()),
            ("data.cameras", self.cameras_path.clone()),
            ("data.targets", self.targets_path.clone()),
            ("holdout.every", t.holdout_every.to_string()),
            ("loss.lambda_ssim", fmt_f64(t.lambda_ssim)),
            ("lr.mean_init", fmt_f64(t.lr_mean_init)),
            ("lr.mean_final", fmt_f64(t.lr_mean_final)),
            ("lr.scale", fmt_f64(t.lr_scale)),
            ("lr.rotation", fmt_f64(t.lr_rotation)),
            ("lr.opacity", fmt_f64(t.lr_opacity)),
            ("lr.color", fmt_f64(t.lr_color)),
            ("lr.adam_beta1", fmt_f64(t.adam.beta1)),
            ("lr.adam_beta2", fmt_f64(t.adam.beta2)),
            ("lr.adam_eps", fmt_f64(t.adam.eps)),
            (
                "explore.tau",
                match self.tau {
                    TauSetting::Auto => "auto".to_string(),
                    TauSetting::Value(v) => fmt_f64(v),
                },
            ),
            ("explore.alpha", fmt_f64(e.alpha)),
            ("explore.beta1", fmt_f64(e.beta1)),
            ("explore.beta2", fmt_f64(e.beta2)),
            ("explore.gate_sharpness", fmt_f64(e.gate_sharpness)),
            ("explore.gate_threshold", fmt_f64(e.gate_threshold)),
            (
                "explore.denoise_sign_flip",
                e.denoise_sign_flip.to_string(),
            ),
            ("stages.exploration", t.stages.exploration.to_string()),
            ("stages.momentum", t.stages.momentum.to_string()),
            ("stages.spatial_denoise", t.stages.spatial_denoise.to_string()),
            ("stages.relocation", t.stages.relocation.to_string()),
            (
                "stages.uncertainty_prune",
                t.stages.uncertainty_prune.to_string(),
            ),
            ("stages.refinement", t.stages.refinement.to_string()),
            ("lifecycle.prune_fraction", fmt_f64(t.prune_fraction)),
            ("lifecycle.densify_fraction", fmt_f64(t.densify_fraction)),
            (
                "lifecycle.refinement_rounds",
                t.refinement_rounds.to_string(),
            ),
            ("lifecycle.knn_k", t.knn_k.to_string()),
            (
                "lifecycle.relocation_interval",
                t.relocation_interval.to_string(),
            ),
            ("lifecycle.relocation_stop", fmt_f64(t.relocation_stop)),
            ("lifecycle.opacity_floor", fmt_f64(t.opacity_floor)),
            ("lifecycle.prune_point", fmt_f64(t.prune_point)),
            ("lifecycle.refine_start", fmt_f64(t.refine_start)),
            ("lifecycle.refine_end", fmt_f64(t.refine_end)),
            ("synth.count", s.primitive_count.to_string()),
            ("synth.extent", fmt_f64(s.extent)),
            ("synth.opacity_lo", fmt_f64(s.opacity_range.0)),
            ("synth.opacity_hi", fmt_f64(s.opacity_range.1)),
            ("synth.scale_lo", fmt_f64(s.scale_range.0)),
            ("synth.scale_hi", fmt_f64(s.scale_range.1)),
            ("synth.cameras", s.camera_count.to_string()),
            ("synth.radius", fmt_f64(s.camera_radius)),
            ("synth.resolution", s.resolution.to_string()),
            ("synth.noise_sigma", fmt_f64(s.noise_sigma)),
            ("synth.scale_jitter", fmt_f64(s.scale_jitter)),
            ("synth.seed", s.seed.to_string()),
        ]
    }

    /// Manifest text: every key, canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn f64_of(v: &str) -> Result<f64, String> {
            v.parse().map_err(|_| format!("expected a number, got `{v}`"))
        }
        fn u64_of(v: &str) -> Result<u64, String> {
            v.parse().map_err(|_| format!("expected an integer, got `{v}`"))
        }
        fn usize_of(v: &str) -> Result<usize, String> {
            v.parse().map_err(|_| format!("expected an integer, got `{v}`"))
        }
        fn bool_of(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(format!("expected true/false, got `{v}`")),
            }
        }

        let t = &mut self.train;
        match key {
            "run.seed" => self.seed = u64_of(value)?,
            "run.threads" => self.threads = usize_of(value)?.max(1),
            "run.max_steps" => t.max_steps = u64_of(value)?,
            "run.eval_interval" => t.eval_interval = u64_of(value)?,
            "run.background_r" => t.background.x = f64_of(value)?,
            "run.background_g" => t.background.y = f64_of(value)?,
            "run.background_b" => t.background.z = f64_of(value)?,
            "data.init" => self.init_path = value.to_string(),
            "data.cameras" => self.cameras_path = value.to_string(),
            "data.targets" => self.targets_path = value.to_string(),
            "holdout.every" => t.holdout_every = usize_of(value)?,
            "loss.lambda_ssim" => t.lambda_ssim = f64_of(value)?,
            "lr.mean_init" => t.lr_mean_init = f64_of(value)?,
            "lr.mean_final" => t.lr_mean_final = f64_of(value)?,
            "lr.scale" => t.lr_scale = f64_of(value)?,
            "lr.rotation" => t.lr_rotation = f64_of(value)?,
            "lr.opacity" => t.lr_opacity = f64_of(value)?,
            "lr.color" => t.lr_color = f64_of(value)?,
            "lr.adam_beta1" => t.adam.beta1 = f64_of(value)?,
            "lr.adam_beta2" => t.adam.beta2 = f64_of(value)?,
            "lr.adam_eps" => t.adam.eps = f64_of(value)?,
            "explore.tau" => {
                self.tau = if value == "auto" {
                    TauSetting::Auto
                } else {
                    TauSetting::Value(f64_of(value)?)
                }
            }
            "explore.alpha" => t.explore.alpha = f64_of(value)?,
            "explore.beta1" => t.explore.beta1 = f64_of(value)?,
            "explore.beta2" => t.explore.beta2 = f64_of(value)?,
            "explore.gate_sharpness" => t.explore.gate_sharpness = f64_of(value)?,
            "explore.gate_threshold" => t.explore.gate_threshold = f64_of(value)?,
            "explore.denoise_sign_flip" => t.explore.denoise_sign_flip = bool_of(value)?,
            "stages.exploration" => t.stages.exploration = bool_of(value)?,
            "stages.momentum" => t.stages.momentum = bool_of(value)?,
            "stages.spatial_denoise" => t.stages.spatial_denoise = bool_of(value)?,
            "stages.relocation" => t.stages.relocation = bool_of(value)?,
            "stages.uncertainty_prune" => t.stages.uncertainty_prune = bool_of(value)?,
            "stages.refinement" => t.stages.refinement = bool_of(value)?,
            "lifecycle.prune_fraction" => t.prune_fraction = f64_of(value)?,
            "lifecycle.densify_fraction" => t.densify_fraction = f64_of(value)?,
            "lifecycle.refinement_rounds" => t.refinement_rounds = u64_of(value)? as u32,
            "lifecycle.knn_k" => t.knn_k = usize_of(value)?,
            "lifecycle.relocation_interval" => t.relocation_interval = u64_of(value)?,
            "lifecycle.relocation_stop" => t.relocation_stop = f64_of(value)?,
            "lifecycle.opacity_floor" => t.opacity_floor = f64_of(value)?,
            "lifecycle.prune_point" => t.prune_point = f64_of(value)?,
            "lifecycle.refine_start" => t.refine_start = f64_of(value)?,
            "lifecycle.refine_end" => t.refine_end = f64_of(value)?,
            "synth.count" => self.synth.primitive_count = usize_of(value)?,
            "synth.extent" => self.synth.extent = f64_of(value)?,
            "synth.opacity_lo" => self.synth.opacity_range.0 = f64_of(value)?,
            "synth.opacity_hi" => self.synth.opacity_range.1 = f64_of(value)?,
            "synth.scale_lo" => self.synth.scale_range.0 = f64_of(value)?,
            "synth.scale_hi" => self.synth.scale_range.1 = f64_of(value)?,
            "synth.cameras" => self.synth.camera_count = usize_of(value)?,
            "synth.radius" => self.synth.camera_radius = f64_of(value)?,
            "synth.resolution" => self.synth.resolution = u64_of(value)? as u32,
            "synth.noise_sigma" => self.synth.noise_sigma = f64_of(value)?,
            "synth.scale_jitter" => self.synth.scale_jitter = f64_of(value)?,
            "synth.seed" => self.synth.seed = u64_of(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parse a config file over the defaults. Errors name the line.
    pub fn parse(text: &str, label: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        cfg.apply_text(text, label)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, label: &str) -> Result<(), String> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{label}:{}: expected `key = value`", lineno + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("{label}:{}: {e}", lineno + 1))?;
        }
        Ok(())
    }

    /// The training seed also drives the scene's random streams.
    pub fn resolved_train_config(&self) -> TrainConfig {
        self.train.clone()
    }

    pub fn background(&self) -> Vec3 {
        self.train.background
    }

    pub fn adam(&self) -> AdamConfig {
        self.train.adam
    }

    pub fn explore(&self) -> ExploreConfig {
        self.train.explore
    }

    pub fn stages(&self) -> StageFlags {
        self.train.stages
    }
}
