//! Checkpoints: scene PLY plus a structured-text sidecar for optimizer and
//! random-stream state.
//!
//! The sidecar stores floats in shortest round-trip decimal, which parses
//! back to the same bits; loading a checkpoint therefore restores training
//! exactly.

use crate::ply;
use desplat_core::math::{Quat, Vec3};
use desplat_core::optim::{OptimizerState, ParamVec};
use desplat_core::scene::Scene;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

pub const SCENE_FILE: &str = "scene.ply";
pub const STATE_FILE: &str = "scene.optstate";

pub fn save_checkpoint(dir: &Path, scene: &Scene, state: &OptimizerState) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    ply::write_ply(&dir.join(SCENE_FILE), scene)?;
    fs::write(dir.join(STATE_FILE), state_to_text(scene, state))
}

pub fn load_checkpoint(dir: &Path) -> io::Result<(Scene, OptimizerState)> {
    let mut scene = ply::read_ply(&dir.join(SCENE_FILE))?;
    let text = fs::read_to_string(dir.join(STATE_FILE))?;
    let state = state_from_text(&text, &mut scene)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    Ok((scene, state))
}

/// Load a scene PLY that may or may not have a sidecar next to it; missing
/// sidecar means fresh optimizer state and default streams.
pub fn load_scene_with_optional_state(scene_path: &Path) -> io::Result<(Scene, OptimizerState)> {
    let mut scene = ply::read_ply(scene_path)?;
    let sidecar = scene_path.with_extension("optstate");
    if sidecar.is_file() {
        let text = fs::read_to_string(sidecar)?;
        let state = state_from_text(&text, &mut scene)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Ok((scene, state))
    } else {
        let state = OptimizerState::new(scene.len());
        Ok((scene, state))
    }
}

fn push_vec3(out: &mut String, v: Vec3) {
    let _ = write!(out, " {} {} {}", v.x, v.y, v.z);
}

fn push_quat(out: &mut String, q: Quat) {
    let _ = write!(out, " {} {} {} {}", q.w, q.x, q.y, q.z);
}

fn push_params(out: &mut String, p: &ParamVec) {
    push_vec3(out, p.mean);
    push_vec3(out, p.log_scale);
    push_quat(out, p.rotation);
    let _ = write!(out, " {}", p.raw_opacity);
    push_vec3(out, p.color);
}

pub fn state_to_text(scene: &Scene, state: &OptimizerState) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "desplat-optstate v1");
    let _ = writeln!(out, "step_count {}", state.step_count);
    let _ = writeln!(out, "next_stream {}", scene.next_stream);
    let _ = writeln!(out, "count {}", state.len());
    for i in 0..state.len() {
        let mut line = format!("{}", scene.streams[i]);
        push_params(&mut line, &state.adam_m[i]);
        push_params(&mut line, &state.adam_v[i]);
        push_vec3(&mut line, state.explore_momentum[i]);
        push_vec3(&mut line, state.prev_mean_grad[i]);
        let _ = writeln!(out, "{line}");
    }
    out
}

/// Parse a sidecar; the scene provides the primitive count and receives the
/// restored stream ids.
pub fn state_from_text(text: &str, scene: &mut Scene) -> Result<OptimizerState, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty state file")?;
    if header != "desplat-optstate v1" {
        return Err(format!("unsupported state header: {header}"));
    }
    let mut step_count = 0u64;
    let mut next_stream = None;
    let mut count = None;
    for line in lines.by_ref() {
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| format!("bad state line: {line}"))?;
        match key {
            "step_count" => step_count = value.parse().map_err(|_| "bad step_count")?,
            "next_stream" => {
                next_stream = Some(value.parse().map_err(|_| "bad next_stream")?)
            }
            "count" => {
                count = Some(value.parse::<usize>().map_err(|_| "bad count")?);
                break;
            }
            _ => return Err(format!("unexpected state key {key}")),
        }
    }
    let count = count.ok_or("missing count")?;
    if count != scene.len() {
        return Err(format!(
            "state rows ({count}) do not match scene primitives ({})",
            scene.len()
        ));
    }

    let mut state = OptimizerState::new(count);
    state.step_count = step_count;
    let mut streams = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        if i >= count {
            return Err("trailing state rows".into());
        }
        let mut it = line.split_whitespace();
        let mut next = || -> Result<f64, String> {
            it.next()
                .ok_or_else(|| format!("row {i}: too few fields"))?
                .parse()
                .map_err(|_| format!("row {i}: bad number"))
        };
        let stream = next()? as u64;
        let vec3 = |next: &mut dyn FnMut() -> Result<f64, String>| -> Result<Vec3, String> {
            Ok(Vec3::new(next()?, next()?, next()?))
        };
        let params = |next: &mut dyn FnMut() -> Result<f64, String>| -> Result<ParamVec, String> {
            Ok(ParamVec {
                mean: Vec3::new(next()?, next()?, next()?),
                log_scale: Vec3::new(next()?, next()?, next()?),
                rotation: Quat::new(next()?, next()?, next()?, next()?),
                raw_opacity: next()?,
                color: Vec3::new(next()?, next()?, next()?),
            })
        };
        state.adam_m[i] = params(&mut next)?;
        state.adam_v[i] = params(&mut next)?;
        state.explore_momentum[i] = vec3(&mut next)?;
        state.prev_mean_grad[i] = vec3(&mut next)?;
        if it.next().is_some() {
            return Err(format!("row {i}: trailing fields"));
        }
        streams.push(stream);
    }
    if streams.len() != count {
        return Err("missing state rows".into());
    }
    scene.streams = streams;
    if let Some(ns) = next_stream {
        scene.next_stream = ns;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use desplat_core::gaussian::GaussianPrimitive;
    use desplat_core::rng::StreamRng;

    fn random_state(seed: u64, n: usize) -> (Scene, OptimizerState) {
        let mut rng = StreamRng::new(seed, 3);
        let prims: Vec<GaussianPrimitive> = (0..n)
            .map(|_| GaussianPrimitive {
                mean: Vec3::new(rng.next_normal(), rng.next_normal(), rng.next_normal()),
                log_scale: Vec3::splat(rng.next_range(-3.0, 0.0)),
                rotation: Quat::identity(),
                raw_opacity: rng.next_range(-2.0, 2.0),
                color: Vec3::splat(0.5),
            })
            .collect();
        let scene = Scene::new(prims, seed);
        let mut state = OptimizerState::new(n);
        state.step_count = 1234;
        for i in 0..n {
            state.adam_m[i].mean = Vec3::new(rng.next_normal(), 0.0, -0.0);
            state.adam_v[i].raw_opacity = rng.next_f64();
            state.explore_momentum[i] = Vec3::splat(rng.next_normal() * 1e-8);
            state.prev_mean_grad[i] = Vec3::splat(rng.next_normal() * 1e8);
        }
        (scene, state)
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("desplat_ckpt_test");
        let (scene, state) = random_state(7, 12);
        save_checkpoint(&dir, &scene, &state).unwrap();
        let (scene2, state2) = load_checkpoint(&dir).unwrap();
        assert_eq!(scene.primitives, scene2.primitives);
        assert_eq!(scene.streams, scene2.streams);
        assert_eq!(scene.next_stream, scene2.next_stream);
        assert_eq!(state.step_count, state2.step_count);
        for i in 0..state.len() {
            assert_eq!(state.adam_m[i], state2.adam_m[i]);
            assert_eq!(state.adam_v[i], state2.adam_v[i]);
            assert_eq!(state.explore_momentum[i], state2.explore_momentum[i]);
            assert_eq!(state.prev_mean_grad[i], state2.prev_mean_grad[i]);
        }
    }

    #[test]
    fn count_mismatch_rejected() {
        let (scene, state) = random_state(8, 4);
        let text = state_to_text(&scene, &state);
        let (mut other, _) = random_state(9, 5);
        assert!(state_from_text(&text, &mut other).is_err());
    }
}
