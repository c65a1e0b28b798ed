// Scratch calibration harness (removed before finalizing).
use desplat_core::exec::Sequential;
use desplat_core::optim::{resolve_tau, OptimizerState};
use desplat_core::train::{synthesize, train, StageFlags, SyntheticSceneSpec, TrainConfig, TrainLog};
use std::time::Instant;

#[test]
#[ignore]
fn stage_isolation() {
    // Which stage wrecks the run? Toggle one at a time on seed 2.
    let mut spec = SyntheticSceneSpec::desk_default(1);
    if let Ok(s) = std::env::var("CAL_SCALE_LO") {
        spec.scale_range.0 = s.parse().unwrap();
    }
    if let Ok(s) = std::env::var("CAL_SCALE_HI") {
        spec.scale_range.1 = s.parse().unwrap();
    }
    let s = synthesize(&spec).unwrap();
    let extent = s.init.extent();
    let mut base_cfg = TrainConfig::default();
    base_cfg.explore.tau = resolve_tau(base_cfg.lr_mean_init, extent);
    base_cfg.max_steps = 2000;

    let optim_only = StageFlags {
        exploration: true,
        momentum: true,
        spatial_denoise: true,
        relocation: false,
        uncertainty_prune: false,
        refinement: false,
    };
    let reloc_only = StageFlags {
        relocation: true,
        ..StageFlags::all_off()
    };
    let arms: [(&str, StageFlags, f64); 7] = [
        ("all_off", StageFlags::all_off(), 0.005),
        ("optim", optim_only, 0.005),
        ("reloc.0035x1", reloc_only, 0.0035),
        ("reloc.0035", reloc_only, 0.0035),
        ("prune_only", StageFlags { uncertainty_prune: true, ..StageFlags::all_off() }, 0.005),
        ("refine_only", StageFlags { refinement: true, ..StageFlags::all_off() }, 0.005),
        ("full", StageFlags::all_on(), 0.0035),
    ];
    for (name, stages, floor) in arms {
        let mut cfg = base_cfg.clone();
        cfg.stages = stages;
        cfg.opacity_floor = floor;
        let mut scene = s.init.clone();
        let mut state = OptimizerState::new(scene.len());
        let mut log = TrainLog::new();
        let rep = train(&mut scene, &mut state, &s.cameras, &s.targets, &cfg, &Sequential, &mut log).unwrap();
        let relocs = log.mutations.iter().filter(|m| matches!(m.record, desplat_core::lifecycle::MutationRecord::Relocate { .. })).count();
        eprintln!("arm {name:>11}: {:.3} dB ({} prims, {} mutations, {} relocs)", rep.mean_psnr, scene.len(), log.mutations.len(), relocs);
    }
}

#[test]
#[ignore]
fn knob_sweep() {
    // Schedule placements over all 5 seeds, mean gap full-baseline.
    for (prune_point, refine_lo, refine_hi, reloc_at) in [
        (0.8, 0.25, 0.5, 300u64),
        (0.7, 0.25, 0.5, 300),
        (0.8, 0.2, 0.45, 300),
        (0.8, 0.25, 0.5, 200),
        (0.7, 0.2, 0.45, 200),
    ] {
        let mut full_sum = 0.0;
        let mut base_sum = 0.0;
        for seed in [1u64, 2, 3, 4, 5] {
            let spec = SyntheticSceneSpec::desk_default(seed);
            let s = synthesize(&spec).unwrap();
            let extent = s.init.extent();
            let mut cfg = TrainConfig::default();
            cfg.explore.tau = resolve_tau(cfg.lr_mean_init, extent);
            cfg.prune_point = prune_point;
            cfg.refine_start = refine_lo;
            cfg.refine_end = refine_hi;
            cfg.relocation_interval = reloc_at;
            cfg.relocation_stop = (reloc_at as f64 + 50.0) / cfg.max_steps as f64;

            let mut scene_f = s.init.clone();
            let mut state_f = OptimizerState::new(scene_f.len());
            let mut log_f = TrainLog::new();
            let full = train(&mut scene_f, &mut state_f, &s.cameras, &s.targets, &cfg, &Sequential, &mut log_f).unwrap();

            let mut cfg_b = cfg.clone();
            cfg_b.stages = StageFlags::all_off();
            let mut scene_b = s.init.clone();
            let mut state_b = OptimizerState::new(scene_b.len());
            let mut log_b = TrainLog::new();
            let base = train(&mut scene_b, &mut state_b, &s.cameras, &s.targets, &cfg_b, &Sequential, &mut log_b).unwrap();
            full_sum += full.mean_psnr;
            base_sum += base.mean_psnr;
        }
        eprintln!(
            "pp {prune_point} rw {refine_lo}-{refine_hi} reloc@{reloc_at}: full {:.3} base {:.3} gap {:+.3}",
            full_sum / 5.0,
            base_sum / 5.0,
            (full_sum - base_sum) / 5.0
        );
    }
}

#[test]
#[ignore]
fn compactness_bench() {
    use desplat_core::lifecycle::{
        fisher_accumulate, prune_uncertain, remove_primitives, uncertainty_scores,
        FisherAccumulator,
    };
    use desplat_core::math::Vec3;
    use desplat_core::rng::StreamRng;

    let mut deg_u_sum = 0.0;
    let mut deg_r_sum = 0.0;
    for seed in [1u64, 2, 3, 4, 5] {
        let spec = SyntheticSceneSpec::desk_default(seed);
        let s = synthesize(&spec).unwrap();
        let extent = s.init.extent();
        let mut cfg = TrainConfig::default();
        cfg.explore.tau = resolve_tau(cfg.lr_mean_init, extent);
        cfg.stages = StageFlags::all_off();

        let mut scene = s.init.clone();
        let mut state = OptimizerState::new(scene.len());
        let mut log = TrainLog::new();
        let base = train(&mut scene, &mut state, &s.cameras, &s.targets, &cfg, &Sequential, &mut log).unwrap();

        let (train_views, _) = desplat_core::train::holdout_split(s.cameras.len(), 8);
        let train_cams: Vec<_> = train_views.iter().map(|&v| s.cameras[v].clone()).collect();
        let train_tgts: Vec<_> = train_views.iter().map(|&v| s.targets[v].clone()).collect();

        let mut ft_cfg = cfg.clone();
        ft_cfg.max_steps = 500;
        ft_cfg.lr_mean_init = 2e-4;
        ft_cfg.lr_mean_final = 1e-4;

        // Uncertainty arm.
        let mut scene_u = scene.clone();
        let mut state_u = state.clone();
        let mut acc = FisherAccumulator::new(scene_u.len());
        fisher_accumulate(&mut acc, &scene_u, &train_cams, &train_tgts, Vec3::zero(), &Sequential).unwrap();
        let scores = uncertainty_scores(&acc).unwrap();
        prune_uncertain(&mut scene_u, &mut state_u, &scores, 0.10).unwrap();
        let mut log_u = TrainLog::new();
        let rep_u = train(&mut scene_u, &mut state_u, &s.cameras, &s.targets, &ft_cfg, &Sequential, &mut log_u).unwrap();

        // Random arm.
        let mut scene_r = scene.clone();
        let mut state_r = state.clone();
        let n = scene_r.len();
        let m = (0.10f64 * n as f64).ceil() as usize;
        let mut rng = StreamRng::new(seed, 7);
        let mut ids: Vec<u32> = (0..n as u32).collect();
        for i in 0..m {
            let j = i + rng.next_index(n - i);
            ids.swap(i, j);
        }
        let mut chosen = ids[..m].to_vec();
        chosen.sort_unstable();
        remove_primitives(&mut scene_r, &mut state_r, &chosen);
        let mut log_r = TrainLog::new();
        let rep_r = train(&mut scene_r, &mut state_r, &s.cameras, &s.targets, &ft_cfg, &Sequential, &mut log_r).unwrap();

        let deg_u = base.mean_psnr - rep_u.mean_psnr;
        let deg_r = base.mean_psnr - rep_r.mean_psnr;
        eprintln!(
            "seed {seed}: base {:.3} | uncertainty-pruned {:.3} (deg {:+.3}) | random-pruned {:.3} (deg {:+.3})",
            base.mean_psnr, rep_u.mean_psnr, deg_u, rep_r.mean_psnr, deg_r
        );
        deg_u_sum += deg_u;
        deg_r_sum += deg_r;
    }
    eprintln!(
        "mean degradation: uncertainty {:+.3} dB | random {:+.3} dB",
        deg_u_sum / 5.0,
        deg_r_sum / 5.0
    );
}

#[test]
#[ignore]
fn refine_window_placement() {
    for seed in [1u64, 5] {
        let spec = SyntheticSceneSpec::desk_default(seed);
        let s = synthesize(&spec).unwrap();
        let extent = s.init.extent();
        let mut base_cfg = TrainConfig::default();
        base_cfg.explore.tau = resolve_tau(base_cfg.lr_mean_init, extent);

        let windows: [(&str, f64, f64); 4] = [
            ("0.60-0.90", 0.6, 0.9),
            ("0.40-0.65", 0.4, 0.65),
            ("0.25-0.50", 0.25, 0.5),
            ("0.15-0.35", 0.15, 0.35),
        ];
        for (name, lo, hi) in windows {
            for full in [false, true] {
                let mut cfg = base_cfg.clone();
                cfg.refine_start = lo;
                cfg.refine_end = hi;
                cfg.stages = if full {
                    StageFlags::all_on()
                } else {
                    StageFlags {
                        refinement: true,
                        ..StageFlags::all_off()
                    }
                };
                let mut scene = s.init.clone();
                let mut state = OptimizerState::new(scene.len());
                let mut log = TrainLog::new();
                let rep = train(&mut scene, &mut state, &s.cameras, &s.targets, &cfg, &Sequential, &mut log).unwrap();
                eprintln!(
                    "seed {seed} window {name} {}: {:.3} dB",
                    if full { "full  " } else { "refine" },
                    rep.mean_psnr
                );
            }
        }
    }
}

#[test]
#[ignore]
fn relocation_event_placement() {
    let spec = SyntheticSceneSpec::desk_default(1);
    let s = synthesize(&spec).unwrap();
    let extent = s.init.extent();
    let mut base_cfg = TrainConfig::default();
    base_cfg.explore.tau = resolve_tau(base_cfg.lr_mean_init, extent);
    base_cfg.stages = StageFlags {
        relocation: true,
        ..StageFlags::all_off()
    };
    base_cfg.opacity_floor = 0.0035;

    let placements: [(&str, u64, f64); 5] = [
        ("none", 0, 0.8),
        ("@100x16", 100, 0.8),
        ("@400x4", 400, 0.8),
        ("@200 once", 200, 0.11),
        ("@800 once", 800, 0.41),
    ];
    for (name, interval, stop) in placements {
        let mut cfg = base_cfg.clone();
        cfg.relocation_interval = interval;
        cfg.relocation_stop = stop;
        let mut scene = s.init.clone();
        let mut state = OptimizerState::new(scene.len());
        let mut log = TrainLog::new();
        let rep = train(&mut scene, &mut state, &s.cameras, &s.targets, &cfg, &Sequential, &mut log).unwrap();
        eprintln!(
            "placement {name:>9}: {:.3} dB ({} relocs)",
            rep.mean_psnr,
            log.mutations.len()
        );
    }
}

#[test]
#[ignore]
fn refine_trajectory() {
    let spec = SyntheticSceneSpec::desk_default(1);
    let s = synthesize(&spec).unwrap();
    let extent = s.init.extent();
    let mut cfg = TrainConfig::default();
    cfg.explore.tau = resolve_tau(cfg.lr_mean_init, extent);
    cfg.stages = StageFlags {
        refinement: true,
        ..StageFlags::all_off()
    };
    cfg.eval_interval = 25;
    let mut scene = s.init.clone();
    let mut state = OptimizerState::new(scene.len());
    let mut log = TrainLog::new();
    let rep = train(&mut scene, &mut state, &s.cameras, &s.targets, &cfg, &Sequential, &mut log).unwrap();
    for row in &log.metrics {
        if row.iteration >= 1100 {
            eprintln!("it {:>5}: train psnr {:.2} dB  prims {}", row.iteration, row.psnr, row.primitive_count);
        }
    }
    for m in &log.mutations {
        eprintln!("mutation at {}: {:?}", m.iteration, m.record);
    }
    eprintln!("final holdout {:.3}", rep.mean_psnr);
}

#[test]
#[ignore]
fn recovery_bench() {
    let t0 = Instant::now();
    let mut full_sum = 0.0;
    let mut base_sum = 0.0;
    for seed in [1u64, 2, 3, 4, 5] {
        let mut spec = SyntheticSceneSpec::desk_default(seed);
        if let Ok(s) = std::env::var("CAL_SCALE_LO") {
            spec.scale_range.0 = s.parse().unwrap();
        }
        if let Ok(s) = std::env::var("CAL_SCALE_HI") {
            spec.scale_range.1 = s.parse().unwrap();
        }
        let s = synthesize(&spec).unwrap();
        let extent = s.init.extent();

        let mut cfg = TrainConfig::default();
        cfg.explore.tau = resolve_tau(cfg.lr_mean_init, extent);

        // Initial quality.
        let init_eval = {
            let (_, holdout): (Vec<usize>, Vec<usize>) =
                desplat_core::train::holdout_split(s.cameras.len(), 8);
            let cams: Vec<_> = holdout.iter().map(|&v| s.cameras[v].clone()).collect();
            let tgts: Vec<_> = holdout.iter().map(|&v| s.targets[v].clone()).collect();
            desplat_core::train::evaluate(
                &s.init,
                &cams,
                &tgts,
                desplat_core::math::Vec3::zero(),
                &Sequential,
            )
            .unwrap()
        };

        let t1 = Instant::now();
        let mut scene_f = s.init.clone();
        let mut state_f = OptimizerState::new(scene_f.len());
        let mut log_f = TrainLog::new();
        let full = train(
            &mut scene_f,
            &mut state_f,
            &s.cameras,
            &s.targets,
            &cfg,
            &Sequential,
            &mut log_f,
        )
        .unwrap();
        let full_time = t1.elapsed();

        let mut cfg_b = cfg.clone();
        cfg_b.stages = StageFlags::all_off();
        let t2 = Instant::now();
        let mut scene_b = s.init.clone();
        let mut state_b = OptimizerState::new(scene_b.len());
        let mut log_b = TrainLog::new();
        let base = train(
            &mut scene_b,
            &mut state_b,
            &s.cameras,
            &s.targets,
            &cfg_b,
            &Sequential,
            &mut log_b,
        )
        .unwrap();
        let base_time = t2.elapsed();

        eprintln!(
            "seed {seed}: init {:.2} dB | full {:.3} dB ({} prims, {:.1?}) | baseline {:.3} dB ({} prims, {:.1?})",
            init_eval.mean_psnr,
            full.mean_psnr,
            scene_f.len(),
            full_time,
            base.mean_psnr,
            scene_b.len(),
            base_time
        );
        full_sum += full.mean_psnr;
        base_sum += base.mean_psnr;
    }
    eprintln!(
        "mean full {:.3} dB | mean baseline {:.3} dB | total {:.1?}",
        full_sum / 5.0,
        base_sum / 5.0,
        t0.elapsed()
    );
}
