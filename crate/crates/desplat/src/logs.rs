//! Textual run outputs: metrics CSV, mutation log, evaluation CSV.
//!
//! Floats are written in Rust's shortest round-trip form, so identical runs
//! produce byte-identical files.

use desplat_core::lifecycle::MutationRecord;
use desplat_core::train::{EvalReport, MetricRow, MutationEvent};
use std::fmt::Write as _;

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("iteration,l1,dssim,total,psnr,ssim,primitive_count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.l1, r.dssim, r.total, r.psnr, r.ssim, r.primitive_count
        );
    }
    out
}

pub fn mutation_log(events: &[MutationEvent]) -> String {
    let mut out = String::new();
    for e in events {
        match e.record {
            MutationRecord::Relocate {
                donor,
                target,
                layers,
            } => {
                let _ = writeln!(
                    out,
                    "iteration={} op=relocate donor={donor} target={target} layers={layers}",
                    e.iteration
                );
            }
            MutationRecord::Prune { id, score } => {
                let _ = writeln!(out, "iteration={} op=prune id={id} score={score}", e.iteration);
            }
            MutationRecord::Split { id, new_id } => {
                let _ = writeln!(
                    out,
                    "iteration={} op=split id={id} new_id={new_id}",
                    e.iteration
                );
            }
        }
    }
    out
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("view,psnr,ssim\n");
    for v in &report.per_view {
        let _ = writeln!(out, "{},{},{}", v.view, v.psnr, v.ssim);
    }
    let _ = writeln!(out, "mean,{},{}", report.mean_psnr, report.mean_ssim);
    out
}
