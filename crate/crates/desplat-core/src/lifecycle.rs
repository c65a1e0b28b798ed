//! Primitive population control: opacity-preserving relocation,
//! Fisher-information uncertainty pruning, and spatial coherence refinement.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::img::ImageBuf;
use crate::kdtree::{dist2, KdTree};
use crate::math::{abs, binomial, ln, logit, powf, round, sqrt, sym_eigenvalues, Vec3};
use crate::objective::l2_sum_loss;
use crate::optim::OptimizerState;
use crate::render::{backward_with, render_with};
use crate::rng::StreamRng;
use crate::scene::Scene;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// One structural change to the primitive population; the trainer stamps the
/// iteration when logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MutationRecord {
    /// `donor` moved onto `target`, which now carries `layers` co-located
    /// layers in total.
    Relocate { donor: u32, target: u32, layers: u32 },
    Prune { id: u32, score: f64 },
    Split { id: u32, new_id: u32 },
}

/// Opacity of each of `n` co-located layers that together composite to
/// `o_old`: `1 - (1 - o_old)^(1/n)`.
pub fn relocation_opacity(o_old: f64, n: u32) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidArgument("layer count must be >= 1".into()));
    }
    if !(o_old > 0.0 && o_old < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "opacity {o_old} outside (0, 1)"
        )));
    }
    if n == 1 {
        // Exact identity; the general expression loses a couple of ulps in
        // the double subtraction.
        return Ok(o_old);
    }
    Ok(1.0 - powf(1.0 - o_old, 1.0 / n as f64))
}

/// Scalar factor on the covariance when one primitive becomes `n` co-located
/// layers: `o_old^2 / S^2` with the alternating binomial sum
/// `S = sum_{i=1}^{n} sum_{k=0}^{i-1} C(i-1,k) (-1)^k o_new^(k+1) / sqrt(k+1)`.
pub fn relocation_covariance_factor(o_old: f64, o_new: f64, n: u32) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidArgument("layer count must be >= 1".into()));
    }
    let mut sum = 0.0;
    for i in 1..=n {
        for k in 0..i {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += binomial(i - 1, k) * sign * powf(o_new, (k + 1) as f64) / sqrt((k + 1) as f64);
        }
    }
    if !(sum > 0.0) {
        return Err(Error::Internal(format!(
            "relocation covariance sum {sum} <= 0 for o_old={o_old} n={n}"
        )));
    }
    Ok((o_old * o_old) / (sum * sum))
}

/// `c * Sigma_old` with `c` from [`relocation_covariance_factor`].
pub fn relocation_covariance(
    sigma_old: &crate::math::Mat3,
    o_old: f64,
    o_new: f64,
    n: u32,
) -> Result<crate::math::Mat3> {
    let c = relocation_covariance_factor(o_old, o_new, n)?;
    Ok(sigma_old.scaled(c))
}

/// Move every primitive with opacity below `opacity_floor` onto a target
/// sampled with probability proportional to target opacity, rewriting the
/// opacity and covariance of all co-located layers so the composited
/// appearance at the shared mean is preserved. Optimizer rows of donors and
/// targets reset; donors draw fresh noise streams.
pub fn relocate(
    scene: &mut Scene,
    state: &mut OptimizerState,
    opacity_floor: f64,
    rng: &mut StreamRng,
) -> Vec<MutationRecord> {
    let n = scene.len();
    let opacities: Vec<f64> = scene.primitives.iter().map(|p| p.opacity()).collect();
    let donors: Vec<usize> = (0..n).filter(|&i| opacities[i] < opacity_floor).collect();
    if donors.is_empty() {
        return Vec::new();
    }
    let alive: Vec<usize> = (0..n).filter(|&i| opacities[i] >= opacity_floor).collect();
    if alive.is_empty() {
        return Vec::new();
    }

    // Cumulative opacity over the alive set for proportional sampling.
    let mut cumsum = Vec::with_capacity(alive.len());
    let mut total = 0.0;
    for &i in &alive {
        total += opacities[i];
        cumsum.push(total);
    }

    // Assign each donor a target; group donors per target.
    let mut clones_of: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut log = Vec::new();
    for &donor in &donors {
        let u = rng.next_f64() * total;
        let slot = cumsum.partition_point(|&c| c <= u).min(alive.len() - 1);
        let target = alive[slot];
        clones_of[target].push(donor);
    }

    for target in 0..n {
        if clones_of[target].is_empty() {
            continue;
        }
        let layers = 1 + clones_of[target].len() as u32;
        let o_old = opacities[target];
        let o_new = match relocation_opacity(o_old, layers) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let c = match relocation_covariance_factor(o_old, o_new, layers) {
            Ok(v) => v,
            Err(_) => continue,
        };
        // Sigma_new = c * Sigma_old means each scale picks up sqrt(c).
        let log_scale_shift = 0.5 * ln(c);
        let template = scene.primitives[target];
        let new_opacity = logit(o_new);

        {
            let t = &mut scene.primitives[target];
            t.raw_opacity = new_opacity;
            t.log_scale += Vec3::splat(log_scale_shift);
        }
        state.reset_primitive(target);

        for &donor in &clones_of[target] {
            let d = &mut scene.primitives[donor];
            d.mean = template.mean;
            d.rotation = template.rotation;
            d.color = template.color;
            d.log_scale = template.log_scale + Vec3::splat(log_scale_shift);
            d.raw_opacity = new_opacity;
            state.reset_primitive(donor);
            scene.streams[donor] = scene.fresh_stream();
            log.push(MutationRecord::Relocate {
                donor: donor as u32,
                target: target as u32,
                layers,
            });
        }
    }
    log
}

/// Per-primitive 6x6 Fisher approximations over (mean, scale) parameters,
/// accumulated as outer products of per-view L2 loss gradients.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    pub matrices: Vec<[[f64; 6]; 6]>,
    pub views_accumulated: u32,
}

impl FisherAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            matrices: vec![[[0.0; 6]; 6]; n],
            views_accumulated: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Rank-1 update `F_i += g g^T`.
    pub fn add_gradient(&mut self, i: usize, g: [f64; 6]) {
        let f = &mut self.matrices[i];
        for (r, gr) in g.iter().enumerate() {
            for (c, gc) in g.iter().enumerate() {
                f[r][c] += gr * gc;
            }
        }
    }
}

/// Render each view, differentiate the summed-squared-error loss, and add
/// the (mean, scale) gradient outer product of every primitive.
pub fn fisher_accumulate<E: Executor>(
    acc: &mut FisherAccumulator,
    scene: &Scene,
    cameras: &[Camera],
    targets: &[ImageBuf],
    background: Vec3,
    exec: &E,
) -> Result<()> {
    if cameras.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} cameras vs {} targets",
            cameras.len(),
            targets.len()
        )));
    }
    if acc.len() != scene.len() {
        return Err(Error::InvalidArgument(
            "accumulator size does not match scene".into(),
        ));
    }
    for (camera, target) in cameras.iter().zip(targets.iter()) {
        let out = render_with(exec, scene, camera, background);
        let (_, grad_img) = l2_sum_loss(&out.rgb, target)?;
        let grads = backward_with(exec, scene, camera, &out, &grad_img, background)?;
        for (i, g) in grads.iter().enumerate() {
            let s = scene.primitives[i].scale();
            // Scale block with respect to s: d/ds = (d/d log s) / s.
            let g6 = [
                g.d_mean.x,
                g.d_mean.y,
                g.d_mean.z,
                g.d_log_scale.x / s.x,
                g.d_log_scale.y / s.y,
                g.d_log_scale.z / s.z,
            ];
            acc.add_gradient(i, g6);
        }
        acc.views_accumulated += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub id: u32,
    pub u: f64,
}

/// Sum of singular values of a symmetric 6x6 matrix (absolute eigenvalues).
pub fn singular_value_sum(m: &[[f64; 6]; 6]) -> f64 {
    sym_eigenvalues(*m).iter().map(|v| abs(*v)).sum()
}

/// Trace route: equals the singular-value sum for PSD accumulations; kept
/// as an independent cross-check of the SVD path.
pub fn trace6(m: &[[f64; 6]; 6]) -> f64 {
    (0..6).map(|i| m[i][i]).sum()
}

/// Per-primitive uncertainty `u_i = sum_j sigma_j(F_i)`. Smaller u means
/// less accumulated information, i.e. higher uncertainty.
pub fn uncertainty_scores(acc: &FisherAccumulator) -> Result<Vec<UncertaintyScore>> {
    if acc.views_accumulated == 0 {
        return Err(Error::InvalidArgument(
            "no views accumulated".into(),
        ));
    }
    Ok(acc
        .matrices
        .iter()
        .enumerate()
        .map(|(i, m)| UncertaintyScore {
            id: i as u32,
            u: singular_value_sum(m),
        })
        .collect())
}

/// Integer count `ceil(fraction * n)` computed against the real product, not
/// its floating-point rounding.
pub(crate) fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let nearest = round(x);
    if abs(x - nearest) < 1e-9 * (n as f64).max(1.0) {
        nearest as usize
    } else {
        crate::math::ceil(x) as usize
    }
}

/// Remove primitives by id, keeping order of the survivors and dropping the
/// matching optimizer rows.
pub fn remove_primitives(scene: &mut Scene, state: &mut OptimizerState, ids: &[u32]) {
    let mut keep = vec![true; scene.len()];
    for &id in ids {
        keep[id as usize] = false;
    }
    let mut idx = 0;
    scene.primitives.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
    idx = 0;
    scene.streams.retain(|_| {
        let k = keep[idx];
        idx += 1;
        k
    });
    state.retain_rows(&keep);
}

/// Remove exactly `ceil(fraction * n)` primitives with the smallest
/// uncertainty scores (ties by primitive index). Returns the removed ids in
/// ascending order together with their mutation records.
pub fn prune_uncertain(
    scene: &mut Scene,
    state: &mut OptimizerState,
    scores: &[UncertaintyScore],
    fraction: f64,
) -> Result<(Vec<u32>, Vec<MutationRecord>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "prune fraction {fraction} outside [0, 1)"
        )));
    }
    if scores.len() != scene.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} primitives",
            scores.len(),
            scene.len()
        )));
    }
    let m = ceil_fraction(fraction, scene.len());
    if m == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut order: Vec<&UncertaintyScore> = scores.iter().collect();
    order.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.id.cmp(&b.id)));
    let mut removed: Vec<u32> = order[..m].iter().map(|s| s.id).collect();
    let log = order[..m]
        .iter()
        .map(|s| MutationRecord::Prune { id: s.id, score: s.u })
        .collect();
    removed.sort_unstable();
    remove_primitives(scene, state, &removed);
    Ok((removed, log))
}

/// Mean squared distance from each primitive's mean to its `k` nearest
/// neighbor means (self excluded), via a kd-tree.
pub fn knn_sparsity(scene: &Scene, k: usize) -> Result<Vec<f64>> {
    knn_check(scene.len(), k)?;
    let points: Vec<Vec3> = scene.primitives.iter().map(|p| p.mean).collect();
    let tree = KdTree::build(&points);
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let dists = tree.k_nearest_dist2(q, i as u32, k);
            dists.iter().sum::<f64>() / k as f64
        })
        .collect())
}

/// O(n^2) reference for [`knn_sparsity`]; both paths sort the squared
/// distances ascending and sum in that order, so results match exactly.
pub fn knn_sparsity_brute(points: &[Vec3], k: usize) -> Result<Vec<f64>> {
    knn_check(points.len(), k)?;
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let mut dists: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, &p)| dist2(q, p))
                .collect();
            dists.sort_unstable_by(f64::total_cmp);
            dists[..k].iter().sum::<f64>() / k as f64
        })
        .collect())
}

fn knn_check(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if n <= k {
        return Err(Error::InvalidArgument(format!(
            "need more than k={k} primitives, have {n}"
        )));
    }
    Ok(())
}

/// Split the `ceil(densify_fraction * n)` spatially sparsest primitives
/// (largest kNN squared distance) into two co-located layers with the
/// relocation opacity/covariance rewrite. Both layers get fresh optimizer
/// state; the copy draws a fresh noise stream.
pub fn refine_sparse(
    scene: &mut Scene,
    state: &mut OptimizerState,
    densify_fraction: f64,
    knn_k: usize,
) -> Result<Vec<MutationRecord>> {
    if !(0.0..1.0).contains(&densify_fraction) {
        return Err(Error::InvalidArgument(format!(
            "densify fraction {densify_fraction} outside [0, 1)"
        )));
    }
    let n = scene.len();
    let m = ceil_fraction(densify_fraction, n);
    if m == 0 {
        return Ok(Vec::new());
    }
    let sparsity = knn_sparsity(scene, knn_k)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sparsity[b].total_cmp(&sparsity[a]).then(a.cmp(&b)));
    let mut selected = order[..m].to_vec();
    selected.sort_unstable();

    let mut log = Vec::with_capacity(m);
    for &i in &selected {
        let o_old = scene.primitives[i].opacity();
        let o_new = match relocation_opacity(o_old, 2) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let c = relocation_covariance_factor(o_old, o_new, 2)?;
        let shift = 0.5 * ln(c);
        {
            let p = &mut scene.primitives[i];
            p.raw_opacity = logit(o_new);
            p.log_scale += Vec3::splat(shift);
        }
        state.reset_primitive(i);

        let copy = scene.primitives[i];
        let new_id = scene.len() as u32;
        scene.primitives.push(copy);
        let stream = scene.fresh_stream();
        scene.streams.push(stream);
        state.push_fresh();
        log.push(MutationRecord::Split {
            id: i as u32,
            new_id,
        });
    }
    Ok(log)
}
