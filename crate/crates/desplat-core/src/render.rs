//! Software splatting renderer: perspective projection, EWA covariance
//! projection, front-to-back alpha compositing, and the analytic backward
//! pass producing per-primitive gradients of any per-pixel loss.
//!
//! The pixel loops are generic over [`Real`] so the f64 reference path and
//! the optional f32 fast path share one implementation. Images are split
//! into fixed-height row bands (see [`crate::exec`]); per-primitive gradient
//! accumulation happens per band and bands are reduced in index order, so
//! results are independent of how bands are scheduled.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::exec::{band_count, band_rows, Executor, Sequential};
use crate::gaussian::rotmat_from_quat;
use crate::img::ImageBuf;
use crate::math::{ceil, floor, ln, Mat3, Quat, Real, Sym2, Vec3};
use crate::scene::Scene;
use alloc::vec;
use alloc::vec::Vec;

/// Points at or behind this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Low-pass floor added to the projected covariance diagonal (px^2).
pub const COV_FLOOR_PX2: f64 = 0.3;
/// Upper clamp on per-contribution alpha.
pub const ALPHA_CLAMP: f64 = 0.999;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing at a pixel stops once transmittance falls below this.
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
/// Splat bounding-box radius in units of the largest 2D standard deviation.
pub const BBOX_RADIUS_SIGMAS: f64 = 3.0;

/// One composited contribution at a pixel: which primitive, at what alpha.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendRecord {
    pub primitive: u32,
    pub alpha: f64,
}

/// Forward-pass output with everything the backward pass needs to replay
/// compositing in reverse.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: ImageBuf,
    /// Per-pixel product of (1 - alpha_i) over composited contributions.
    pub final_transmittance: Vec<f64>,
    /// CSR offsets into `blend_records`, length `pixel_count + 1`.
    pub blend_offsets: Vec<u32>,
    pub blend_records: Vec<BlendRecord>,
}

impl RenderOutput {
    pub fn width(&self) -> u32 {
        self.rgb.width
    }

    pub fn height(&self) -> u32 {
        self.rgb.height
    }

    /// Blend records of one pixel, front to back.
    pub fn pixel_records(&self, pixel: usize) -> &[BlendRecord] {
        let lo = self.blend_offsets[pixel] as usize;
        let hi = self.blend_offsets[pixel + 1] as usize;
        &self.blend_records[lo..hi]
    }
}

/// Gradient of a scalar loss with respect to one primitive's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveGrads {
    pub d_mean: Vec3,
    pub d_log_scale: Vec3,
    pub d_rotation: Quat,
    pub d_raw_opacity: f64,
    pub d_color: Vec3,
}

impl PrimitiveGrads {
    pub fn zero() -> Self {
        Self {
            d_mean: Vec3::zero(),
            d_log_scale: Vec3::zero(),
            d_rotation: Quat::zero(),
            d_raw_opacity: 0.0,
            d_color: Vec3::zero(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_mean.is_finite()
            && self.d_log_scale.is_finite()
            && self.d_rotation.is_finite()
            && self.d_raw_opacity.is_finite()
            && self.d_color.is_finite()
    }
}

/// Pinhole projection of a world point: pixel coordinates plus camera-space
/// depth. Depth <= [`NEAR_PLANE`] flags a point the renderer will cull.
pub fn project_point(camera: &Camera, mean: Vec3) -> ([f64; 2], f64) {
    let p = camera.world_to_cam(mean);
    let u = camera.focal[0] * p.x / p.z + camera.principal_point[0];
    let v = camera.focal[1] * p.y / p.z + camera.principal_point[1];
    ([u, v], p.z)
}

/// Jacobian of [`project_point`]'s pixel coordinates with respect to the
/// world-space mean (2x3, row major).
pub fn projection_jacobian(camera: &Camera, mean: Vec3) -> [[f64; 3]; 2] {
    let p = camera.world_to_cam(mean);
    let j_cam = proj_jacobian_cam(camera.focal[0], camera.focal[1], p);
    // Chain through p = W * mean + t.
    let mut out = [[0.0; 3]; 2];
    for (r, row) in j_cam.iter().enumerate() {
        for c in 0..3 {
            out[r][c] =
                row[0] * camera.rotation.m[0][c] + row[1] * camera.rotation.m[1][c] + row[2] * camera.rotation.m[2][c];
        }
    }
    out
}

/// d(uv)/d(p_cam) at a camera-space point.
#[inline]
fn proj_jacobian_cam<T: Real>(fx: T, fy: T, p: Vec3<T>) -> [[T; 3]; 2] {
    let inv_z = T::ONE / p.z;
    let inv_z2 = inv_z * inv_z;
    [
        [fx * inv_z, T::ZERO, -fx * p.x * inv_z2],
        [T::ZERO, fy * inv_z, -fy * p.y * inv_z2],
    ]
}

/// EWA projection of a world covariance to the 2x2 screen covariance
/// `J W Sigma W^T J^T` plus the low-pass floor. `None` when the mean is
/// behind the near plane or the result is degenerate; the renderer skips
/// such primitives for the view.
pub fn project_covariance(camera: &Camera, mean: Vec3, sigma: &Mat3) -> Option<Sym2> {
    let p = camera.world_to_cam(mean);
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let j = proj_jacobian_cam(camera.focal[0], camera.focal[1], p);
    let m = mat23_mul_mat3(&j, &camera.rotation);
    let cov = project_cov_from_m(&m, sigma);
    if cov.is_finite() && cov.a > 0.0 && cov.c > 0.0 && cov.det() > 0.0 {
        Some(cov)
    } else {
        None
    }
}

/// Rows of `a (2x3) * b (3x3)`.
#[inline]
fn mat23_mul_mat3<T: Real>(a: &[[T; 3]; 2], b: &Mat3<T>) -> [[T; 3]; 2] {
    let mut out = [[T::ZERO; 3]; 2];
    for (r, row) in a.iter().enumerate() {
        for c in 0..3 {
            out[r][c] = row[0] * b.m[0][c] + row[1] * b.m[1][c] + row[2] * b.m[2][c];
        }
    }
    out
}

/// `M Sigma M^T + floor*I` for a 2x3 `M`.
#[inline]
fn project_cov_from_m<T: Real>(m: &[[T; 3]; 2], sigma: &Mat3<T>) -> Sym2<T> {
    // tmp = M * Sigma (2x3)
    let mut tmp = [[T::ZERO; 3]; 2];
    for (r, row) in m.iter().enumerate() {
        for c in 0..3 {
            tmp[r][c] =
                row[0] * sigma.m[0][c] + row[1] * sigma.m[1][c] + row[2] * sigma.m[2][c];
        }
    }
    let dot = |a: &[T; 3], b: &[T; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let floor_px = T::from_f64(COV_FLOOR_PX2);
    Sym2::new(
        dot(&tmp[0], &m[0]) + floor_px,
        dot(&tmp[0], &m[1]),
        dot(&tmp[1], &m[1]) + floor_px,
    )
}

/// Per-view, per-primitive working data shared by forward and backward.
struct Prep<T> {
    prim: u32,
    depth: T,
    uv: [T; 2],
    inv_cov: Sym2<T>,
    opacity: T,
    color: [T; 3],
    /// Mahalanobis-squared bound above which alpha < ALPHA_MIN (with margin).
    e_max: T,
    // Pixel bounding box [x0, x1) x [y0, y1).
    x0: u32,
    x1: u32,
    y0: u32,
    y1: u32,
    // Extras for the backward chain.
    p_cam: Vec3<T>,
    rot: Mat3<T>,
    /// Squared scales exp(2*log_scale) (diagonal of S S^T in local frame).
    var: Vec3<T>,
    q_hat: Quat<T>,
    q_norm: T,
}

fn to_real<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

fn vec3_to<T: Real>(v: Vec3) -> Vec3<T> {
    Vec3::new(to_real(v.x), to_real(v.y), to_real(v.z))
}

fn mat3_to<T: Real>(m: &Mat3) -> Mat3<T> {
    let mut out = Mat3::<T>::zero();
    for i in 0..3 {
        for j in 0..3 {
            out.m[i][j] = to_real(m.m[i][j]);
        }
    }
    out
}

/// Project every primitive, cull, and depth-sort (ties by primitive index,
/// keeping renders bitwise reproducible).
fn prepare<T: Real>(scene: &Scene, camera: &Camera) -> Vec<Prep<T>> {
    let rot_w: Mat3<T> = mat3_to(&camera.rotation);
    let trans: Vec3<T> = vec3_to(camera.translation);
    let fx: T = to_real(camera.focal[0]);
    let fy: T = to_real(camera.focal[1]);
    let cx: T = to_real(camera.principal_point[0]);
    let cy: T = to_real(camera.principal_point[1]);
    let width = camera.width();
    let height = camera.height();
    let near: T = to_real(NEAR_PLANE);
    let alpha_min: T = to_real(ALPHA_MIN);

    let mut preps: Vec<Prep<T>> = Vec::with_capacity(scene.len());
    for (i, prim) in scene.primitives.iter().enumerate() {
        let q: Quat<T> = Quat::new(
            to_real(prim.rotation.w),
            to_real(prim.rotation.x),
            to_real(prim.rotation.y),
            to_real(prim.rotation.z),
        );
        let q_norm2 = q.norm_squared();
        if !(q_norm2.to_f64() > 0.0) || !q_norm2.is_finite() {
            continue;
        }
        let opacity: T = {
            let o = prim.opacity();
            to_real(o)
        };
        if !(opacity > alpha_min) {
            // Every per-pixel alpha is <= opacity, so nothing would pass the
            // skip threshold anyway.
            continue;
        }
        let p_cam = rot_w.mul_vec(vec3_to(prim.mean)) + trans;
        if !(p_cam.z > near) || !p_cam.is_finite() {
            continue;
        }
        let inv_z = T::ONE / p_cam.z;
        let uv = [fx * p_cam.x * inv_z + cx, fy * p_cam.y * inv_z + cy];

        let rot = match rotmat_from_quat(q) {
            Some(r) => r,
            None => continue,
        };
        let two = T::from_f64(2.0);
        let var = Vec3::new(
            (two * to_real::<T>(prim.log_scale.x)).exp(),
            (two * to_real::<T>(prim.log_scale.y)).exp(),
            (two * to_real::<T>(prim.log_scale.z)).exp(),
        );
        let sigma = crate::math::sym_rdr(&rot, var);

        let j = proj_jacobian_cam(fx, fy, p_cam);
        let m = mat23_mul_mat3(&j, &rot_w);
        let cov2 = project_cov_from_m(&m, &sigma);
        if !(cov2.is_finite() && cov2.a > T::ZERO && cov2.c > T::ZERO && cov2.det() > T::ZERO) {
            continue;
        }

        let radius = T::from_f64(BBOX_RADIUS_SIGMAS) * cov2.eig_max().sqrt();
        let u = uv[0].to_f64();
        let v = uv[1].to_f64();
        let r = radius.to_f64();
        if !(u.is_finite() && v.is_finite() && r.is_finite()) {
            continue;
        }
        let x0 = floor(u - r).max(0.0) as u32;
        let x1 = (ceil(u + r).max(0.0) as u32).min(width);
        let y0 = floor(v - r).max(0.0) as u32;
        let y1 = (ceil(v + r).max(0.0) as u32).min(height);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }

        // alpha < ALPHA_MIN  <=>  e > 2 ln(opacity / ALPHA_MIN); small margin
        // keeps this a conservative pre-test, the exact alpha test decides.
        let e_max = to_real::<T>(2.0 * ln(opacity.to_f64() / ALPHA_MIN) + 1e-9);

        preps.push(Prep {
            prim: i as u32,
            depth: p_cam.z,
            uv,
            inv_cov: cov2.inverse(),
            opacity,
            color: [
                to_real(prim.color.x),
                to_real(prim.color.y),
                to_real(prim.color.z),
            ],
            e_max,
            x0,
            x1,
            y0,
            y1,
            p_cam,
            rot,
            var,
            q_hat: q.scaled(T::ONE / q_norm2.sqrt()),
            q_norm: q_norm2.sqrt(),
        });
    }

    preps.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.prim.cmp(&b.prim))
    });
    preps
}

/// Per-row lists of prep indices (depth order preserved within each row).
fn row_lists<T: Real>(preps: &[Prep<T>], height: u32) -> (Vec<u32>, Vec<u32>) {
    let mut counts = vec![0u32; height as usize + 1];
    for p in preps {
        for y in p.y0..p.y1 {
            counts[y as usize + 1] += 1;
        }
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let offsets = counts.clone();
    let mut cursor = offsets.clone();
    let mut ids = vec![0u32; *offsets.last().unwrap() as usize];
    for (pi, p) in preps.iter().enumerate() {
        for y in p.y0..p.y1 {
            let slot = cursor[y as usize];
            ids[slot as usize] = pi as u32;
            cursor[y as usize] += 1;
        }
    }
    (offsets, ids)
}

struct ForwardBand<T> {
    rgb: Vec<T>,
    transmittance: Vec<T>,
    counts: Vec<u32>,
    records: Vec<(u32, T)>,
}

#[allow(clippy::too_many_arguments)]
fn forward_band<T: Real>(
    preps: &[Prep<T>],
    row_offsets: &[u32],
    row_ids: &[u32],
    width: u32,
    background: [T; 3],
    y0: u32,
    y1: u32,
) -> ForwardBand<T> {
    let px_count = (y1 - y0) as usize * width as usize;
    let mut rgb = vec![T::ZERO; px_count * 3];
    let mut transmittance = vec![T::ONE; px_count];
    let mut counts = vec![0u32; px_count];
    let mut records: Vec<(u32, T)> = Vec::new();

    let half = T::from_f64(0.5);
    let alpha_clamp = T::from_f64(ALPHA_CLAMP);
    let alpha_min = T::from_f64(ALPHA_MIN);
    let t_stop = T::from_f64(TRANSMITTANCE_STOP);

    for y in y0..y1 {
        let ids = &row_ids[row_offsets[y as usize] as usize..row_offsets[y as usize + 1] as usize];
        let py = T::from_f64(y as f64 + 0.5);
        for x in 0..width {
            let px = T::from_f64(x as f64 + 0.5);
            let pix = (y - y0) as usize * width as usize + x as usize;
            let mut t_cur = T::ONE;
            let mut acc = [T::ZERO; 3];
            for &pi in ids {
                let p = &preps[pi as usize];
                if x < p.x0 || x >= p.x1 {
                    continue;
                }
                let d = [px - p.uv[0], py - p.uv[1]];
                let e = p.inv_cov.quadform(d);
                if e > p.e_max {
                    continue;
                }
                let g = (-half * e).exp();
                let alpha = (p.opacity * g).min(alpha_clamp);
                if alpha < alpha_min {
                    continue;
                }
                let w = t_cur * alpha;
                acc[0] += w * p.color[0];
                acc[1] += w * p.color[1];
                acc[2] += w * p.color[2];
                records.push((pi, alpha));
                counts[pix] += 1;
                t_cur = t_cur * (T::ONE - alpha);
                if t_cur < t_stop {
                    break;
                }
            }
            acc[0] += t_cur * background[0];
            acc[1] += t_cur * background[1];
            acc[2] += t_cur * background[2];
            rgb[pix * 3] = acc[0];
            rgb[pix * 3 + 1] = acc[1];
            rgb[pix * 3 + 2] = acc[2];
            transmittance[pix] = t_cur;
        }
    }

    ForwardBand {
        rgb,
        transmittance,
        counts,
        records,
    }
}

struct RawRender<T> {
    rgb: Vec<T>,
    transmittance: Vec<T>,
    offsets: Vec<u32>,
    /// (prep index, alpha) per contribution, pixel major.
    records: Vec<(u32, T)>,
}

fn render_raw<T: Real, E: Executor>(
    exec: &E,
    preps: &[Prep<T>],
    camera: &Camera,
    background: [T; 3],
) -> RawRender<T> {
    let width = camera.width();
    let height = camera.height();
    let (row_offsets, row_ids) = row_lists(preps, height);
    let bands = band_count(height);
    let results = exec.map_bands(bands, |b| {
        let (y0, y1) = band_rows(b, height);
        forward_band(preps, &row_offsets, &row_ids, width, background, y0, y1)
    });

    let px_total = camera.pixel_count();
    let mut rgb = Vec::with_capacity(px_total * 3);
    let mut transmittance = Vec::with_capacity(px_total);
    let mut offsets = Vec::with_capacity(px_total + 1);
    offsets.push(0u32);
    let total_records: usize = results.iter().map(|r| r.records.len()).sum();
    let mut records = Vec::with_capacity(total_records);
    for band in results {
        rgb.extend_from_slice(&band.rgb);
        transmittance.extend_from_slice(&band.transmittance);
        for c in band.counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        records.extend_from_slice(&band.records);
    }

    RawRender {
        rgb,
        transmittance,
        offsets,
        records,
    }
}

/// Render with an explicit band executor.
pub fn render_with<E: Executor>(
    exec: &E,
    scene: &Scene,
    camera: &Camera,
    background: Vec3,
) -> RenderOutput {
    let preps = prepare::<f64>(scene, camera);
    let raw = render_raw(
        exec,
        &preps,
        camera,
        [background.x, background.y, background.z],
    );
    let blend_records = raw
        .records
        .iter()
        .map(|&(pi, alpha)| BlendRecord {
            primitive: preps[pi as usize].prim,
            alpha,
        })
        .collect();
    RenderOutput {
        rgb: ImageBuf::from_data(camera.width(), camera.height(), raw.rgb),
        final_transmittance: raw.transmittance,
        blend_offsets: raw.offsets,
        blend_records,
    }
}

/// Render front to back against a constant background.
pub fn render(scene: &Scene, camera: &Camera, background: Vec3) -> RenderOutput {
    render_with(&Sequential, scene, camera, background)
}

/// Per-prep accumulator for the screen-space half of the backward pass.
#[derive(Clone, Copy)]
struct ScreenGrads<T> {
    d_uv: [T; 2],
    /// dL/d(Sigma2d) as (a, b, c) of the symmetric matrix.
    d_cov: [T; 3],
    /// dL/d(opacity), before the logit chain.
    d_opacity: T,
    d_color: [T; 3],
}

impl<T: Real> ScreenGrads<T> {
    fn zero() -> Self {
        Self {
            d_uv: [T::ZERO; 2],
            d_cov: [T::ZERO; 3],
            d_opacity: T::ZERO,
            d_color: [T::ZERO; 3],
        }
    }

    fn add(&mut self, o: &Self) {
        self.d_uv[0] += o.d_uv[0];
        self.d_uv[1] += o.d_uv[1];
        for k in 0..3 {
            self.d_cov[k] += o.d_cov[k];
            self.d_color[k] += o.d_color[k];
        }
        self.d_opacity += o.d_opacity;
    }
}

/// Reverse compositing over one band's pixels. Walks each pixel's records
/// back to front, reconstructing the running transmittance by division.
#[allow(clippy::too_many_arguments)]
fn backward_band<T: Real>(
    preps: &[Prep<T>],
    prim_to_prep: &[u32],
    raw_offsets: &[u32],
    raw_records: &[(u32, T)],
    transmittance: &[T],
    cot: &[T],
    background: [T; 3],
    width: u32,
    y0: u32,
    y1: u32,
) -> Vec<ScreenGrads<T>> {
    let mut acc = vec![ScreenGrads::zero(); preps.len()];
    let half = T::from_f64(0.5);
    let alpha_clamp = T::from_f64(ALPHA_CLAMP);

    for y in y0..y1 {
        let py = T::from_f64(y as f64 + 0.5);
        for x in 0..width {
            let pix = y as usize * width as usize + x as usize;
            let lo = raw_offsets[pix] as usize;
            let hi = raw_offsets[pix + 1] as usize;
            if lo == hi {
                continue;
            }
            let px = T::from_f64(x as f64 + 0.5);
            let cot_px = [cot[pix * 3], cot[pix * 3 + 1], cot[pix * 3 + 2]];

            let t_fin = transmittance[pix];
            // Sum over later contributions of w_m * (c_m . cot), plus the
            // background term, both of which scale with 1/(1 - alpha_k).
            let mut later = t_fin
                * (background[0] * cot_px[0]
                    + background[1] * cot_px[1]
                    + background[2] * cot_px[2]);
            let mut t_after = t_fin;

            for rec in raw_records[lo..hi].iter().rev() {
                let (pi, alpha) = (rec.0, rec.1);
                let p = &preps[pi as usize];
                let one_minus = T::ONE - alpha;
                let t_before = t_after / one_minus;
                let w = t_before * alpha;
                let color_dot = p.color[0] * cot_px[0]
                    + p.color[1] * cot_px[1]
                    + p.color[2] * cot_px[2];

                let slot = &mut acc[prim_to_prep[p.prim as usize] as usize];
                slot.d_color[0] += w * cot_px[0];
                slot.d_color[1] += w * cot_px[1];
                slot.d_color[2] += w * cot_px[2];

                let d_alpha = t_before * color_dot - later / one_minus;

                if alpha < alpha_clamp {
                    // alpha = opacity * g; both factors get gradient.
                    let d = [px - p.uv[0], py - p.uv[1]];
                    let e = p.inv_cov.quadform(d);
                    let g = (-half * e).exp();
                    let d_g = d_alpha * p.opacity;
                    slot.d_opacity += d_alpha * g;

                    let b = p.inv_cov.mul_vec(d);
                    let gg = d_g * g;
                    slot.d_uv[0] += gg * b[0];
                    slot.d_uv[1] += gg * b[1];
                    // dL/dSigma2d = 0.5 * g * dL/dg * b b^T, in the matrix
                    // convention where all four entries are independent (the
                    // downstream chains use the same convention).
                    let hg = half * gg;
                    slot.d_cov[0] += hg * b[0] * b[0];
                    slot.d_cov[1] += hg * b[0] * b[1];
                    slot.d_cov[2] += hg * b[1] * b[1];
                }

                later += w * color_dot;
                t_after = t_before;
            }
        }
    }
    acc
}

/// Map one prep's accumulated screen gradients back to primitive parameters.
fn chain_to_params<T: Real>(
    camera_rot: &Mat3<T>,
    fx: T,
    fy: T,
    p: &Prep<T>,
    sg: &ScreenGrads<T>,
) -> PrimitiveGrads {
    let two = T::from_f64(2.0);

    // Recompute the projection pieces at the primitive.
    let j = proj_jacobian_cam(fx, fy, p.p_cam);
    let m = mat23_mul_mat3(&j, camera_rot);
    let sigma = crate::math::sym_rdr(&p.rot, p.var);

    // G2 = dL/dSigma2d as a symmetric 2x2.
    let g2 = [[sg.d_cov[0], sg.d_cov[1]], [sg.d_cov[1], sg.d_cov[2]]];

    // dSigma = M^T G2 M (3x3, symmetric).
    let mut d_sigma = Mat3::<T>::zero();
    for i in 0..3 {
        for k in 0..3 {
            let mut s = T::ZERO;
            for a in 0..2 {
                for b in 0..2 {
                    s += m[a][i] * g2[a][b] * m[b][k];
                }
            }
            d_sigma.m[i][k] = s;
        }
    }

    // dM = 2 G2 M Sigma.
    let mut m_sigma = [[T::ZERO; 3]; 2];
    for (r, row) in m.iter().enumerate() {
        for c in 0..3 {
            m_sigma[r][c] =
                row[0] * sigma.m[0][c] + row[1] * sigma.m[1][c] + row[2] * sigma.m[2][c];
        }
    }
    let mut d_m = [[T::ZERO; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_m[r][c] = two * (g2[r][0] * m_sigma[0][c] + g2[r][1] * m_sigma[1][c]);
        }
    }

    // dJ = dM W^T.
    let mut d_j = [[T::ZERO; 3]; 2];
    for (r, row) in d_m.iter().enumerate() {
        for c in 0..3 {
            d_j[r][c] = row[0] * camera_rot.m[c][0]
                + row[1] * camera_rot.m[c][1]
                + row[2] * camera_rot.m[c][2];
        }
    }

    // dL/dp_cam: through uv and through J's dependence on p_cam.
    let inv_z = T::ONE / p.p_cam.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let mut d_p = Vec3::new(
        j[0][0] * sg.d_uv[0] + j[1][0] * sg.d_uv[1],
        j[0][1] * sg.d_uv[0] + j[1][1] * sg.d_uv[1],
        j[0][2] * sg.d_uv[0] + j[1][2] * sg.d_uv[1],
    );
    d_p.x += d_j[0][2] * (-fx * inv_z2);
    d_p.y += d_j[1][2] * (-fy * inv_z2);
    d_p.z += d_j[0][0] * (-fx * inv_z2)
        + d_j[1][1] * (-fy * inv_z2)
        + d_j[0][2] * (two * fx * p.p_cam.x * inv_z3)
        + d_j[1][2] * (two * fy * p.p_cam.y * inv_z3);

    let d_mean = camera_rot.tr_mul_vec(d_p);

    // Scale chain: Sigma = R D R^T with D = diag(var), var_k = exp(2 l_k).
    let rt_ds_r = p.rot.transpose().mul_mat(&d_sigma).mul_mat(&p.rot);
    let d_log_scale = Vec3::new(
        rt_ds_r.m[0][0] * two * p.var.x,
        rt_ds_r.m[1][1] * two * p.var.y,
        rt_ds_r.m[2][2] * two * p.var.z,
    );

    // Rotation chain: dR = 2 dSigma R D, then quaternion derivative matrices.
    let d_r = d_sigma.mul_mat(&p.rot.mul_diag(p.var)).scaled(two);
    let q = p.q_hat;
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    let zero = T::ZERO;
    let dr_dw = Mat3::from_rows([
        [zero, -two * z, two * y],
        [two * z, zero, -two * x],
        [-two * y, two * x, zero],
    ]);
    let dr_dx = Mat3::from_rows([
        [zero, two * y, two * z],
        [two * y, -two * two * x, -two * w],
        [two * z, two * w, -two * two * x],
    ]);
    let dr_dy = Mat3::from_rows([
        [-two * two * y, two * x, two * w],
        [two * x, zero, two * z],
        [-two * w, two * z, -two * two * y],
    ]);
    let dr_dz = Mat3::from_rows([
        [-two * two * z, -two * w, two * x],
        [two * w, -two * two * z, two * y],
        [two * x, two * y, zero],
    ]);
    let d_qhat = Quat::new(
        d_r.frobenius_dot(&dr_dw),
        d_r.frobenius_dot(&dr_dx),
        d_r.frobenius_dot(&dr_dy),
        d_r.frobenius_dot(&dr_dz),
    );
    // Through normalization q_hat = q / |q|.
    let dot = q.w * d_qhat.w + q.x * d_qhat.x + q.y * d_qhat.y + q.z * d_qhat.z;
    let inv_n = T::ONE / p.q_norm;
    let d_rotation = Quat::new(
        (d_qhat.w - q.w * dot) * inv_n,
        (d_qhat.x - q.x * dot) * inv_n,
        (d_qhat.y - q.y * dot) * inv_n,
        (d_qhat.z - q.z * dot) * inv_n,
    );

    // Opacity logit chain.
    let d_raw_opacity = sg.d_opacity * p.opacity * (T::ONE - p.opacity);

    PrimitiveGrads {
        d_mean: Vec3::new(d_mean.x.to_f64(), d_mean.y.to_f64(), d_mean.z.to_f64()),
        d_log_scale: Vec3::new(
            d_log_scale.x.to_f64(),
            d_log_scale.y.to_f64(),
            d_log_scale.z.to_f64(),
        ),
        d_rotation: Quat::new(
            d_rotation.w.to_f64(),
            d_rotation.x.to_f64(),
            d_rotation.y.to_f64(),
            d_rotation.z.to_f64(),
        ),
        d_raw_opacity: d_raw_opacity.to_f64(),
        d_color: Vec3::new(
            sg.d_color[0].to_f64(),
            sg.d_color[1].to_f64(),
            sg.d_color[2].to_f64(),
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_raw<T: Real, E: Executor>(
    exec: &E,
    preps: &[Prep<T>],
    camera: &Camera,
    n_primitives: usize,
    raw_offsets: &[u32],
    raw_records: &[(u32, T)],
    transmittance: &[T],
    cot: &[T],
    background: [T; 3],
) -> Vec<PrimitiveGrads> {
    let width = camera.width();
    let height = camera.height();
    let mut prim_to_prep = vec![u32::MAX; n_primitives];
    for (pi, p) in preps.iter().enumerate() {
        prim_to_prep[p.prim as usize] = pi as u32;
    }

    let bands = band_count(height);
    let band_accums = exec.map_bands(bands, |b| {
        let (y0, y1) = band_rows(b, height);
        backward_band(
            preps,
            &prim_to_prep,
            raw_offsets,
            raw_records,
            transmittance,
            cot,
            background,
            width,
            y0,
            y1,
        )
    });

    // Reduce in band order: the summation order is a constant of the image
    // layout, never of the executor.
    let mut total: Vec<ScreenGrads<T>> = vec![ScreenGrads::zero(); preps.len()];
    for band in &band_accums {
        for (slot, add) in total.iter_mut().zip(band.iter()) {
            slot.add(add);
        }
    }

    let camera_rot: Mat3<T> = mat3_to(&camera.rotation);
    let fx: T = to_real(camera.focal[0]);
    let fy: T = to_real(camera.focal[1]);

    let mut grads = vec![PrimitiveGrads::zero(); n_primitives];
    for (pi, p) in preps.iter().enumerate() {
        grads[p.prim as usize] = chain_to_params(&camera_rot, fx, fy, p, &total[pi]);
    }
    grads
}

/// Analytic gradients of `sum(d_loss_d_rgb * rgb)` with respect to every
/// primitive parameter, replayed from the recorded blend state.
pub fn backward_with<E: Executor>(
    exec: &E,
    scene: &Scene,
    camera: &Camera,
    output: &RenderOutput,
    d_loss_d_rgb: &ImageBuf,
    background: Vec3,
) -> Result<Vec<PrimitiveGrads>> {
    if output.width() != camera.width() || output.height() != camera.height() {
        return Err(Error::InvalidArgument(
            "render output does not match camera resolution".into(),
        ));
    }
    if d_loss_d_rgb.width != output.width() || d_loss_d_rgb.height != output.height() {
        return Err(Error::InvalidArgument(
            "loss gradient image does not match render resolution".into(),
        ));
    }

    let preps = prepare::<f64>(scene, camera);
    // Records store primitive ids; rebuild prep-index records for replay.
    let mut prim_to_prep = vec![u32::MAX; scene.len()];
    for (pi, p) in preps.iter().enumerate() {
        prim_to_prep[p.prim as usize] = pi as u32;
    }
    let records: Vec<(u32, f64)> = output
        .blend_records
        .iter()
        .map(|r| (prim_to_prep[r.primitive as usize], r.alpha))
        .collect();
    if records.iter().any(|&(pi, _)| pi == u32::MAX) {
        return Err(Error::InvalidArgument(
            "blend records reference primitives the scene no longer projects".into(),
        ));
    }

    Ok(backward_raw(
        exec,
        &preps,
        camera,
        scene.len(),
        &output.blend_offsets,
        &records,
        &output.final_transmittance,
        &d_loss_d_rgb.data,
        [background.x, background.y, background.z],
    ))
}

/// Sequential [`backward_with`].
pub fn backward(
    scene: &Scene,
    camera: &Camera,
    output: &RenderOutput,
    d_loss_d_rgb: &ImageBuf,
    background: Vec3,
) -> Result<Vec<PrimitiveGrads>> {
    backward_with(&Sequential, scene, camera, output, d_loss_d_rgb, background)
}

/// f32 fast path: forward and backward in single precision, same algorithm.
/// Gradients are returned widened to f64 for comparison against the
/// reference path.
pub fn render_gradients_f32(
    scene: &Scene,
    camera: &Camera,
    background: Vec3,
    d_loss_d_rgb: &ImageBuf,
) -> Result<Vec<PrimitiveGrads>> {
    if d_loss_d_rgb.width != camera.width() || d_loss_d_rgb.height != camera.height() {
        return Err(Error::InvalidArgument(
            "loss gradient image does not match camera resolution".into(),
        ));
    }
    let preps = prepare::<f32>(scene, camera);
    let bg = [
        background.x as f32,
        background.y as f32,
        background.z as f32,
    ];
    let raw = render_raw(&Sequential, &preps, camera, bg);
    let cot: Vec<f32> = d_loss_d_rgb.data.iter().map(|&v| v as f32).collect();
    Ok(backward_raw(
        &Sequential,
        &preps,
        camera,
        scene.len(),
        &raw.offsets,
        &raw.records,
        &raw.transmittance,
        &cot,
        bg,
    ))
}
