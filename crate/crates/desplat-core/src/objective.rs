//! Training loss and image-quality metrics.
//!
//! The training loss is `(1 - lambda) * L1 + lambda * D-SSIM` with
//! `D-SSIM = (1 - SSIM) / 2`. SSIM uses an 11x11 Gaussian window
//! (sigma 1.5) evaluated at valid positions only, so small constant images
//! match the closed-form luminance/contrast terms exactly.

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::math::{abs, exp, log10};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers for [0,1] images: (0.01)^2 and (0.03)^2.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub d_total_d_rgb: ImageBuf,
}

fn check_shapes(a: &ImageBuf, b: &ImageBuf) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::InvalidArgument(alloc::format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width,
            a.height,
            b.width,
            b.height
        )));
    }
    Ok(())
}

/// Normalized 1D Gaussian window weights.
fn window_weights() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, slot) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *slot = exp(-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
        sum += *slot;
    }
    for slot in w.iter_mut() {
        *slot /= sum;
    }
    w
}

struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    var_x: f64,
    var_y: f64,
    cov_xy: f64,
}

/// Weighted first and second moments of one 11x11 window position.
fn window_stats(
    a: &ImageBuf,
    b: &ImageBuf,
    w1d: &[f64; SSIM_WINDOW],
    x0: u32,
    y0: u32,
    ch: usize,
) -> WindowStats {
    let mut mu_x = 0.0;
    let mut mu_y = 0.0;
    let mut xx = 0.0;
    let mut yy = 0.0;
    let mut xy = 0.0;
    for (i, wi) in w1d.iter().enumerate() {
        for (j, wj) in w1d.iter().enumerate() {
            let w = wi * wj;
            let idx = a.idx(x0 + j as u32, y0 + i as u32) + ch;
            let xv = a.data[idx];
            let yv = b.data[idx];
            mu_x += w * xv;
            mu_y += w * yv;
            xx += w * xv * xv;
            yy += w * yv * yv;
            xy += w * xv * yv;
        }
    }
    WindowStats {
        mu_x,
        mu_y,
        var_x: xx - mu_x * mu_x,
        var_y: yy - mu_y * mu_y,
        cov_xy: xy - mu_x * mu_y,
    }
}

fn ssim_terms(s: &WindowStats) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * s.mu_x * s.mu_y + SSIM_C1;
    let a2 = 2.0 * s.cov_xy + SSIM_C2;
    let b1 = s.mu_x * s.mu_x + s.mu_y * s.mu_y + SSIM_C1;
    let b2 = s.var_x + s.var_y + SSIM_C2;
    (a1, a2, b1, b2)
}

/// Mean local SSIM over valid window positions of both images.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_shapes(a, b)?;
    let win = SSIM_WINDOW as u32;
    if a.width < win || a.height < win {
        return Err(Error::InvalidArgument(alloc::format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            a.width,
            a.height,
            SSIM_WINDOW,
            SSIM_WINDOW
        )));
    }
    let w1d = window_weights();
    let nx = a.width - win + 1;
    let ny = a.height - win + 1;
    let mut acc = 0.0;
    for y0 in 0..ny {
        for x0 in 0..nx {
            for ch in 0..3 {
                let s = window_stats(a, b, &w1d, x0, y0, ch);
                let (a1, a2, b1, b2) = ssim_terms(&s);
                acc += (a1 * a2) / (b1 * b2);
            }
        }
    }
    Ok(acc / (nx as f64 * ny as f64 * 3.0))
}

/// Peak signal-to-noise ratio in dB for [0,1] images; identical images
/// return the +infinity sentinel.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * log10(1.0 / mse))
}

/// Training loss with its exact gradient image.
///
/// `lambda_ssim = 0` skips the SSIM term entirely (and with it the minimum
/// image-size requirement).
pub fn compute_loss(
    rendered: &ImageBuf,
    target: &ImageBuf,
    lambda_ssim: f64,
) -> Result<LossReport> {
    check_shapes(rendered, target)?;
    let n = rendered.data.len() as f64;
    let mut grad = ImageBuf::new(rendered.width, rendered.height);

    // L1: mean absolute error, subgradient 0 at exact ties.
    let mut l1 = 0.0;
    let l1_weight = 1.0 - lambda_ssim;
    for (i, (r, t)) in rendered.data.iter().zip(target.data.iter()).enumerate() {
        let d = r - t;
        l1 += abs(d);
        if d > 0.0 {
            grad.data[i] = l1_weight / n;
        } else if d < 0.0 {
            grad.data[i] = -l1_weight / n;
        }
    }
    l1 /= n;

    let mut dssim = 0.0;
    if lambda_ssim != 0.0 {
        let win = SSIM_WINDOW as u32;
        if rendered.width < win || rendered.height < win {
            return Err(Error::InvalidArgument(alloc::format!(
                "image {}x{} smaller than the {}x{} SSIM window",
                rendered.width,
                rendered.height,
                SSIM_WINDOW,
                SSIM_WINDOW
            )));
        }
        let w1d = window_weights();
        let nx = rendered.width - win + 1;
        let ny = rendered.height - win + 1;
        let n_windows = nx as f64 * ny as f64 * 3.0;
        // d(D-SSIM)/dS = -1/2, spread over the window mean.
        let scale = lambda_ssim * (-0.5) / n_windows;

        let mut ssim_acc = 0.0;
        for y0 in 0..ny {
            for x0 in 0..nx {
                for ch in 0..3 {
                    let s = window_stats(rendered, target, &w1d, x0, y0, ch);
                    let (a1, a2, b1, b2) = ssim_terms(&s);
                    ssim_acc += (a1 * a2) / (b1 * b2);

                    // Partials of S with respect to window statistics,
                    // factored through lum = A1/B1 and con = A2/B2 so that
                    // identical images cancel to exactly zero gradient
                    // (anything else would let Adam amplify fp dust into
                    // full-size steps on a perfectly fitted scene).
                    let lum = a1 / b1;
                    let con = a2 / b2;
                    let d_mu_x = con * ((2.0 * s.mu_y) * b1 - (2.0 * s.mu_x) * a1) / (b1 * b1);
                    let d_var_x = -lum * con / b2;
                    let d_cov = lum * 2.0 / b2;

                    for (i, wi) in w1d.iter().enumerate() {
                        for (j, wj) in w1d.iter().enumerate() {
                            let w = wi * wj;
                            let idx = rendered.idx(x0 + j as u32, y0 + i as u32) + ch;
                            let xv = rendered.data[idx];
                            let yv = target.data[idx];
                            let ds_dx = d_mu_x * w
                                + d_var_x * 2.0 * w * (xv - s.mu_x)
                                + d_cov * w * (yv - s.mu_y);
                            grad.data[idx] += scale * ds_dx;
                        }
                    }
                }
            }
        }
        dssim = (1.0 - ssim_acc / n_windows) / 2.0;
    }

    let total = (1.0 - lambda_ssim) * l1 + lambda_ssim * dssim;
    Ok(LossReport {
        total,
        l1,
        dssim,
        d_total_d_rgb: grad,
    })
}

/// Summed-squared-error loss and its gradient `2 * (rendered - target)`;
/// the uncertainty accumulation uses this regardless of the training loss.
pub fn l2_sum_loss(rendered: &ImageBuf, target: &ImageBuf) -> Result<(f64, ImageBuf)> {
    check_shapes(rendered, target)?;
    let mut grad = ImageBuf::new(rendered.width, rendered.height);
    let mut loss = 0.0;
    for (i, (r, t)) in rendered.data.iter().zip(target.data.iter()).enumerate() {
        let d = r - t;
        loss += d * d;
        grad.data[i] = 2.0 * d;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn random_image(seed: u64, w: u32, h: u32, lo: f64, hi: f64) -> ImageBuf {
        let mut rng = StreamRng::new(seed, 55);
        let mut img = ImageBuf::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.next_range(lo, hi);
        }
        img
    }

    fn constant_image(w: u32, h: u32, v: f64) -> ImageBuf {
        let mut img = ImageBuf::new(w, h);
        img.data.iter_mut().for_each(|x| *x = v);
        img
    }

    #[test]
    fn perfect_fit_is_zero_loss_and_zero_gradient() {
        let img = random_image(1, 16, 16, 0.0, 1.0);
        let report = compute_loss(&img, &img.clone(), 0.2).unwrap();
        assert_eq!(report.total, 0.0);
        assert_eq!(report.l1, 0.0);
        assert!(report.dssim.abs() < 1e-15);
        assert!(report.d_total_d_rgb.data.iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn pure_l1_on_constant_offset() {
        let a = constant_image(16, 16, 0.75);
        let b = constant_image(16, 16, 0.25);
        let report = compute_loss(&a, &b, 0.0).unwrap();
        assert!((report.total - 0.5).abs() < 1e-15);
        assert!((report.l1 - 0.5).abs() < 1e-15);
        assert_eq!(report.dssim, 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = constant_image(16, 16, 0.5);
        let b = constant_image(16, 8, 0.5);
        assert!(matches!(
            compute_loss(&a, &b, 0.2),
            Err(Error::InvalidArgument(_))
        ));
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let rendered = random_image(2, 16, 16, 0.1, 0.9);
        let target = random_image(3, 16, 16, 0.1, 0.9);
        let h = 1e-6;
        for lambda in [0.0, 0.2, 1.0] {
            let report = compute_loss(&rendered, &target, lambda).unwrap();
            // Probe a spread of pixels rather than all 768.
            let mut rng = StreamRng::new(4, 1);
            for _ in 0..60 {
                let idx = rng.next_index(rendered.data.len());
                let mut plus = rendered.clone();
                plus.data[idx] += h;
                let mut minus = rendered.clone();
                minus.data[idx] -= h;
                let lp = compute_loss(&plus, &target, lambda).unwrap().total;
                let lm = compute_loss(&minus, &target, lambda).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                let a = report.d_total_d_rgb.data[idx];
                let rel = (a - fd).abs() / fd.abs().max(1e-6);
                assert!(
                    rel < 1e-3,
                    "lambda {lambda} idx {idx}: analytic {a} fd {fd} rel {rel:.2e}"
                );
            }
        }
    }

    #[test]
    fn total_is_convex_combination() {
        let rendered = random_image(5, 16, 16, 0.0, 1.0);
        let target = random_image(6, 16, 16, 0.0, 1.0);
        let r = compute_loss(&rendered, &target, 0.2).unwrap();
        assert!((r.total - (0.8 * r.l1 + 0.2 * r.dssim)).abs() < 1e-15);
    }

    #[test]
    fn psnr_known_values() {
        let a = constant_image(8, 8, 0.5);
        assert_eq!(psnr(&a, &a.clone()).unwrap(), f64::INFINITY);

        let b = constant_image(8, 8, 0.6);
        // MSE = 0.01 -> 20 dB.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);

        let x = random_image(7, 8, 8, 0.0, 1.0);
        let y = random_image(8, 8, 8, 0.0, 1.0);
        let mse: f64 = x
            .data
            .iter()
            .zip(y.data.iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / x.data.len() as f64;
        let direct = 10.0 * log10(1.0 / mse);
        assert!((psnr(&x, &y).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(9, 16, 16, 0.0, 1.0);
        assert!((ssim(&a, &a.clone()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_negative_for_inverted_high_contrast() {
        // Checkerboard vs its negative: structure anti-correlates.
        let mut a = ImageBuf::new(16, 16);
        for y in 0..16u32 {
            for x in 0..16u32 {
                let v = ((x + y) % 2) as f64;
                a.set(x, y, [v, v, v]);
            }
        }
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v = 1.0 - *v;
        }
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        // Zero variances: SSIM reduces to (2ab + C1) / (a^2 + b^2 + C1).
        let a = constant_image(12, 12, 0.4);
        let b = constant_image(12, 12, 0.5);
        let want = (2.0 * 0.4 * 0.5 + SSIM_C1) / (0.4 * 0.4 + 0.5 * 0.5 + SSIM_C1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        for seed in 0..5 {
            let a = random_image(100 + seed, 14, 14, 0.0, 1.0);
            let b = random_image(200 + seed, 14, 14, 0.0, 1.0);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = constant_image(10, 16, 0.5);
        assert!(matches!(
            ssim(&a, &a.clone()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn l2_sum_loss_and_gradient() {
        let a = random_image(10, 8, 8, 0.0, 1.0);
        let b = random_image(11, 8, 8, 0.0, 1.0);
        let (loss, grad) = l2_sum_loss(&a, &b).unwrap();
        let direct: f64 = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!((loss - direct).abs() < 1e-12);
        for (i, g) in grad.data.iter().enumerate() {
            assert!((g - 2.0 * (a.data[i] - b.data[i])).abs() < 1e-15);
        }
    }
}
