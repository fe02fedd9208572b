use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Shape, Tensor};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Luma plane `0.299 R + 0.587 G + 0.114 B` of every image in the batch.
pub fn luma(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.c() != 3 {
        return shape_err("luma", format!("expected 3 channels, got C={}", s.c()));
    }
    let mut out = Tensor::zeros(s.with_c(1));
    for n in 0..s.n() {
        let (r, g, b) = (x.plane(n, 0), x.plane(n, 1), x.plane(n, 2));
        for (i, y) in out.plane_mut(n, 0).iter_mut().enumerate() {
            *y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
        }
    }
    Ok(out)
}

fn pair_luma(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(Tensor, Tensor)> {
    a.expect_same_shape(b, op)?;
    Ok((luma(a)?, luma(b)?))
}

/// Mean PSNR (dB, peak 1.0) of the luma channel over the batch.
/// Identical images give `f64::INFINITY`.
pub fn psnr_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ya, yb) = pair_luma(a, b, "psnr_y")?;
    let s = ya.shape();
    let mut total = 0.0;
    for n in 0..s.n() {
        let mse = ya
            .plane(n, 0)
            .iter()
            .zip(yb.plane(n, 0))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / s.plane() as f64;
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += 10.0 * (1.0 / mse).log10();
    }
    Ok(total / s.n() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" Gaussian filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|j| g[j] * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

fn ssim_term(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64) -> f64 {
    let (c1, c2) = ((K1 * 1.0f64).powi(2), (K2 * 1.0f64).powi(2));
    ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
}

fn check_ssim_size(s: Shape) -> Result<()> {
    if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
        return arg_err(
            "ssim_y",
            format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}", s.h(), s.w()),
        );
    }
    Ok(())
}

/// Mean SSIM of the luma channel over all valid 11x11 Gaussian windows
/// (sigma 1.5, K1 0.01, K2 0.03, data range 1), averaged over the batch.
pub fn ssim_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ya, yb) = pair_luma(a, b, "ssim_y")?;
    let s = ya.shape();
    check_ssim_size(s)?;
    let g = gaussian_window();
    let (h, w) = (s.h(), s.w());
    let mut total = 0.0;
    for n in 0..s.n() {
        let (pa, pb) = (ya.plane(n, 0), yb.plane(n, 0));
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(&p, &q)| f(p, q)).collect() };
        let mx = filter_valid(pa, h, w, &g);
        let my = filter_valid(pb, h, w, &g);
        let exx = filter_valid(&prod(&|p, _| p * p), h, w, &g);
        let eyy = filter_valid(&prod(&|_, q| q * q), h, w, &g);
        let exy = filter_valid(&prod(&|p, q| p * q), h, w, &g);
        let sum: f64 = (0..mx.len())
            .map(|i| {
                ssim_term(
                    mx[i],
                    my[i],
                    exx[i] - mx[i] * mx[i],
                    eyy[i] - my[i] * my[i],
                    exy[i] - mx[i] * my[i],
                )
            })
            .sum();
        total += sum / mx.len() as f64;
    }
    Ok(total / s.n() as f64)
}

/// Direct per-window SSIM: explicit 2D weights, two-pass moments.
/// Slow; kept as an independent check of [`ssim_y`].
pub fn ssim_y_reference(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ya, yb) = pair_luma(a, b, "ssim_y")?;
    let s = ya.shape();
    check_ssim_size(s)?;
    let k = SSIM_WINDOW;
    let c = (k / 2) as f64;
    let mut w2 = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w2[i * k + j] = (-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let norm: f64 = w2.iter().sum();
    w2.iter_mut().for_each(|v| *v /= norm);
    let (h, w) = (s.h(), s.w());
    let mut total = 0.0;
    for n in 0..s.n() {
        let (pa, pb) = (ya.plane(n, 0), yb.plane(n, 0));
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let at = |p: &[f64], i: usize, j: usize| p[(y0 + i) * w + x0 + j];
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        mx += w2[i * k + j] * at(pa, i, j);
                        my += w2[i * k + j] * at(pb, i, j);
                    }
                }
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (dx, dy) = (at(pa, i, j) - mx, at(pb, i, j) - my);
                        sxx += w2[i * k + j] * dx * dx;
                        syy += w2[i * k + j] * dy * dy;
                        sxy += w2[i * k + j] * dx * dy;
                    }
                }
                sum += ssim_term(mx, my, sxx, syy, sxy);
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / s.n() as f64)
}
