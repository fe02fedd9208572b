use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::image;
use crate::tensor::{Shape, Tensor};

/// Where clean images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Smooth colour gradients, low-frequency waves and soft blobs.
    Procedural,
    /// Random crops of the PPM images in a folder.
    Folder(PathBuf),
}

/// Ranges are inclusive `[lo, hi]` pairs; angles are degrees from vertical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainSynthParams {
    pub height: usize,
    pub width: usize,
    pub streaks: [usize; 2],
    pub angle: [f64; 2],
    /// Per-streak deviation from the image's dominant angle.
    pub angle_jitter: f64,
    pub length: [f64; 2],
    pub width_px: [f64; 2],
    pub intensity: [f64; 2],
    /// Gaussian blur applied to the finished rain layer; 0 disables it.
    pub blur_sigma: f64,
    pub background: Background,
}

impl Default for RainSynthParams {
    fn default() -> Self {
        RainSynthParams {
            height: 64,
            width: 64,
            streaks: [14, 28],
            angle: [-25.0, 25.0],
            angle_jitter: 4.0,
            length: [10.0, 26.0],
            width_px: [0.6, 1.4],
            intensity: [0.3, 0.7],
            blur_sigma: 0.5,
            background: Background::Procedural,
        }
    }
}

impl RainSynthParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.height == 0 || self.width == 0 {
            return arg_err("RainSynthParams", "image size must be positive");
        }
        if self.streaks[0] > self.streaks[1]
            || !ordered(self.angle)
            || !ordered(self.length)
            || !ordered(self.width_px)
            || !ordered(self.intensity)
        {
            return arg_err("RainSynthParams", "every range must satisfy lo <= hi");
        }
        if self.intensity[0] < 0.0 || self.width_px[0] <= 0.0 || self.length[0] < 0.0 || self.blur_sigma < 0.0 {
            return arg_err("RainSynthParams", "intensity, length and blur must be non-negative, width positive");
        }
        Ok(())
    }
}

/// One synthetic training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct RainSample {
    /// `1 x 3 x H x W`, clamped to [0, 1].
    pub rainy: Tensor,
    pub clean: Tensor,
    /// Additive rain layer, `1 x 1 x H x W`.
    pub mask: Tensor,
}

fn range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn procedural_background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for c in 0..3 {
        let base = rng.random_range(0.2..0.55);
        let (gx, gy) = (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25));
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.random_range(0.02..0.08),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..PI),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let plane = t.plane_mut(0, c);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let mut val = base + gx * (u - 0.5) + gy * (v - 0.5);
                for &(amp, freq, dir, phase) in &waves {
                    let proj = u * dir.cos() + v * dir.sin();
                    val += amp * (2.0 * PI * freq * proj + phase).sin();
                }
                plane[y * w + x] = val;
            }
        }
    }
    for _ in 0..rng.random_range(2..5) {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let r = rng.random_range(0.08..0.25) * h.min(w) as f64;
        let tint: [f64; 3] = [
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.15..0.15),
        ];
        for (c, dc) in tint.iter().enumerate() {
            let plane = t.plane_mut(0, c);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    plane[y * w + x] += dc * (-d2 / (2.0 * r * r)).exp();
                }
            }
        }
    }
    t.map(|v| v.clamp(0.0, 1.0))
}

fn folder_background(dir: &PathBuf, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return arg_err("synth_rain", format!("no .ppm images in {}", dir.display()));
    }
    let img = image::load_ppm(&files[rng.random_range(0..files.len())])?;
    let s = img.shape();
    if s.h() < h || s.w() < w {
        return arg_err(
            "synth_rain",
            format!("background {}x{} smaller than {h}x{w}", s.h(), s.w()),
        );
    }
    let (y0, x0) = (rng.random_range(0..=s.h() - h), rng.random_range(0..=s.w() - w));
    img.crop(y0, x0, h, w)
}

/// Separable Gaussian blur with zero padding.
fn blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / norm).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if horizontal { (y, x + o) } else { (y + o, x) };
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        acc += kv * src[yy as usize * w + xx as usize];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

fn rain_layer(p: &RainSynthParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (p.height, p.width);
    let mut layer = vec![0.0; h * w];
    let count = rng.random_range(p.streaks[0]..=p.streaks[1]);
    let dominant = range(rng, p.angle);
    for _ in 0..count {
        let angle = (dominant + rng.random_range(-1.0..=1.0) * p.angle_jitter).to_radians();
        let len = range(rng, p.length);
        let width = range(rng, p.width_px);
        let intensity = range(rng, p.intensity);
        let cy = rng.random_range(-0.1..1.1) * h as f64;
        let cx = rng.random_range(-0.1..1.1) * w as f64;
        // unit vector along the streak (vertical at angle 0)
        let (dx, dy) = (angle.sin(), angle.cos());
        let half = len / 2.0;
        let reach = half + 3.0 * width;
        let (y_lo, y_hi) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil().max(0.0) as usize).min(h));
        let (x_lo, x_hi) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil().max(0.0) as usize).min(w));
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                let along = rx * dx + ry * dy;
                let across = -rx * dy + ry * dx;
                if along.abs() > half {
                    continue;
                }
                // soft taper over the outer fifth of each end
                let t = ((half - along.abs()) / (0.2 * half).max(1e-9)).min(1.0);
                let taper = t * t * (3.0 - 2.0 * t);
                layer[y * w + x] += intensity * taper * (-across * across / (2.0 * width * width)).exp();
            }
        }
    }
    if p.blur_sigma > 0.0 {
        layer = blur(&layer, h, w, p.blur_sigma);
    }
    layer
}

/// Generates `n` (rainy, clean, mask) triples, deterministic in `seed`.
pub fn synth_rain(p: &RainSynthParams, seed: u64, n: usize) -> Result<Vec<RainSample>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (p.height, p.width);
    (0..n)
        .map(|_| {
            let clean = match &p.background {
                Background::Procedural => procedural_background(h, w, &mut rng),
                Background::Folder(dir) => folder_background(dir, h, w, &mut rng)?,
            };
            let layer = rain_layer(p, &mut rng);
            let rainy = Tensor::from_fn(clean.shape(), |_, c, y, x| {
                (clean.at(0, c, y, x) + layer[y * w + x]).clamp(0.0, 1.0)
            });
            let mask = Tensor::new(Shape::new(1, 1, h, w), layer)?;
            Ok(RainSample { rainy, clean, mask })
        })
        .collect()
}
