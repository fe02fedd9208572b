use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use freqmamba::image::{load_ppm, quantize_tensor, save_ppm};
use freqmamba::model::{Model, SIZE_MULTIPLE};
use freqmamba::training::{psnr_y, ssim_y, Pair};
use freqmamba::{Shape, Tape, Tensor};

use crate::fail::{config_error, Exit};

/// Mirror index into `0..n` without repeating the edge sample.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads bottom and right by reflection up to the next multiple of `m`.
pub fn reflect_pad(x: &Tensor, m: usize) -> Tensor {
    let s = x.shape();
    let (h, w) = (s.h().div_ceil(m) * m, s.w().div_ceil(m) * m);
    if (h, w) == (s.h(), s.w()) {
        return x.clone();
    }
    Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |n, c, y, xx| {
        x.at(n, c, mirror(y, s.h()), mirror(xx, s.w()))
    })
}

/// Runs the model on an image of any size, padding and cropping back.
pub fn restore(model: &Model, rainy: &Tensor) -> Result<Tensor> {
    let s = rainy.shape();
    let padded = reflect_pad(rainy, SIZE_MULTIPLE);
    let out = model.infer(&padded)?;
    Ok(out.crop(0, 0, s.h(), s.w())?)
}

fn write_dumps(model: &Model, rainy: &Tensor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape, false);
    let x = tape.constant(reflect_pad(rainy, SIZE_MULTIPLE));
    let (_, trace) = model.forward_traced(&mut tape, &p, x)?;
    for (i, m) in trace.attention.iter().enumerate() {
        tape.value(*m).save_ftd(dir.join(format!("attention{i}.ftd")))?;
    }
    for (block, parts) in &trace.branches {
        for (name, v) in [("spatial", parts.spatial), ("band", parts.band), ("fourier", parts.fourier)] {
            if let Some(v) = v {
                tape.value(v).save_ftd(dir.join(format!("{block}.{name}.ftd")))?;
            }
        }
    }
    Ok(())
}

pub fn infer(checkpoint: &Path, input: &Path, out: &Path, dumps: Option<&Path>) -> Result<()> {
    let model = Model::load(checkpoint, None).with_context(|| format!("loading {}", checkpoint.display()))?;
    let rainy = load_ppm(input).with_context(|| format!("reading {}", input.display()))?;
    let restored = restore(&model, &rainy)?;
    if !restored.is_finite() {
        bail!(anyhow::anyhow!("restored image contains non-finite values").context(Exit::Numeric));
    }
    save_ppm(&restored, out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(dir) = dumps {
        write_dumps(&model, &rainy, dir)?;
    }
    Ok(())
}

/// Reads `dir/rainy/*.ppm` with the same-named files in `dir/clean/`.
pub fn load_pairs(dir: &Path) -> Result<Vec<(String, Pair)>> {
    let rainy_dir = dir.join("rainy");
    let mut names: Vec<PathBuf> = fs::read_dir(&rainy_dir)
        .with_context(|| format!("listing {}", rainy_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    names.sort();
    if names.is_empty() {
        bail!(config_error(format!("no .ppm images in {}", rainy_dir.display())));
    }
    names
        .into_iter()
        .map(|path| {
            let file = path.file_name().unwrap().to_string_lossy().into_owned();
            let clean_path = dir.join("clean").join(&file);
            let rainy = load_ppm(&path).with_context(|| format!("reading {}", path.display()))?;
            let clean = load_ppm(&clean_path).with_context(|| format!("reading {}", clean_path.display()))?;
            if rainy.shape() != clean.shape() {
                bail!(config_error(format!("{file}: rainy and clean sizes differ")));
            }
            Ok((file, Pair { rainy, clean }))
        })
        .collect()
}

pub fn eval(checkpoint: &Path, folder: &Path, out: Option<&Path>) -> Result<()> {
    let model = Model::load(checkpoint, None).with_context(|| format!("loading {}", checkpoint.display()))?;
    let pairs = load_pairs(folder)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let (mut psnr, mut ssim, mut psnr_in, mut ssim_in) = (0.0, 0.0, 0.0, 0.0);
    for (name, pair) in &pairs {
        // score what would be written: the 8-bit image
        let restored = quantize_tensor(&restore(&model, &pair.rainy)?);
        let (p, s) = (psnr_y(&restored, &pair.clean)?, ssim_y(&restored, &pair.clean)?);
        let (pi, si) = (psnr_y(&pair.rainy, &pair.clean)?, ssim_y(&pair.rainy, &pair.clean)?);
        println!("{name}: PSNR {p:.3} dB SSIM {s:.4} (input {pi:.3} dB, {si:.4})");
        if let Some(dir) = out {
            save_ppm(&restored, dir.join(name))?;
        }
        psnr += p;
        ssim += s;
        psnr_in += pi;
        ssim_in += si;
    }
    let n = pairs.len() as f64;
    println!(
        "mean over {} images: PSNR {:.3} dB SSIM {:.4} (input {:.3} dB, {:.4})",
        pairs.len(),
        psnr / n,
        ssim / n,
        psnr_in / n,
        ssim_in / n
    );
    Ok(())
}
