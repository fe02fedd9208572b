use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use freqmamba::fourier::{dft2, spectrum_swap as swap};
use freqmamba::image::{load_ppm, save_ppm};
use freqmamba::scan::{band_rank_sequence, order_freq_blocks};
use freqmamba::training::{synth_rain, RainSynthParams};
use freqmamba::wavelet::PacketGrid;
use freqmamba::{Shape, Tensor};

use crate::fail::config_error;

/// `prefix` with `suffix` appended to its file name.
fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = OsString::from(prefix.as_os_str());
    name.push(suffix);
    PathBuf::from(name)
}

fn ensure_parent(prefix: &Path) -> Result<()> {
    match prefix.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.zip_with(b, |x, y| x - y)?.sum_sq().sqrt())
}

pub fn spectrum_swap(inputs: Option<(&Path, &Path)>, seed: u64, out: &Path) -> Result<()> {
    ensure_parent(out)?;
    let (a, b) = match inputs {
        Some((pa, pb)) => (
            load_ppm(pa).with_context(|| format!("reading {}", pa.display()))?,
            load_ppm(pb).with_context(|| format!("reading {}", pb.display()))?,
        ),
        None => {
            let sample = synth_rain(&RainSynthParams::default(), seed, 1)?.remove(0);
            save_ppm(&sample.rainy, with_suffix(out, "_a.ppm"))?;
            save_ppm(&sample.clean, with_suffix(out, "_b.ppm"))?;
            println!("synthetic pair (seed {seed}): a = rainy, b = clean");
            (sample.rainy, sample.clean)
        }
    };
    if a.shape() != b.shape() {
        return Err(config_error(format!("image sizes differ: {} vs {}", a.shape(), b.shape())));
    }
    let (amp_a_pha_b, amp_b_pha_a) = swap(&a, &b)?;
    save_ppm(&amp_a_pha_b, with_suffix(out, "_amp_a_pha_b.ppm"))?;
    save_ppm(&amp_b_pha_a, with_suffix(out, "_amp_b_pha_a.ppm"))?;
    for (tag, img) in [("a", &a), ("b", &b)] {
        let s = dft2(img);
        s.re.save_ftd(with_suffix(out, &format!("_{tag}_re.ftd")))?;
        s.im.save_ftd(with_suffix(out, &format!("_{tag}_im.ftd")))?;
    }
    println!("L2 distances (values in [0, 1]):");
    println!("  amp(a) pha(b) to a: {:.4}  to b: {:.4}", l2(&amp_a_pha_b, &a)?, l2(&amp_a_pha_b, &b)?);
    println!("  amp(b) pha(a) to a: {:.4}  to b: {:.4}", l2(&amp_b_pha_a, &a)?, l2(&amp_b_pha_a, &b)?);
    println!("wrote {}_*", out.display());
    Ok(())
}

pub fn scan_viz(height: usize, width: usize, levels: usize, out: &Path) -> Result<()> {
    let order = order_freq_blocks(height, width, levels)?;
    let bands = band_rank_sequence(&order, levels);
    ensure_parent(out)?;

    let mut text = String::from("# step pixel row col band label\n");
    for (t, (&p, &band)) in order.forward.iter().zip(&bands).enumerate() {
        let (r, c) = (p / width, p % width);
        writeln!(text, "{t} {p} {r} {c} {band} {}", PacketGrid::label(levels, band)).unwrap();
    }
    let txt = with_suffix(out, ".txt");
    fs::write(&txt, text).with_context(|| format!("writing {}", txt.display()))?;

    let rank = order.visit_rank();
    let rank_map = Tensor::from_fn(Shape::new(1, 1, height, width), |_, _, y, x| rank[y * width + x] as f64);
    rank_map.save_ftd(with_suffix(out, "_rank.ftd"))?;
    let scale = (height * width - 1).max(1) as f64;
    let heat = Tensor::from_fn(Shape::new(1, 3, height, width), |_, _, y, x| rank[y * width + x] as f64 / scale);
    save_ppm(&heat, with_suffix(out, "_rank.ppm"))?;

    if height * width <= 1024 {
        println!("visit step of each pixel:");
        let digits = (height * width - 1).to_string().len();
        for y in 0..height {
            let row: Vec<String> = (0..width).map(|x| format!("{:>digits$}", rank[y * width + x])).collect();
            println!("  {}", row.join(" "));
        }
    }
    println!("{} steps over {} bands, written to {}", order.len(), PacketGrid::band_count(levels), txt.display());
    Ok(())
}
