//! Binary PPM (P6, maxval 255) images as `1 x 3 x H x W` tensors in [0, 1].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{read_exact_or_truncated, Shape, Tensor};

/// Maps [0, 1] to 8-bit with rounding and clamping.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest representable 8-bit level.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f64 / 255.0)
}

fn read_token(r: &mut impl Read) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        read_exact_or_truncated(r, &mut byte, "PPM header")?;
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            while byte[0] != b'\n' {
                read_exact_or_truncated(r, &mut byte, "PPM comment")?;
            }
        } else if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(b as char);
        }
    }
}

fn header_number(r: &mut impl Read, what: &str) -> Result<usize> {
    let tok = read_token(r)?;
    tok.parse()
        .map_err(|_| Error::Malformed(format!("PPM {what} is not a number: {tok:?}")))
}

pub fn read_ppm(mut r: impl Read) -> Result<Tensor> {
    let magic = read_token(&mut r)?;
    if magic != "P6" {
        return Err(Error::Malformed(format!("expected binary PPM (P6), found {magic:?}")));
    }
    let w = header_number(&mut r, "width")?;
    let h = header_number(&mut r, "height")?;
    let maxval = header_number(&mut r, "maxval")?;
    if maxval != 255 {
        return Err(Error::Malformed(format!("only maxval 255 is supported, got {maxval}")));
    }
    let mut buf = vec![0u8; w * h * 3];
    read_exact_or_truncated(&mut r, &mut buf, "PPM pixels")?;
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        buf[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

pub fn write_ppm(t: &Tensor, mut w: impl Write) -> Result<()> {
    let s = t.shape();
    if s.n() != 1 || s.c() != 3 {
        return shape_err("write_ppm", format!("expected 1x3xHxW image, got {s}"));
    }
    write!(w, "P6\n{} {}\n255\n", s.w(), s.h())?;
    let mut buf = Vec::with_capacity(s.numel());
    for y in 0..s.h() {
        for x in 0..s.w() {
            for c in 0..3 {
                buf.push(quantize(t.at(0, c, y, x)));
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_ppm(BufReader::new(File::open(path)?))
}

pub fn save_ppm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(t, &mut w)?;
    w.flush()?;
    Ok(())
}
