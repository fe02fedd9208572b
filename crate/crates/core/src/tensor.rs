//! Dense NCHW tensors of 64-bit floats and the FTD1 dump format.
//!
//! A [`Tensor`] is an immutable value once built; the differentiable
//! operations in [`crate::ops`] take tensors by reference and return fresh
//! ones. Gradient bookkeeping (the `requires_grad` flag and the gradient
//! buffer) lives on the tape node that owns a tensor, see [`crate::autograd`].

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

/// Tensor shape `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }
    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    /// Number of pixels in one channel plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }
    pub fn with_c(&self, c: usize) -> Self {
        Shape([self.n(), c, self.h(), self.w()])
    }
    pub fn with_hw(&self, h: usize, w: usize) -> Self {
        Shape([self.n(), self.c(), h, w])
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            );
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for y in 0..shape.h() {
                    for x in 0..shape.w() {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Standard normal entries scaled by `std`, deterministic in `seed`.
    pub fn randn(shape: Shape, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn_with(shape, std, &mut rng)
    }

    pub fn randn_with(shape: Shape, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor { shape, data }
    }

    /// Uniform entries in `[lo, hi)`, deterministic in `seed`.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape.0;
        ((n * s[1] + c) * s[2] + y) * s[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous slice holding one `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_with")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(op, format!("{} vs {}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.c() || len == 0 {
            return shape_err(
                "slice_channels",
                format!("channels {start}..{} out of range for C={}", start + len, s.c()),
            );
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n() * len * p);
        for n in 0..s.n() {
            let base = (n * s.c() + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor {
            shape: s.with_c(len),
            data,
        })
    }

    /// Stacks `parts` along the channel axis in argument order.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("concat_channels", "no parts");
        };
        let s0 = first.shape;
        let mut c_total = 0;
        for (i, t) in parts.iter().enumerate() {
            let s = t.shape;
            if s.n() != s0.n() {
                return shape_err("concat_channels", format!("part {i}: N={} vs {}", s.n(), s0.n()));
            }
            if s.h() != s0.h() {
                return shape_err("concat_channels", format!("part {i}: H={} vs {}", s.h(), s0.h()));
            }
            if s.w() != s0.w() {
                return shape_err("concat_channels", format!("part {i}: W={} vs {}", s.w(), s0.w()));
            }
            c_total += s.c();
        }
        let p = s0.plane();
        let mut data = Vec::with_capacity(s0.n() * c_total * p);
        for n in 0..s0.n() {
            for t in parts {
                let cs = t.shape.c() * p;
                data.extend_from_slice(&t.data[n * cs..(n + 1) * cs]);
            }
        }
        Ok(Tensor {
            shape: s0.with_c(c_total),
            data,
        })
    }

    /// Writes the FTD1 dump: magic, four u32 LE dims, then f32 LE payload.
    pub fn write_ftd(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FTD_MAGIC)?;
        for d in self.shape.0 {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.numel() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ftd(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or_truncated(&mut r, &mut magic, "FTD1 magic")?;
        if &magic != FTD_MAGIC {
            return Err(Error::MagicMismatch {
                expected: *FTD_MAGIC,
                found: magic,
            });
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            read_exact_or_truncated(&mut r, &mut b, "FTD1 dims")?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape(dims);
        let mut payload = vec![0u8; shape.numel() * 4];
        read_exact_or_truncated(&mut r, &mut payload, "FTD1 payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn save_ftd(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ftd(std::io::BufWriter::new(f))
    }

    pub fn load_ftd(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_ftd(std::io::BufReader::new(f))
    }

    /// Rounds every entry through `f32`, the precision of serialized payloads.
    /// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if y0 + h > s.h() || x0 + w > s.w() {
            return shape_err(
                "crop",
                format!("window {h}x{w} at ({y0}, {x0}) exceeds {}x{}", s.h(), s.w()),
            );
        }
        Ok(Tensor::from_fn(s.with_hw(h, w), |n, c, y, x| self.at(n, c, y0 + y, x0 + x)))
    }

    /// Batch element `n` as a batch of one.
    pub fn batch_item(&self, n: usize) -> Self {
        let s = self.shape;
        let len = s.c() * s.plane();
        Tensor {
            shape: Shape::new(1, s.c(), s.h(), s.w()),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("stack", "no tensors given");
        };
        let s = first.shape;
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        let mut n = 0;
        for p in parts {
            let ps = p.shape;
            if (ps.c(), ps.h(), ps.w()) != (s.c(), s.h(), s.w()) {
                return shape_err("stack", format!("{ps} does not match {s}"));
            }
            data.extend_from_slice(&p.data);
            n += ps.n();
        }
        Tensor::new(Shape::new(n, s.c(), s.h(), s.w()), data)
    }

    pub fn to_f32_precision(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }
}

pub const FTD_MAGIC: &[u8; 4] = b"FTD1";

pub(crate) fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("unexpected end of data while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::randn(Shape::new(2, 2, 3, 3), 1.0, 1);
        let b = Tensor::randn(Shape::new(2, 3, 3, 3), 1.0, 2);
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 5, 3, 3));
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 3).unwrap(), b);
    }

    #[test]
    fn concat_reports_offending_dimension() {
        let a = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let b = Tensor::zeros(Shape::new(1, 1, 4, 5));
        let err = Tensor::concat_channels(&[&a, &b]).unwrap_err().to_string();
        assert!(err.contains("W=5"), "{err}");
    }

    #[test]
    fn ftd_round_trip_is_exact_at_f32_precision() {
        let t = Tensor::randn(Shape::new(1, 2, 3, 5), 1.0, 7).to_f32_precision();
        let mut buf = Vec::new();
        t.write_ftd(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FTD1");
        assert_eq!(buf.len(), 4 + 16 + 30 * 4);
        let back = Tensor::read_ftd(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn ftd_errors() {
        let t = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let mut buf = Vec::new();
        t.write_ftd(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::read_ftd(bad.as_slice()), Err(Error::MagicMismatch { .. })));
        let short = &buf[..buf.len() - 1];
        assert!(matches!(Tensor::read_ftd(short), Err(Error::Truncated(_))));
    }
}
