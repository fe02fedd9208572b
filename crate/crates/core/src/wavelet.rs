//! Orthonormal Haar wavelets and wavelet packets.
//!
//! Sub-band conventions for a 2x2 block `[[a, b], [c, d]]`:
//! `ll = (a+b+c+d)/2`, `lh = (a-b+c-d)/2` (horizontal detail),
//! `hl = (a+b-c-d)/2` (vertical detail), `hh = (a-b-c+d)/2`.
//!
//! A k-level packet decomposition has `4^k` bands. Band `i` is named by the
//! base-4 digits of `i`, most significant digit first, each digit choosing
//! LL/LH/HL/HH at that level. The mosaic layout places digit `d` of a level
//! in quadrant `(d / 2, d % 2)` of the region owned by the previous digits,
//! so the top-left tile is the lowest band and the bottom-right the highest.

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl WaveletBands {
    pub fn into_array(self) -> [Tensor; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }

    pub fn from_array([ll, lh, hl, hh]: [Tensor; 4]) -> Self {
        WaveletBands { ll, lh, hl, hh }
    }

    pub fn energy(&self) -> f64 {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }
}

pub const SUBBAND_NAMES: [&str; 4] = ["LL", "LH", "HL", "HH"];

/// One level of the 2D Haar transform.
pub fn dwt2(x: &Tensor) -> Result<WaveletBands> {
    let s = x.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return shape_err(
            "dwt2",
            format!(
                "H={} and W={} must be even; pad the input to an even size first",
                s.h(),
                s.w()
            ),
        );
    }
    let bs = s.with_hw(s.h() / 2, s.w() / 2);
    let mut out = [
        Tensor::zeros(bs),
        Tensor::zeros(bs),
        Tensor::zeros(bs),
        Tensor::zeros(bs),
    ];
    let (w, bw) = (s.w(), bs.w());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let src = x.plane(n, c);
            for y in 0..bs.h() {
                for xx in 0..bw {
                    let a = src[2 * y * w + 2 * xx];
                    let b = src[2 * y * w + 2 * xx + 1];
                    let cc = src[(2 * y + 1) * w + 2 * xx];
                    let d = src[(2 * y + 1) * w + 2 * xx + 1];
                    let j = y * bw + xx;
                    out[0].plane_mut(n, c)[j] = 0.5 * (a + b + cc + d);
                    out[1].plane_mut(n, c)[j] = 0.5 * (a - b + cc - d);
                    out[2].plane_mut(n, c)[j] = 0.5 * (a + b - cc - d);
                    out[3].plane_mut(n, c)[j] = 0.5 * (a - b - cc + d);
                }
            }
        }
    }
    Ok(WaveletBands::from_array(out))
}

pub fn idwt2(b: &WaveletBands) -> Result<Tensor> {
    let bs = b.ll.shape();
    for (t, name) in [(&b.lh, "lh"), (&b.hl, "hl"), (&b.hh, "hh")] {
        if t.shape() != bs {
            return shape_err("idwt2", format!("band {name} is {}, ll is {bs}", t.shape()));
        }
    }
    let s = bs.with_hw(2 * bs.h(), 2 * bs.w());
    let mut out = Tensor::zeros(s);
    let (w, bw) = (s.w(), bs.w());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let (ll, lh, hl, hh) = (b.ll.plane(n, c), b.lh.plane(n, c), b.hl.plane(n, c), b.hh.plane(n, c));
            let dst = out.plane_mut(n, c);
            for y in 0..bs.h() {
                for xx in 0..bw {
                    let j = y * bw + xx;
                    let (p, q, r, t) = (ll[j], lh[j], hl[j], hh[j]);
                    dst[2 * y * w + 2 * xx] = 0.5 * (p + q + r + t);
                    dst[2 * y * w + 2 * xx + 1] = 0.5 * (p - q + r - t);
                    dst[(2 * y + 1) * w + 2 * xx] = 0.5 * (p + q - r - t);
                    dst[(2 * y + 1) * w + 2 * xx + 1] = 0.5 * (p - q - r + t);
                }
            }
        }
    }
    Ok(out)
}

/// The `4^k` bands of a k-level packet decomposition, in natural order.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketGrid {
    pub levels: usize,
    pub bands: Vec<Tensor>,
}

impl PacketGrid {
    pub fn band_count(levels: usize) -> usize {
        1 << (2 * levels)
    }

    /// Name of band `index`, e.g. `"LLHL"` for index 2 at two levels.
    pub fn label(levels: usize, index: usize) -> String {
        (0..levels)
            .map(|l| SUBBAND_NAMES[(index >> (2 * (levels - 1 - l))) & 3])
            .collect()
    }

    /// Tile `(row, col)` of band `index` in the `2^k x 2^k` mosaic.
    pub fn tile_position(levels: usize, index: usize) -> (usize, usize) {
        let (mut r, mut c) = (0, 0);
        for l in 0..levels {
            let d = (index >> (2 * (levels - 1 - l))) & 3;
            r = 2 * r + d / 2;
            c = 2 * c + d % 2;
        }
        (r, c)
    }

    /// Inverse of [`PacketGrid::tile_position`].
    pub fn band_at_tile(levels: usize, row: usize, col: usize) -> usize {
        let mut idx = 0;
        for l in 0..levels {
            let shift = levels - 1 - l;
            let d = 2 * ((row >> shift) & 1) + ((col >> shift) & 1);
            idx = idx * 4 + d;
        }
        idx
    }
}

fn check_levels(op: &'static str, s: Shape, k: usize) -> Result<()> {
    if k == 0 {
        return arg_err(op, "levels must be >= 1");
    }
    let m = 1usize << k;
    if s.h() % m != 0 || s.w() % m != 0 {
        return shape_err(
            op,
            format!("H={} and W={} must be divisible by 2^{k}={m}", s.h(), s.w()),
        );
    }
    Ok(())
}

/// k-level wavelet packet transform: every sub-band is split again.
pub fn wpt(x: &Tensor, k: usize) -> Result<PacketGrid> {
    check_levels("wpt", x.shape(), k)?;
    let mut bands = vec![x.clone()];
    for _ in 0..k {
        let mut next = Vec::with_capacity(bands.len() * 4);
        for b in &bands {
            next.extend(dwt2(b)?.into_array());
        }
        bands = next;
    }
    Ok(PacketGrid { levels: k, bands })
}

pub fn iwpt(g: &PacketGrid) -> Result<Tensor> {
    if g.levels == 0 || g.bands.len() != PacketGrid::band_count(g.levels) {
        return shape_err(
            "iwpt",
            format!("{} bands do not form a {}-level packet grid", g.bands.len(), g.levels),
        );
    }
    let mut bands = g.bands.clone();
    for _ in 0..g.levels {
        let mut prev = Vec::with_capacity(bands.len() / 4);
        for quad in bands.chunks_exact(4) {
            prev.push(idwt2(&WaveletBands::from_array([
                quad[0].clone(),
                quad[1].clone(),
                quad[2].clone(),
                quad[3].clone(),
            ]))?);
        }
        bands = prev;
    }
    Ok(bands.pop().unwrap())
}

/// Tiles the bands into a single mosaic at the original resolution.
pub fn arrange_bands(g: &PacketGrid) -> Result<Tensor> {
    let count = g.bands.len();
    if g.levels == 0 || count != PacketGrid::band_count(g.levels) {
        return shape_err(
            "arrange_bands",
            format!("{count} bands is not 4^{} (a square tiling)", g.levels),
        );
    }
    let bs = g.bands[0].shape();
    if let Some(b) = g.bands.iter().find(|b| b.shape() != bs) {
        return shape_err("arrange_bands", format!("band shapes differ: {} vs {bs}", b.shape()));
    }
    let side = 1 << g.levels;
    let s = bs.with_hw(bs.h() * side, bs.w() * side);
    let mut out = Tensor::zeros(s);
    for (i, band) in g.bands.iter().enumerate() {
        let (tr, tc) = PacketGrid::tile_position(g.levels, i);
        for n in 0..s.n() {
            for c in 0..s.c() {
                let src = band.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..bs.h() {
                    let row = (tr * bs.h() + y) * s.w() + tc * bs.w();
                    dst[row..row + bs.w()].copy_from_slice(&src[y * bs.w()..(y + 1) * bs.w()]);
                }
            }
        }
    }
    Ok(out)
}

pub fn split_bands(mosaic: &Tensor, k: usize) -> Result<PacketGrid> {
    let s = mosaic.shape();
    check_levels("split_bands", s, k)?;
    let side = 1 << k;
    let bs = s.with_hw(s.h() / side, s.w() / side);
    let bands = (0..PacketGrid::band_count(k))
        .map(|i| {
            let (tr, tc) = PacketGrid::tile_position(k, i);
            let mut band = Tensor::zeros(bs);
            for n in 0..s.n() {
                for c in 0..s.c() {
                    let src = mosaic.plane(n, c);
                    let dst = band.plane_mut(n, c);
                    for y in 0..bs.h() {
                        let row = (tr * bs.h() + y) * s.w() + tc * bs.w();
                        dst[y * bs.w()..(y + 1) * bs.w()].copy_from_slice(&src[row..row + bs.w()]);
                    }
                }
            }
            band
        })
        .collect();
    Ok(PacketGrid { levels: k, bands })
}

/// `arrange_bands(wpt(x, k))`.
pub fn wpt_mosaic(x: &Tensor, k: usize) -> Result<Tensor> {
    arrange_bands(&wpt(x, k)?)
}

/// `iwpt(split_bands(m, k))`.
pub fn iwpt_mosaic(m: &Tensor, k: usize) -> Result<Tensor> {
    iwpt(&split_bands(m, k)?)
}

/// Differentiable single-level transform; returns `[ll, lh, hl, hh]`.
///
/// The transform is orthonormal, so its adjoint is its inverse.
pub fn dwt2_op(tape: &mut Tape, x: Var) -> Result<[Var; 4]> {
    let bands = dwt2(tape.value(x))?;
    let bs = bands.ll.shape();
    let outs = tape.record(
        &[x],
        bands.into_array().to_vec(),
        Box::new(move |gs| {
            let g = |i: usize| gs[i].cloned().unwrap_or_else(|| Tensor::zeros(bs));
            let back = idwt2(&WaveletBands::from_array([g(0), g(1), g(2), g(3)])).unwrap();
            vec![Some(back)]
        }),
    );
    Ok([outs[0], outs[1], outs[2], outs[3]])
}

pub fn idwt2_op(tape: &mut Tape, bands: [Var; 4]) -> Result<Var> {
    let vals = bands.map(|b| tape.value(b).clone());
    let out = idwt2(&WaveletBands::from_array(vals))?;
    Ok(tape.record1(
        &bands,
        out,
        Box::new(|gs| {
            let b = dwt2(gs[0].unwrap()).unwrap();
            b.into_array().into_iter().map(Some).collect()
        }),
    ))
}

/// Differentiable `arrange_bands(wpt(x, k))`.
pub fn wpt_mosaic_op(tape: &mut Tape, x: Var, k: usize) -> Result<Var> {
    let out = wpt_mosaic(tape.value(x), k)?;
    Ok(tape.record1(
        &[x],
        out,
        Box::new(move |gs| vec![Some(iwpt_mosaic(gs[0].unwrap(), k).unwrap())]),
    ))
}

/// Differentiable `iwpt(split_bands(m, k))`.
pub fn iwpt_mosaic_op(tape: &mut Tape, m: Var, k: usize) -> Result<Var> {
    let out = iwpt_mosaic(tape.value(m), k)?;
    Ok(tape.record1(
        &[m],
        out,
        Box::new(move |gs| vec![Some(wpt_mosaic(gs[0].unwrap(), k).unwrap())]),
    ))
}
