//! Two-dimensional discrete Fourier analysis of feature maps.
//!
//! The forward transform is unnormalized,
//! `F(u,v) = sum_{h,w} x(h,w) exp(-2*pi*i*(h*u/H + w*v/W))`, and the inverse
//! carries the `1/(H*W)` factor. The frequency origin sits at index `(0,0)`;
//! nothing here shifts the spectrum.
//!
//! Besides the plain transforms this module provides the polar
//! (amplitude/phase) view, the amplitude/phase exchange between two images,
//! differentiable tape versions of all of these, and the Fourier modeling
//! branch of the FreqSSM block.

use std::cell::RefCell;
use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::ops;
use crate::params::{Bound, Conv, ParamStore, Pointwise};
use crate::tensor::{Shape, Tensor};

/// Per-channel complex coefficients of a real or complex feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

/// Polar view of a [`Spectrum`]. Phase lies in `(-pi, pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpPhase {
    pub amplitude: Tensor,
    pub phase: Tensor,
}

impl Spectrum {
    pub fn shape(&self) -> Shape {
        self.re.shape()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D FFT of one row-major `h x w` plane.
fn fft_plane(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (row, col) = if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        };
        row.process(buf);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    });
}

/// Transforms every `(n, c)` plane. `im` may be `None` for real input.
fn transform(re: &Tensor, im: Option<&Tensor>, inverse: bool) -> Spectrum {
    let s = re.shape();
    let (h, w) = (s.h(), s.w());
    let p = s.plane();
    let planes = s.n() * s.c();
    let mut out_re = Tensor::zeros(s);
    let mut out_im = Tensor::zeros(s);
    let results: Vec<Vec<Complex64>> = (0..planes)
        .into_par_iter()
        .map(|i| {
            let r = &re.data()[i * p..(i + 1) * p];
            let mut buf: Vec<Complex64> = match im {
                Some(im) => r
                    .iter()
                    .zip(&im.data()[i * p..(i + 1) * p])
                    .map(|(&a, &b)| Complex64::new(a, b))
                    .collect(),
                None => r.iter().map(|&a| Complex64::new(a, 0.0)).collect(),
            };
            fft_plane(&mut buf, h, w, inverse);
            buf
        })
        .collect();
    let norm = if inverse { 1.0 / p as f64 } else { 1.0 };
    for (i, buf) in results.into_iter().enumerate() {
        for (j, z) in buf.into_iter().enumerate() {
            out_re.data_mut()[i * p + j] = z.re * norm;
            out_im.data_mut()[i * p + j] = z.im * norm;
        }
    }
    Spectrum {
        re: out_re,
        im: out_im,
    }
}

/// Unnormalized forward DFT of a real feature map, per channel.
pub fn dft2(x: &Tensor) -> Spectrum {
    transform(x, None, false)
}

/// Full complex inverse DFT (with the `1/(H*W)` factor).
pub fn idft2_complex(s: &Spectrum) -> Spectrum {
    transform(&s.re, Some(&s.im), true)
}

/// Real part of the inverse DFT.
pub fn idft2(s: &Spectrum) -> Tensor {
    idft2_complex(s).re
}

pub fn to_amp_phase(s: &Spectrum) -> AmpPhase {
    AmpPhase {
        amplitude: s.re.zip_with(&s.im, f64::hypot).unwrap(),
        phase: s.re.zip_with(&s.im, |r, i| phase_of(r, i)).unwrap(),
    }
}

pub fn from_amp_phase(ap: &AmpPhase) -> Spectrum {
    Spectrum {
        re: ap.amplitude.zip_with(&ap.phase, |a, p| a * p.cos()).unwrap(),
        im: ap.amplitude.zip_with(&ap.phase, |a, p| a * p.sin()).unwrap(),
    }
}

/// `atan2(im, re)` with `atan2(0, 0) = 0` and the result kept in `(-pi, pi]`.
#[inline]
pub fn phase_of(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let p = im.atan2(re);
    // atan2(-0.0, negative) returns -pi
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Exchanges amplitude and phase between two images channel by channel.
///
/// Returns `(amp(a) with phase(b), amp(b) with phase(a))`.
pub fn spectrum_swap(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return shape_err("spectrum_swap", format!("{} vs {}", a.shape(), b.shape()));
    }
    let pa = to_amp_phase(&dft2(a));
    let pb = to_amp_phase(&dft2(b));
    let amp_a_pha_b = idft2(&from_amp_phase(&AmpPhase {
        amplitude: pa.amplitude.clone(),
        phase: pb.phase.clone(),
    }));
    let amp_b_pha_a = idft2(&from_amp_phase(&AmpPhase {
        amplitude: pb.amplitude,
        phase: pa.phase,
    }));
    Ok((amp_a_pha_b, amp_b_pha_a))
}

/// Differentiable forward DFT of a real tensor; returns `(re, im)`.
pub fn dft2_op(tape: &mut Tape, x: Var) -> (Var, Var) {
    let s = dft2(tape.value(x));
    let outs = tape.record(
        &[x],
        vec![s.re, s.im],
        Box::new(|gs| {
            // dL/dx = Re(conj-DFT of g) = H*W * Re(idft2(g))
            let shape = gs.iter().flatten().next().unwrap().shape();
            let zero = Tensor::zeros(shape);
            let gre = gs[0].unwrap_or(&zero);
            let gim = gs[1].unwrap_or(&zero);
            let back = transform(gre, Some(gim), true);
            vec![Some(back.re.scale(shape.plane() as f64))]
        }),
    );
    (outs[0], outs[1])
}

/// Differentiable real part of the inverse DFT.
pub fn idft2_op(tape: &mut Tape, re: Var, im: Var) -> Result<Var> {
    let (rv, iv) = (tape.value(re), tape.value(im));
    rv.expect_same_shape(iv, "idft2")?;
    let out = idft2(&Spectrum {
        re: rv.clone(),
        im: iv.clone(),
    });
    Ok(tape.record1(
        &[re, im],
        out,
        Box::new(|gs| {
            let g = gs[0].unwrap();
            let f = dft2(g);
            let k = 1.0 / g.shape().plane() as f64;
            vec![Some(f.re.scale(k)), Some(f.im.scale(k))]
        }),
    ))
}

/// Differentiable polar decomposition; returns `(amplitude, phase)`.
///
/// At zero amplitude both derivatives are taken as zero.
pub fn amp_phase_op(tape: &mut Tape, re: Var, im: Var) -> Result<(Var, Var)> {
    let (rv, iv) = (tape.value_rc(re), tape.value_rc(im));
    rv.expect_same_shape(&iv, "to_amp_phase")?;
    let ap = to_amp_phase(&Spectrum {
        re: (*rv).clone(),
        im: (*iv).clone(),
    });
    let amp = ap.amplitude.clone();
    let outs = tape.record(
        &[re, im],
        vec![ap.amplitude, ap.phase],
        Box::new(move |gs| {
            let s = rv.shape();
            let mut gre = Tensor::zeros(s);
            let mut gim = Tensor::zeros(s);
            for j in 0..s.numel() {
                let (r, i, a) = (rv.data()[j], iv.data()[j], amp.data()[j]);
                if a == 0.0 {
                    continue;
                }
                let ga = gs[0].map_or(0.0, |g| g.data()[j]);
                let gp = gs[1].map_or(0.0, |g| g.data()[j]);
                let a2 = a * a;
                gre.data_mut()[j] = ga * r / a - gp * i / a2;
                gim.data_mut()[j] = ga * i / a + gp * r / a2;
            }
            vec![Some(gre), Some(gim)]
        }),
    );
    Ok((outs[0], outs[1]))
}

/// Differentiable polar-to-cartesian map; returns `(re, im)`.
pub fn polar_op(tape: &mut Tape, amp: Var, phase: Var) -> Result<(Var, Var)> {
    let (av, pv) = (tape.value_rc(amp), tape.value_rc(phase));
    av.expect_same_shape(&pv, "from_amp_phase")?;
    let s = from_amp_phase(&AmpPhase {
        amplitude: (*av).clone(),
        phase: (*pv).clone(),
    });
    let outs = tape.record(
        &[amp, phase],
        vec![s.re, s.im],
        Box::new(move |gs| {
            let sh = av.shape();
            let mut ga = Tensor::zeros(sh);
            let mut gp = Tensor::zeros(sh);
            for j in 0..sh.numel() {
                let (a, p) = (av.data()[j], pv.data()[j]);
                let gr = gs[0].map_or(0.0, |g| g.data()[j]);
                let gi = gs[1].map_or(0.0, |g| g.data()[j]);
                let (sn, cs) = p.sin_cos();
                ga.data_mut()[j] = gr * cs + gi * sn;
                gp.data_mut()[j] = a * (gi * cs - gr * sn);
            }
            vec![Some(ga), Some(gp)]
        }),
    );
    Ok((outs[0], outs[1]))
}

/// 1x1 conv, SiLU, 1x1 conv, applied per frequency bin.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub first: Pointwise,
    pub second: Pointwise,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        ConvBlock {
            first: Pointwise::new(store, &format!("{name}.0"), channels, channels),
            second: Pointwise::new(store, &format!("{name}.1"), channels, channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.first.forward(tape, p, x)?;
        let y = ops::silu(tape, y);
        self.second.forward(tape, p, y)
    }

    /// Makes the block an identity up to `shift * exp(-shift)` on inputs
    /// bounded below by zero: the first conv shifts into SiLU's linear
    /// regime, the second shifts back.
    pub fn set_saturated_identity(&self, store: &mut ParamStore, shift: f64) {
        self.first.set_identity(store, shift);
        self.second.set_identity(store, -shift);
    }
}

/// Weights of the Fourier modeling branch.
#[derive(Debug, Clone)]
pub struct FourierBranch {
    pub entry: Conv,
    pub amp_in: Pointwise,
    pub amp_block: ConvBlock,
    pub pha_in: Pointwise,
    pub pha_block: ConvBlock,
}

impl FourierBranch {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        FourierBranch {
            entry: Conv::new(store, &format!("{name}.entry"), channels, channels, 3),
            amp_in: Pointwise::new(store, &format!("{name}.amp_in"), channels, channels),
            amp_block: ConvBlock::new(store, &format!("{name}.amp_block"), channels),
            pha_in: Pointwise::new(store, &format!("{name}.pha_in"), channels, channels),
            pha_block: ConvBlock::new(store, &format!("{name}.pha_block"), channels),
        }
    }

    /// conv -> DFT -> polar; the amplitude path refines the amplitude and the
    /// phase path the phase; recombine and return the real inverse DFT.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_in: Var) -> Result<Var> {
        let f0 = self.entry.forward(tape, p, f_in)?;
        let (re, im) = dft2_op(tape, f0);
        let (amp, pha) = amp_phase_op(tape, re, im)?;
        let a = self.amp_in.forward(tape, p, amp)?;
        let a = self.amp_block.forward(tape, p, a)?;
        let ph = self.pha_in.forward(tape, p, pha)?;
        let ph = self.pha_block.forward(tape, p, ph)?;
        let (re2, im2) = polar_op(tape, a, ph)?;
        idft2_op(tape, re2, im2)
    }

    /// Identity parameterization used to check the transform round trip.
    pub fn set_identity(&self, store: &mut ParamStore, shift: f64) {
        self.entry.set_identity(store);
        self.amp_in.set_identity(store, 0.0);
        self.pha_in.set_identity(store, 0.0);
        self.amp_block.set_saturated_identity(store, shift);
        self.pha_block.set_saturated_identity(store, shift + PI);
    }
}
