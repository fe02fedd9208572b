//! Differentiable tensor operations recorded on a [`Tape`].
//!
//! Per-channel parameters (biases, norm scales) use shape `(1, C, 1, 1)`.

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{Shape, Tensor};

fn expect_channel_vector(t: &Tensor, c: usize, op: &'static str, what: &str) -> Result<()> {
    if t.shape() != Shape::new(1, c, 1, 1) {
        return shape_err(op, format!("{what} must have shape 1x{c}x1x1, got {}", t.shape()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn same(k: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }
    pub fn depthwise(k: usize, channels: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: k / 2,
            groups: channels,
        }
    }
}

fn conv_out_shape(input: Shape, kernel: Shape, bias: Shape, g: ConvGeometry) -> Result<Shape> {
    const OP: &str = "conv2d";
    if g.stride == 0 {
        return arg_err(OP, "stride must be >= 1");
    }
    if g.groups == 0 || input.c() % g.groups != 0 {
        return shape_err(
            OP,
            format!("input channels C_in={} not divisible by groups={}", input.c(), g.groups),
        );
    }
    if kernel.c() != input.c() / g.groups {
        return shape_err(
            OP,
            format!(
                "kernel dim 1 (C_in/groups) is {}, expected {}",
                kernel.c(),
                input.c() / g.groups
            ),
        );
    }
    if kernel.n() % g.groups != 0 {
        return shape_err(
            OP,
            format!("kernel dim 0 (C_out={}) not divisible by groups={}", kernel.n(), g.groups),
        );
    }
    if kernel.h() != kernel.w() {
        return shape_err(OP, format!("kernel must be square, got {}x{}", kernel.h(), kernel.w()));
    }
    if bias != Shape::new(1, kernel.n(), 1, 1) {
        return shape_err(OP, format!("bias must be 1x{}x1x1, got {bias}", kernel.n()));
    }
    let k = kernel.h();
    let (hp, wp) = (input.h() + 2 * g.padding, input.w() + 2 * g.padding);
    if hp < k || wp < k {
        return shape_err(OP, format!("kernel {k} larger than padded input {hp}x{wp}"));
    }
    Ok(Shape::new(
        input.n(),
        kernel.n(),
        (hp - k) / g.stride + 1,
        (wp - k) / g.stride + 1,
    ))
}

/// Cross-correlation with zero padding (no kernel flip).
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, bias: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let is = input.shape();
    let ks = kernel.shape();
    let os = conv_out_shape(is, ks, bias.shape(), g)?;
    let k = ks.h();
    let cin_g = ks.c();
    let cout_g = ks.n() / g.groups;
    let (h, w) = (is.h() as isize, is.w() as isize);
    let (ho, wo) = (os.h(), os.w());
    let mut out = Tensor::zeros(os);
    let cout = os.c();
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(idx, plane)| {
            let n = idx / cout;
            let co = idx % cout;
            let grp = co / cout_g;
            plane.fill(bias.data()[co]);
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let src = input.plane(n, ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kernel.at(co, cl, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let row = &src[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix >= 0 && ix < w {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    go: &Tensor,
    g: ConvGeometry,
) -> (Tensor, Tensor, Tensor) {
    let is = input.shape();
    let ks = kernel.shape();
    let os = go.shape();
    let k = ks.h();
    let cin_g = ks.c();
    let cout_g = ks.n() / g.groups;
    let (h, w) = (is.h() as isize, is.w() as isize);
    let (ho, wo) = (os.h(), os.w());
    let cin = is.c();

    let mut gi = Tensor::zeros(is);
    gi.data_mut()
        .par_chunks_mut(is.plane())
        .enumerate()
        .for_each(|(idx, plane)| {
            let n = idx / cin;
            let ci = idx % cin;
            let grp = ci / cin_g;
            let cl = ci % cin_g;
            for co in grp * cout_g..(grp + 1) * cout_g {
                let gplane = go.plane(n, co);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kernel.at(co, cl, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let base = iy as usize * w as usize;
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix >= 0 && ix < w {
                                    plane[base + ix as usize] += wv * gplane[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut gk = Tensor::zeros(ks);
    let per_out = cin_g * k * k;
    gk.data_mut()
        .par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(co, kslab)| {
            let grp = co / cout_g;
            for n in 0..is.n() {
                let gplane = go.plane(n, co);
                for cl in 0..cin_g {
                    let src = input.plane(n, grp * cin_g + cl);
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                if iy < 0 || iy >= h {
                                    continue;
                                }
                                let base = iy as usize * w as usize;
                                for ox in 0..wo {
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if ix >= 0 && ix < w {
                                        acc += gplane[oy * wo + ox] * src[base + ix as usize];
                                    }
                                }
                            }
                            kslab[(cl * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        });

    let gb = bias_grad(go);
    (gi, gk, gb)
}

/// Sums a gradient over batch and space, giving a `(1, C, 1, 1)` bias gradient.
fn bias_grad(go: &Tensor) -> Tensor {
    let s = go.shape();
    let mut gb = Tensor::zeros(Shape::new(1, s.c(), 1, 1));
    for n in 0..s.n() {
        for c in 0..s.c() {
            gb.data_mut()[c] += go.plane(n, c).iter().sum::<f64>();
        }
    }
    gb
}

pub fn conv2d(tape: &mut Tape, input: Var, kernel: Var, bias: Var, g: ConvGeometry) -> Result<Var> {
    let out = conv2d_forward(tape.value(input), tape.value(kernel), tape.value(bias), g)?;
    let (x, k) = (tape.value_rc(input), tape.value_rc(kernel));
    Ok(tape.record1(
        &[input, kernel, bias],
        out,
        Box::new(move |gs| {
            let (gi, gk, gb) = conv2d_backward(&x, &k, gs[0].unwrap(), g);
            vec![Some(gi), Some(gk), Some(gb)]
        }),
    ))
}

pub fn pointwise_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "pointwise_conv";
    let is = input.shape();
    let ws = weight.shape();
    if ws.h() != 1 || ws.w() != 1 {
        return shape_err(OP, format!("weight must be C_out x C_in x 1 x 1, got {ws}"));
    }
    if ws.c() != is.c() {
        return shape_err(OP, format!("weight expects C_in={}, input has C={}", ws.c(), is.c()));
    }
    expect_channel_vector(bias, ws.n(), OP, "bias")?;
    let cin = is.c();
    let cout = ws.n();
    let p = is.plane();
    let mut out = Tensor::zeros(is.with_c(cout));
    out.data_mut()
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(idx, plane)| {
            let n = idx / cout;
            let co = idx % cout;
            plane.fill(bias.data()[co]);
            for ci in 0..cin {
                let wv = weight.data()[co * cin + ci];
                if wv == 0.0 {
                    continue;
                }
                for (o, &x) in plane.iter_mut().zip(input.plane(n, ci)) {
                    *o += wv * x;
                }
            }
        });
    Ok(out)
}

/// Per-pixel linear map over channels (a 1x1 convolution).
pub fn pointwise_conv(tape: &mut Tape, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let out = pointwise_forward(tape.value(input), tape.value(weight), tape.value(bias))?;
    let (x, wt) = (tape.value_rc(input), tape.value_rc(weight));
    Ok(tape.record1(
        &[input, weight, bias],
        out,
        Box::new(move |gs| {
            let go = gs[0].unwrap();
            let (x, wt): (&Tensor, &Tensor) = (&x, &wt);
            let is = x.shape();
            let (cin, cout) = (is.c(), wt.shape().n());
            let p = is.plane();
            let mut gi = Tensor::zeros(is);
            gi.data_mut()
                .par_chunks_mut(p)
                .enumerate()
                .for_each(|(idx, plane)| {
                    let n = idx / cin;
                    let ci = idx % cin;
                    for co in 0..cout {
                        let wv = wt.data()[co * cin + ci];
                        for (o, &g) in plane.iter_mut().zip(go.plane(n, co)) {
                            *o += wv * g;
                        }
                    }
                });
            let mut gw = Tensor::zeros(wt.shape());
            gw.data_mut()
                .par_chunks_mut(cin)
                .enumerate()
                .for_each(|(co, row)| {
                    for n in 0..is.n() {
                        let gp = go.plane(n, co);
                        for (ci, r) in row.iter_mut().enumerate() {
                            *r += gp.iter().zip(x.plane(n, ci)).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
            vec![Some(gi), Some(gw), Some(bias_grad(go))]
        }),
    ))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `x * sigmoid(x)` elementwise.
pub fn silu(tape: &mut Tape, input: Var) -> Var {
    let out = tape.value(input).map(silu_scalar);
    let x = tape.value_rc(input);
    tape.record1(
        &[input],
        out,
        Box::new(move |gs| {
            let g = gs[0].unwrap();
            let gi = x
                .zip_with(g, |v, gv| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })
                .unwrap();
            vec![Some(gi)]
        }),
    )
}

/// Normalizes over channels independently at every `(n, y, x)` location,
/// then applies the per-channel affine `gamma`, `beta`.
pub fn layer_norm(tape: &mut Tape, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    const OP: &str = "layer_norm";
    if eps.is_nan() || eps <= 0.0 {
        return arg_err(OP, format!("eps must be > 0, got {eps}"));
    }
    let x = tape.value_rc(input);
    let s = x.shape();
    let gm = tape.value_rc(gamma);
    let bt = tape.value(beta);
    expect_channel_vector(&gm, s.c(), OP, "gamma")?;
    expect_channel_vector(bt, s.c(), OP, "beta")?;
    let (c, p) = (s.c(), s.plane());
    let mut xhat = Tensor::zeros(s);
    let mut rstd = vec![0.0; s.n() * p];
    for n in 0..s.n() {
        for i in 0..p {
            let mut mean = 0.0;
            for ch in 0..c {
                mean += x.data()[(n * c + ch) * p + i];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ch in 0..c {
                let d = x.data()[(n * c + ch) * p + i] - mean;
                var += d * d;
            }
            var /= c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[n * p + i] = r;
            for ch in 0..c {
                let o = (n * c + ch) * p + i;
                xhat.data_mut()[o] = (x.data()[o] - mean) * r;
            }
        }
    }
    let mut out = xhat.clone();
    for n in 0..s.n() {
        for ch in 0..c {
            let (gv, bv) = (gm.data()[ch], bt.data()[ch]);
            for v in out.plane_mut(n, ch) {
                *v = *v * gv + bv;
            }
        }
    }
    Ok(tape.record1(
        &[input, gamma, beta],
        out,
        Box::new(move |gs| {
            let go = gs[0].unwrap();
            let mut gi = Tensor::zeros(s);
            let mut gg = Tensor::zeros(Shape::new(1, c, 1, 1));
            let mut gb = Tensor::zeros(Shape::new(1, c, 1, 1));
            for n in 0..s.n() {
                for i in 0..p {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for ch in 0..c {
                        let o = (n * c + ch) * p + i;
                        let gx = go.data()[o] * gm.data()[ch];
                        m1 += gx;
                        m2 += gx * xhat.data()[o];
                        gg.data_mut()[ch] += go.data()[o] * xhat.data()[o];
                        gb.data_mut()[ch] += go.data()[o];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let r = rstd[n * p + i];
                    for ch in 0..c {
                        let o = (n * c + ch) * p + i;
                        let gx = go.data()[o] * gm.data()[ch];
                        gi.data_mut()[o] = r * (gx - m1 - xhat.data()[o] * m2);
                    }
                }
            }
            vec![Some(gi), Some(gg), Some(gb)]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

pub fn elementwise(tape: &mut Tape, op: Elementwise, a: Var, b: Var) -> Result<Var> {
    match op {
        Elementwise::Add => add(tape, a, b),
        Elementwise::Mul => mul(tape, a, b),
    }
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let out = tape.value(a).zip_with(tape.value(b), |x, y| x + y)?;
    Ok(tape.record1(
        &[a, b],
        out,
        Box::new(|gs| vec![gs[0].cloned(), gs[0].cloned()]),
    ))
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let out = tape.value(a).zip_with(tape.value(b), |x, y| x - y)?;
    Ok(tape.record1(
        &[a, b],
        out,
        Box::new(|gs| vec![gs[0].cloned(), gs[0].map(|g| g.scale(-1.0))]),
    ))
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let out = tape.value(a).zip_with(tape.value(b), |x, y| x * y)?;
    let (av, bv) = (tape.value_rc(a), tape.value_rc(b));
    Ok(tape.record1(
        &[a, b],
        out,
        Box::new(move |gs| {
            let g = gs[0].unwrap();
            vec![
                Some(g.zip_with(&bv, |x, y| x * y).unwrap()),
                Some(g.zip_with(&av, |x, y| x * y).unwrap()),
            ]
        }),
    ))
}

pub fn scale(tape: &mut Tape, a: Var, k: f64) -> Var {
    let out = tape.value(a).scale(k);
    tape.record1(&[a], out, Box::new(move |gs| vec![gs[0].map(|g| g.scale(k))]))
}

pub fn concat_channels(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let vals: Vec<&Tensor> = parts.iter().map(|&v| tape.value(v)).collect();
    let out = Tensor::concat_channels(&vals)?;
    let widths: Vec<usize> = vals.iter().map(|t| t.shape().c()).collect();
    Ok(tape.record1(
        parts,
        out,
        Box::new(move |gs| {
            let g = gs[0].unwrap();
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let part = g.slice_channels(start, w).unwrap();
                    start += w;
                    Some(part)
                })
                .collect()
        }),
    ))
}

pub fn slice_channels(tape: &mut Tape, input: Var, start: usize, len: usize) -> Result<Var> {
    let out = tape.value(input).slice_channels(start, len)?;
    let s = tape.value(input).shape();
    Ok(tape.record1(
        &[input],
        out,
        Box::new(move |gs| {
            let g = gs[0].unwrap();
            let mut gi = Tensor::zeros(s);
            for n in 0..s.n() {
                for c in 0..len {
                    gi.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                }
            }
            vec![Some(gi)]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    /// 2x2 mean pooling.
    Down2,
    /// Nearest-neighbour duplication.
    Up2,
}

pub fn down2_forward(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 {
        return shape_err("resize(down2)", format!("H={} and W={} must be even", s.h(), s.w()));
    }
    let os = s.with_hw(s.h() / 2, s.w() / 2);
    Ok(Tensor::from_fn(os, |n, c, y, xx| {
        0.25 * (x.at(n, c, 2 * y, 2 * xx)
            + x.at(n, c, 2 * y, 2 * xx + 1)
            + x.at(n, c, 2 * y + 1, 2 * xx)
            + x.at(n, c, 2 * y + 1, 2 * xx + 1))
    }))
}

pub fn up2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s.with_hw(2 * s.h(), 2 * s.w()), |n, c, y, xx| x.at(n, c, y / 2, xx / 2))
}

pub fn resize(tape: &mut Tape, input: Var, mode: Resize) -> Result<Var> {
    match mode {
        Resize::Down2 => {
            let out = down2_forward(tape.value(input))?;
            Ok(tape.record1(
                &[input],
                out,
                Box::new(|gs| vec![Some(up2_forward(gs[0].unwrap()).scale(0.25))]),
            ))
        }
        Resize::Up2 => {
            let out = up2_forward(tape.value(input));
            Ok(tape.record1(
                &[input],
                out,
                Box::new(|gs| vec![Some(down2_forward(gs[0].unwrap()).unwrap().scale(4.0))]),
            ))
        }
    }
}

/// Sum of all entries as a scalar.
pub fn sum(tape: &mut Tape, input: Var) -> Var {
    let s = tape.value(input).shape();
    let out = Tensor::scalar(tape.value(input).sum());
    tape.record1(
        &[input],
        out,
        Box::new(move |gs| vec![Some(Tensor::full(s, gs[0].unwrap().data()[0]))]),
    )
}

/// `sum(a * w)` for a constant weighting tensor `w`; the usual probe loss
/// for gradient checks.
pub fn weighted_sum(tape: &mut Tape, input: Var, weights: &Tensor) -> Result<Var> {
    let prod = tape.value(input).zip_with(weights, |a, b| a * b)?;
    let w = weights.clone();
    Ok(tape.record1(
        &[input],
        Tensor::scalar(prod.sum()),
        Box::new(move |gs| vec![Some(w.scale(gs[0].unwrap().data()[0]))]),
    ))
}

/// `mean(|a - b|)` as a scalar; the subgradient of `|0|` is taken as 0.
pub fn l1_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.value(a).zip_with(tape.value(b), |x, y| x - y)?;
    let n = diff.numel() as f64;
    let out = Tensor::scalar(diff.data().iter().map(|d| d.abs()).sum::<f64>() / n);
    Ok(tape.record1(
        &[a, b],
        out,
        Box::new(move |gs| {
            let g = gs[0].unwrap().data()[0] / n;
            let ga = diff.map(|d| if d > 0.0 { g } else if d < 0.0 { -g } else { 0.0 });
            let gb = ga.scale(-1.0);
            vec![Some(ga), Some(gb)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, grad_check_many, Coords};

    fn t(shape: Shape, data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn run_conv(x: Tensor, k: Tensor, b: Tensor, g: ConvGeometry) -> Tensor {
        let mut tape = Tape::new();
        let (x, k, b) = (tape.constant(x), tape.constant(k), tape.constant(b));
        let y = conv2d(&mut tape, x, k, b, g).unwrap();
        tape.value(y).clone()
    }

    const PLAIN: ConvGeometry = ConvGeometry {
        stride: 1,
        padding: 0,
        groups: 1,
    };

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = run_conv(
            x.clone(),
            Tensor::full(Shape::new(1, 1, 1, 1), 1.0),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            PLAIN,
        );
        assert_eq!(y, x);
        let r = Tensor::randn(Shape::new(2, 1, 5, 4), 1.0, 4);
        let y = run_conv(
            r.clone(),
            Tensor::full(Shape::new(1, 1, 1, 1), 1.0),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            PLAIN,
        );
        assert_eq!(y, r);
    }

    #[test]
    fn conv_hand_sum() {
        let y = run_conv(
            t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]),
            Tensor::full(Shape::new(1, 1, 2, 2), 1.0),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
            PLAIN,
        );
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn depthwise_ones_on_constant_interior() {
        let c = 3;
        let x = Tensor::from_fn(Shape::new(1, c, 5, 5), |_, ch, _, _| ch as f64 + 1.0);
        let y = run_conv(
            x,
            Tensor::full(Shape::new(c, 1, 3, 3), 1.0),
            Tensor::zeros(Shape::new(1, c, 1, 1)),
            ConvGeometry::depthwise(3, c),
        );
        for ch in 0..c {
            for yy in 1..4 {
                for xx in 1..4 {
                    assert_eq!(y.at(0, ch, yy, xx), 9.0 * (ch as f64 + 1.0));
                }
            }
            assert_eq!(y.at(0, ch, 0, 0), 4.0 * (ch as f64 + 1.0));
        }
    }

    #[test]
    fn conv_output_size_with_stride() {
        let y = run_conv(
            Tensor::zeros(Shape::new(1, 2, 7, 6)),
            Tensor::zeros(Shape::new(4, 2, 3, 3)),
            Tensor::zeros(Shape::new(1, 4, 1, 1)),
            ConvGeometry {
                stride: 2,
                padding: 1,
                groups: 1,
            },
        );
        assert_eq!(y.shape(), Shape::new(1, 4, 4, 3));
    }

    #[test]
    fn conv_shape_errors_name_dimension() {
        let err = conv2d_forward(
            &Tensor::zeros(Shape::new(1, 3, 4, 4)),
            &Tensor::zeros(Shape::new(2, 2, 3, 3)),
            &Tensor::zeros(Shape::new(1, 2, 1, 1)),
            PLAIN,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("kernel dim 1"), "{err}");
        let err = conv2d_forward(
            &Tensor::zeros(Shape::new(1, 3, 4, 4)),
            &Tensor::zeros(Shape::new(3, 1, 3, 3)),
            &Tensor::zeros(Shape::new(1, 3, 1, 1)),
            ConvGeometry {
                stride: 1,
                padding: 1,
                groups: 2,
            },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("C_in=3"), "{err}");
    }

    fn run_pw(x: Tensor, w: Tensor, b: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let y = pointwise_conv(&mut tape, x, w, b)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn pointwise_cases() {
        let x = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, 5);
        let eye = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| (o == i) as u8 as f64);
        assert_eq!(run_pw(x.clone(), eye, Tensor::zeros(Shape::new(1, 3, 1, 1))).unwrap(), x);
        let z = run_pw(
            x.clone(),
            Tensor::zeros(Shape::new(3, 3, 1, 1)),
            Tensor::zeros(Shape::new(1, 3, 1, 1)),
        )
        .unwrap();
        assert_eq!(z, Tensor::zeros(x.shape()));

        let ab = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, 6);
        let s = run_pw(
            ab.clone(),
            Tensor::full(Shape::new(1, 2, 1, 1), 1.0),
            Tensor::zeros(Shape::new(1, 1, 1, 1)),
        )
        .unwrap();
        for i in 0..9 {
            assert_eq!(s.data()[i], ab.data()[i] + ab.data()[9 + i]);
        }
        assert!(run_pw(
            ab,
            Tensor::zeros(Shape::new(1, 3, 1, 1)),
            Tensor::zeros(Shape::new(1, 1, 1, 1))
        )
        .is_err());
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(20.0) - 20.0).abs() < 1e-6);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((silu_scalar(1.0) - expected).abs() < 1e-15);
        assert!((silu_scalar(1.0) - 0.731_058_578_6).abs() < 1e-9);
    }

    fn run_ln(x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (x, g, b) = (tape.constant(x), tape.constant(gamma), tape.constant(beta));
        let y = layer_norm(&mut tape, x, g, b, eps)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn layer_norm_cases() {
        let cs = Shape::new(1, 2, 1, 1);
        let y = run_ln(Tensor::full(Shape::new(1, 2, 3, 3), 5.0), Tensor::full(cs, 1.0), Tensor::zeros(cs), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, 8);
        let b = t(cs, &[0.5, -1.5]);
        let y = run_ln(x, Tensor::zeros(cs), b, 1e-5).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.5));

        let y = run_ln(t(Shape::new(1, 2, 1, 1), &[1.0, 3.0]), Tensor::full(cs, 1.0), Tensor::zeros(cs), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        assert!(run_ln(Tensor::zeros(Shape::new(1, 2, 1, 1)), Tensor::full(cs, 1.0), Tensor::zeros(cs), 0.0).is_err());
    }

    #[test]
    fn resize_and_elementwise() {
        let c = Tensor::full(Shape::new(1, 2, 4, 4), 3.25);
        assert_eq!(up2_forward(&down2_forward(&c).unwrap()), c);
        assert!(down2_forward(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, 1));
        let z = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let m = elementwise(&mut tape, Elementwise::Mul, x, z).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 5)));
        assert!(add(&mut tape, x, bad).is_err());
    }

    #[test]
    fn gradients_of_basic_ops() {
        let s = Shape::new(1, 2, 8, 8);
        let a = Tensor::randn(s, 1.0, 11);
        let b = Tensor::randn(s, 1.0, 12);
        let probe = Tensor::randn(s, 1.0, 13);
        let probe2 = Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 14);
        let all = Coords::All;

        let r = grad_check_many(
            |t, v| {
                let y = add(t, v[0], v[1])?;
                weighted_sum(t, y, &probe)
            },
            &[a.clone(), b.clone()],
            1e-5,
            all,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "add {r:?}");

        let r = grad_check_many(
            |t, v| {
                let y = mul(t, v[0], v[1])?;
                weighted_sum(t, y, &probe)
            },
            &[a.clone(), b.clone()],
            1e-5,
            all,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "mul {r:?}");

        let r = grad_check_many(
            |t, v| {
                let y = concat_channels(t, &[v[0], v[1]])?;
                weighted_sum(t, y, &probe2)
            },
            &[a.clone(), b.clone()],
            1e-5,
            all,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "concat {r:?}");

        let k = Tensor::randn(Shape::new(3, 2, 3, 3), 0.5, 15);
        let bias = Tensor::randn(Shape::new(1, 3, 1, 1), 0.5, 16);
        let probe3 = Tensor::randn(Shape::new(1, 3, 4, 4), 1.0, 17);
        let r = grad_check_many(
            |t, v| {
                let y = conv2d(
                    t,
                    v[0],
                    v[1],
                    v[2],
                    ConvGeometry {
                        stride: 2,
                        padding: 1,
                        groups: 1,
                    },
                )?;
                weighted_sum(t, y, &probe3)
            },
            &[a.clone(), k, bias],
            1e-5,
            all,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "conv {r:?}");

        let dk = Tensor::randn(Shape::new(2, 1, 3, 3), 0.5, 18);
        let db = Tensor::randn(Shape::new(1, 2, 1, 1), 0.5, 19);
        let r = grad_check_many(
            |t, v| {
                let y = conv2d(t, v[0], v[1], v[2], ConvGeometry::depthwise(3, 2))?;
                weighted_sum(t, y, &probe)
            },
            &[a.clone(), dk, db],
            1e-5,
            all,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "dwconv {r:?}");

        let x3 = Tensor::randn(Shape::new(1, 3, 8, 8), 1.0, 22);
        let g3 = Tensor::randn(Shape::new(1, 3, 1, 1), 1.0, 23);
        let b3 = Tensor::randn(Shape::new(1, 3, 1, 1), 1.0, 24);
        let probe4 = Tensor::randn(Shape::new(1, 3, 8, 8), 1.0, 25);
        let r = grad_check_many(
            |t, v| {
                let y = layer_norm(t, v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &probe4)
            },
            &[x3, g3, b3],
            1e-5,
            all,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "layer_norm {r:?}");

        let r = grad_check(
            |t, v| {
                let d = resize(t, v, Resize::Down2)?;
                let u = resize(t, d, Resize::Up2)?;
                let u2 = resize(t, u, Resize::Up2)?;
                let d2 = resize(t, u2, Resize::Down2)?;
                weighted_sum(t, d2, &probe)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(r < 1e-6, "resize {r}");
    }

    #[test]
    fn silu_after_pointwise_gradcheck() {
        let x = Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 30);
        let w = Tensor::randn(Shape::new(3, 4, 1, 1), 0.5, 31);
        let b = Tensor::randn(Shape::new(1, 3, 1, 1), 0.5, 32);
        let probe = Tensor::randn(Shape::new(1, 3, 8, 8), 1.0, 33);
        let r = grad_check_many(
            |t, v| {
                let y = pointwise_conv(t, v[0], v[1], v[2])?;
                let y = silu(t, y);
                weighted_sum(t, y, &probe)
            },
            &[x, w, b],
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
