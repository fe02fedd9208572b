//! 2D traversal orders and the selective state-space scan.
//!
//! A traversal flattens a feature map into a sequence of length `H*W`
//! (one channel vector per step), runs the selective recurrence
//!
//! ```text
//! B_t = W_B u_t,  C_t = W_C u_t,  delta_t = softplus(w_delta . u_t + b_delta)
//! h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * u_t        (h_0 = 0)
//! y_t = <C_t, h_t> + D * u_t
//! ```
//!
//! per channel, and scatters the outputs back to their pixels. `A = -exp(A_log)`
//! keeps every mode decaying. The input matrix uses the first-order
//! `delta * B` discretization while the state transition keeps the exact
//! exponential.

use std::cell::RefCell;
use std::rc::Rc;

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::ops::{self, sigmoid};
use crate::params::{Bound, Conv, Norm, ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::wavelet::PacketGrid;

/// A traversal of an `H x W` grid: `forward[t]` is the flat pixel index
/// visited at step `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanOrder {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub forward: Vec<usize>,
}

impl ScanOrder {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// The same path walked backwards.
    pub fn reversed(&self) -> ScanOrder {
        ScanOrder {
            name: format!("{}-rev", self.name),
            height: self.height,
            width: self.width,
            forward: self.forward.iter().rev().copied().collect(),
        }
    }

    pub fn is_bijection(&self) -> bool {
        let n = self.height * self.width;
        if self.forward.len() != n {
            return false;
        }
        let mut seen = vec![false; n];
        for &p in &self.forward {
            if p >= n || seen[p] {
                return false;
            }
            seen[p] = true;
        }
        true
    }

    /// `rank[pixel]` = step at which the pixel is visited.
    pub fn visit_rank(&self) -> Vec<usize> {
        let mut rank = vec![0; self.forward.len()];
        for (t, &p) in self.forward.iter().enumerate() {
            rank[p] = t;
        }
        rank
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Fwd,
    Rev,
}

/// Row-major or column-major traversal, optionally reversed.
pub fn order_raster(h: usize, w: usize, axis: Axis, dir: Direction) -> ScanOrder {
    let forward: Vec<usize> = match axis {
        Axis::Row => (0..h * w).collect(),
        Axis::Col => (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect(),
    };
    let base = ScanOrder {
        name: match axis {
            Axis::Row => "row".into(),
            Axis::Col => "col".into(),
        },
        height: h,
        width: w,
        forward,
    };
    match dir {
        Direction::Fwd => base,
        Direction::Rev => base.reversed(),
    }
}

/// Frequency-ordered traversal of a k-level wavelet packet mosaic.
///
/// The mosaic splits into four quadrant blocks (the LL, LH, HL and HH
/// groups of the first level), visited in that order. Inside a block the
/// band tiles follow their recursive frequency order, and inside a tile
/// pixels go row-major, so band ranks never decrease along the path.
pub fn order_freq_blocks(h: usize, w: usize, k: usize) -> Result<ScanOrder> {
    if k == 0 {
        return arg_err("order_freq_blocks", "levels must be >= 1");
    }
    let side = 1 << k;
    if h % side != 0 || w % side != 0 {
        return shape_err(
            "order_freq_blocks",
            format!("H={h} and W={w} must be divisible by 2^{k}={side}"),
        );
    }
    let (th, tw) = (h / side, w / side);
    let mut forward = Vec::with_capacity(h * w);
    for band in 0..PacketGrid::band_count(k) {
        let (tr, tc) = PacketGrid::tile_position(k, band);
        for y in 0..th {
            for x in 0..tw {
                forward.push((tr * th + y) * w + tc * tw + x);
            }
        }
    }
    Ok(ScanOrder {
        name: format!("freq{k}"),
        height: h,
        width: w,
        forward,
    })
}

/// Band index of every step of a frequency-block order.
pub fn band_rank_sequence(order: &ScanOrder, k: usize) -> Vec<usize> {
    let side = 1 << k;
    let (th, tw) = (order.height / side, order.width / side);
    order
        .forward
        .iter()
        .map(|&p| PacketGrid::band_at_tile(k, (p / order.width) / th, (p % order.width) / tw))
        .collect()
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Plain-data selective SSM parameters for `channels` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub state_dim: usize,
    pub channels: usize,
    /// `channels x state_dim`, row-major; `A = -exp(a_log)`.
    pub a_log: Vec<f64>,
    /// Skip coefficient per channel.
    pub d: Vec<f64>,
    /// `state_dim x channels`.
    pub proj_b: Vec<f64>,
    /// `state_dim x channels`.
    pub proj_c: Vec<f64>,
    /// `channels`; rank-one projection to the pre-softplus step size.
    pub proj_delta: Vec<f64>,
    pub delta_bias: f64,
}

impl SsmParams {
    pub fn shapes(channels: usize, state_dim: usize) -> [Shape; 6] {
        [
            Shape::new(1, 1, channels, state_dim),
            Shape::new(1, 1, 1, channels),
            Shape::new(1, 1, state_dim, channels),
            Shape::new(1, 1, state_dim, channels),
            Shape::new(1, 1, 1, channels),
            Shape::new(1, 1, 1, 1),
        ]
    }

    pub fn from_tensors(t: [&Tensor; 6]) -> Result<Self> {
        let channels = t[1].numel();
        let state_dim = t[0].shape().w();
        let expected = Self::shapes(channels, state_dim);
        for (i, (tensor, shape)) in t.iter().zip(expected).enumerate() {
            if tensor.shape() != shape {
                return shape_err(
                    "SsmParams",
                    format!("parameter {i} has shape {}, expected {shape}", tensor.shape()),
                );
            }
        }
        Ok(SsmParams {
            state_dim,
            channels,
            a_log: t[0].data().to_vec(),
            d: t[1].data().to_vec(),
            proj_b: t[2].data().to_vec(),
            proj_c: t[3].data().to_vec(),
            proj_delta: t[4].data().to_vec(),
            delta_bias: t[5].data()[0],
        })
    }

    pub fn to_tensors(&self) -> [Tensor; 6] {
        let s = Self::shapes(self.channels, self.state_dim);
        [
            Tensor::new(s[0], self.a_log.clone()).unwrap(),
            Tensor::new(s[1], self.d.clone()).unwrap(),
            Tensor::new(s[2], self.proj_b.clone()).unwrap(),
            Tensor::new(s[3], self.proj_c.clone()).unwrap(),
            Tensor::new(s[4], self.proj_delta.clone()).unwrap(),
            Tensor::new(s[5], vec![self.delta_bias]).unwrap(),
        ]
    }

    /// `A = -exp(a_log)`, always strictly negative.
    pub fn a(&self) -> Vec<f64> {
        self.a_log.iter().map(|v| -v.exp()).collect()
    }
}

/// Per-sequence intermediates kept for the backward pass.
struct ScanCache {
    /// `L x C x S`
    abar: Vec<f64>,
    /// `L x C x S`
    h: Vec<f64>,
    /// `L`
    delta: Vec<f64>,
    z: Vec<f64>,
    /// `L x S`
    b: Vec<f64>,
    c: Vec<f64>,
}

/// Runs the recurrence over a sequence `u` laid out `L x C`.
fn scan_sequence(u: &[f64], p: &SsmParams, a: &[f64], keep: bool) -> (Vec<f64>, Option<ScanCache>) {
    let (ch, st) = (p.channels, p.state_dim);
    let l = u.len() / ch;
    let mut y = vec![0.0; l * ch];
    let mut h = vec![0.0; ch * st];
    let mut bt = vec![0.0; st];
    let mut ct = vec![0.0; st];
    let mut cache = keep.then(|| ScanCache {
        abar: vec![0.0; l * ch * st],
        h: vec![0.0; l * ch * st],
        delta: vec![0.0; l],
        z: vec![0.0; l],
        b: vec![0.0; l * st],
        c: vec![0.0; l * st],
    });
    for t in 0..l {
        let ut = &u[t * ch..(t + 1) * ch];
        let mut z = p.delta_bias;
        for (w, x) in p.proj_delta.iter().zip(ut) {
            z += w * x;
        }
        let delta = softplus(z);
        for s in 0..st {
            let row = s * ch;
            let (mut sb, mut sc) = (0.0, 0.0);
            for c in 0..ch {
                sb += p.proj_b[row + c] * ut[c];
                sc += p.proj_c[row + c] * ut[c];
            }
            bt[s] = sb;
            ct[s] = sc;
        }
        let yt = &mut y[t * ch..(t + 1) * ch];
        for c in 0..ch {
            let mut acc = 0.0;
            let du = delta * ut[c];
            for s in 0..st {
                let i = c * st + s;
                let ab = (delta * a[i]).exp();
                h[i] = ab * h[i] + du * bt[s];
                acc += ct[s] * h[i];
                if let Some(cache) = cache.as_mut() {
                    cache.abar[t * ch * st + i] = ab;
                }
            }
            yt[c] = acc + p.d[c] * ut[c];
        }
        if let Some(cache) = cache.as_mut() {
            cache.h[t * ch * st..(t + 1) * ch * st].copy_from_slice(&h);
            cache.delta[t] = delta;
            cache.z[t] = z;
            cache.b[t * st..(t + 1) * st].copy_from_slice(&bt);
            cache.c[t * st..(t + 1) * st].copy_from_slice(&ct);
        }
    }
    (y, cache)
}

/// Gradients of one sequence scan.
struct ScanGrads {
    u: Vec<f64>,
    a_log: Vec<f64>,
    d: Vec<f64>,
    proj_b: Vec<f64>,
    proj_c: Vec<f64>,
    proj_delta: Vec<f64>,
    delta_bias: f64,
}

fn scan_sequence_backward(u: &[f64], gy: &[f64], p: &SsmParams, a: &[f64], cache: &ScanCache) -> ScanGrads {
    let (ch, st) = (p.channels, p.state_dim);
    let l = u.len() / ch;
    let mut g = ScanGrads {
        u: vec![0.0; l * ch],
        a_log: vec![0.0; ch * st],
        d: vec![0.0; ch],
        proj_b: vec![0.0; st * ch],
        proj_c: vec![0.0; st * ch],
        proj_delta: vec![0.0; ch],
        delta_bias: 0.0,
    };
    let mut ga = vec![0.0; ch * st];
    let mut carry = vec![0.0; ch * st];
    let mut gb = vec![0.0; st];
    let mut gc = vec![0.0; st];
    let zero_state = vec![0.0; ch * st];
    for t in (0..l).rev() {
        let ut = &u[t * ch..(t + 1) * ch];
        let gyt = &gy[t * ch..(t + 1) * ch];
        let ht = &cache.h[t * ch * st..(t + 1) * ch * st];
        let hprev = if t > 0 {
            &cache.h[(t - 1) * ch * st..t * ch * st]
        } else {
            &zero_state[..]
        };
        let abar = &cache.abar[t * ch * st..(t + 1) * ch * st];
        let bt = &cache.b[t * st..(t + 1) * st];
        let ct = &cache.c[t * st..(t + 1) * st];
        let delta = cache.delta[t];
        gb.fill(0.0);
        gc.fill(0.0);
        let mut gdelta = 0.0;
        let gut = &mut g.u[t * ch..(t + 1) * ch];
        for c in 0..ch {
            let gyc = gyt[c];
            g.d[c] += gyc * ut[c];
            let mut gu = gyc * p.d[c];
            let uc = ut[c];
            for s in 0..st {
                let i = c * st + s;
                gc[s] += gyc * ht[i];
                let gh = gyc * ct[s] + carry[i];
                let gda = gh * hprev[i] * abar[i];
                gdelta += gda * a[i] + gh * bt[s] * uc;
                ga[i] += gda * delta;
                gb[s] += gh * delta * uc;
                gu += gh * delta * bt[s];
                carry[i] = gh * abar[i];
            }
            gut[c] = gu;
        }
        let gz = gdelta * sigmoid(cache.z[t]);
        g.delta_bias += gz;
        for c in 0..ch {
            g.proj_delta[c] += gz * ut[c];
            gut[c] += gz * p.proj_delta[c];
        }
        for s in 0..st {
            let row = s * ch;
            for c in 0..ch {
                g.proj_b[row + c] += gb[s] * ut[c];
                g.proj_c[row + c] += gc[s] * ut[c];
                gut[c] += p.proj_b[row + c] * gb[s] + p.proj_c[row + c] * gc[s];
            }
        }
    }
    for (gl, (gai, ai)) in g.a_log.iter_mut().zip(ga.iter().zip(a)) {
        *gl = gai * ai;
    }
    g
}

/// Selective scan of a single sequence stored as a `1 x 1 x L x C` tensor.
pub fn selective_scan(u: &Tensor, params: &SsmParams) -> Result<Tensor> {
    check_sequence(u, params)?;
    let (y, _) = scan_sequence(u.data(), params, &params.a(), false);
    Tensor::new(u.shape(), y)
}

/// Like [`selective_scan`], also returning the hidden states as `1 x L x C x S`.
pub fn selective_scan_with_states(u: &Tensor, params: &SsmParams) -> Result<(Tensor, Tensor)> {
    check_sequence(u, params)?;
    let (y, cache) = scan_sequence(u.data(), params, &params.a(), true);
    let l = u.shape().h();
    let states = Tensor::new(Shape::new(1, l, params.channels, params.state_dim), cache.unwrap().h)?;
    Ok((Tensor::new(u.shape(), y)?, states))
}

fn check_sequence(u: &Tensor, params: &SsmParams) -> Result<()> {
    let s = u.shape();
    if s.n() != 1 || s.c() != 1 || s.w() != params.channels || s.h() == 0 {
        return shape_err(
            "selective_scan",
            format!("expected 1x1xLx{} sequence, got {s}", params.channels),
        );
    }
    Ok(())
}

/// Gathers `(n, :, order[t])` into an `L x C` sequence.
pub fn gather_sequence(f: &Tensor, n: usize, order: &[usize]) -> Vec<f64> {
    let s = f.shape();
    let c = s.c();
    let mut seq = vec![0.0; order.len() * c];
    for ch in 0..c {
        let plane = f.plane(n, ch);
        for (t, &p) in order.iter().enumerate() {
            seq[t * c + ch] = plane[p];
        }
    }
    seq
}

/// Inverse of [`gather_sequence`], accumulating into `out` batch `n`.
pub fn scatter_sequence(seq: &[f64], out: &mut Tensor, n: usize, order: &[usize]) {
    let c = out.shape().c();
    for ch in 0..c {
        let plane = out.plane_mut(n, ch);
        for (t, &p) in order.iter().enumerate() {
            plane[p] += seq[t * c + ch];
        }
    }
}

thread_local! {
    static VISIT_LOG: RefCell<Option<Vec<Vec<usize>>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns every traversal permutation consumed by
/// [`scan_traversal`] while it ran, in call order.
pub fn with_visit_log<R>(f: impl FnOnce() -> R) -> (R, Vec<Vec<usize>>) {
    VISIT_LOG.with(|l| *l.borrow_mut() = Some(Vec::new()));
    let r = f();
    let log = VISIT_LOG.with(|l| l.borrow_mut().take()).unwrap_or_default();
    (r, log)
}

fn log_visit(order: &[usize]) {
    VISIT_LOG.with(|l| {
        if let Some(log) = l.borrow_mut().as_mut() {
            log.push(order.to_vec());
        }
    });
}

/// Tape variables of one SSM parameter set, in [`SsmParams::shapes`] order.
#[derive(Debug, Clone, Copy)]
pub struct SsmVars(pub [Var; 6]);

/// One directional scan over a feature map: gather along `order`, run the
/// recurrence, scatter back. Output has the input's shape.
pub fn scan_traversal(tape: &mut Tape, f: Var, params: SsmVars, order: Rc<ScanOrder>) -> Result<Var> {
    let fv = tape.value_rc(f);
    let s = fv.shape();
    if order.len() != s.plane() || order.height != s.h() || order.width != s.w() {
        return shape_err(
            "scan2d",
            format!(
                "order {} covers {}x{}, feature map is {}x{}",
                order.name,
                order.height,
                order.width,
                s.h(),
                s.w()
            ),
        );
    }
    let vals = params.0.map(|v| tape.value(v));
    let p = Rc::new(SsmParams::from_tensors(vals)?);
    if p.channels != s.c() {
        return shape_err(
            "scan2d",
            format!("SSM has {} channels, feature map has {}", p.channels, s.c()),
        );
    }
    log_visit(&order.forward);
    let a = Rc::new(p.a());
    let mut inputs = vec![f];
    inputs.extend(params.0);
    let keep = tape.any_requires_grad(&inputs);

    let results: Vec<(Vec<f64>, Option<ScanCache>)> = {
        let (pr, ar, fr, ord): (&SsmParams, &[f64], &Tensor, &[usize]) = (&p, &a, &fv, &order.forward);
        (0..s.n())
            .into_par_iter()
            .map(|n| scan_sequence(&gather_sequence(fr, n, ord), pr, ar, keep))
            .collect()
    };
    let mut out = Tensor::zeros(s);
    let mut caches = Vec::with_capacity(s.n());
    for (n, (y, cache)) in results.into_iter().enumerate() {
        scatter_sequence(&y, &mut out, n, &order.forward);
        caches.push(cache);
    }
    let param_shapes = SsmParams::shapes(p.channels, p.state_dim);
    Ok(tape.record1(
        &inputs,
        out,
        Box::new(move |gs| {
            let go = gs[0].unwrap();
            let (pr, ar, fr, ord): (&SsmParams, &[f64], &Tensor, &[usize]) = (&p, &a, &fv, &order.forward);
            let per_batch: Vec<ScanGrads> = (0..s.n())
                .into_par_iter()
                .map(|n| {
                    let u = gather_sequence(fr, n, ord);
                    let gy = gather_sequence(go, n, ord);
                    scan_sequence_backward(&u, &gy, pr, ar, caches[n].as_ref().unwrap())
                })
                .collect();
            let mut gf = Tensor::zeros(s);
            let mut acc = [
                vec![0.0; pr.a_log.len()],
                vec![0.0; pr.d.len()],
                vec![0.0; pr.proj_b.len()],
                vec![0.0; pr.proj_c.len()],
                vec![0.0; pr.proj_delta.len()],
                vec![0.0; 1],
            ];
            for (n, g) in per_batch.into_iter().enumerate() {
                scatter_sequence(&g.u, &mut gf, n, ord);
                let parts: [&[f64]; 6] = [&g.a_log, &g.d, &g.proj_b, &g.proj_c, &g.proj_delta, &[g.delta_bias]];
                for (dst, src) in acc.iter_mut().zip(parts) {
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            let mut grads = vec![Some(gf)];
            for (data, shape) in acc.into_iter().zip(param_shapes) {
                grads.push(Some(Tensor::new(shape, data).unwrap()));
            }
            grads
        }),
    ))
}

/// Runs every `(order, params)` traversal over `f` and sums the results.
pub fn scan2d(tape: &mut Tape, f: Var, traversals: &[(Rc<ScanOrder>, SsmVars)]) -> Result<Var> {
    let Some(((first_order, first_params), rest)) = traversals.split_first() else {
        return arg_err("scan2d", "at least one traversal is required");
    };
    let mut acc = scan_traversal(tape, f, *first_params, Rc::clone(first_order))?;
    for (order, params) in rest {
        let y = scan_traversal(tape, f, *params, Rc::clone(order))?;
        acc = ops::add(tape, acc, y)?;
    }
    Ok(acc)
}

/// Stored parameters of one SSM.
#[derive(Debug, Clone)]
pub struct SsmLayer {
    pub ids: [ParamId; 6],
}

pub const DEFAULT_STATE_DIM: usize = 8;

impl SsmLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize) -> Self {
        let shapes = SsmParams::shapes(channels, state_dim);
        // A = -(s + 1) per state; step size starts near 0.05
        let a_log = Tensor::from_fn(shapes[0], |_, _, _, s| ((s + 1) as f64).ln());
        let proj_std = 1.0 / (channels as f64).sqrt();
        let ids = [
            store.add(format!("{name}.a_log"), a_log),
            store.add_const(format!("{name}.d"), shapes[1], 1.0),
            store.add_randn(format!("{name}.proj_b"), shapes[2], proj_std),
            store.add_randn(format!("{name}.proj_c"), shapes[3], proj_std),
            store.add_randn(format!("{name}.proj_delta"), shapes[4], 0.1 * proj_std),
            store.add_const(format!("{name}.delta_bias"), shapes[5], (0.05f64.exp() - 1.0).ln()),
        ];
        SsmLayer { ids }
    }

    pub fn vars(&self, p: &Bound) -> SsmVars {
        SsmVars(self.ids.map(|id| p.var(id)))
    }

    pub fn params(&self, store: &ParamStore) -> SsmParams {
        SsmParams::from_tensors(self.ids.map(|id| store.get(id))).unwrap()
    }

    pub fn set_params(&self, store: &mut ParamStore, p: &SsmParams) -> Result<()> {
        for (id, t) in self.ids.iter().zip(p.to_tensors()) {
            store.set(*id, t)?;
        }
        Ok(())
    }

    /// `C = 0`, `D = 1`: the layer passes its input through.
    pub fn set_skip_only(&self, store: &mut ParamStore) {
        let mut p = self.params(store);
        p.proj_c.iter_mut().for_each(|v| *v = 0.0);
        p.d.iter_mut().for_each(|v| *v = 1.0);
        self.set_params(store, &p).unwrap();
    }
}

/// Which traversal family a [`MambaLayer`] scans with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    /// Row and column raster, both directions (four traversals).
    Spatial,
    /// Frequency-block order over a wavelet mosaic, both directions.
    FrequencyBands { levels: usize },
}

impl ScanKind {
    pub fn traversal_count(self) -> usize {
        match self {
            ScanKind::Spatial => 4,
            ScanKind::FrequencyBands { .. } => 2,
        }
    }

    pub fn orders(self, h: usize, w: usize) -> Result<Vec<ScanOrder>> {
        Ok(match self {
            ScanKind::Spatial => vec![
                order_raster(h, w, Axis::Row, Direction::Fwd),
                order_raster(h, w, Axis::Row, Direction::Rev),
                order_raster(h, w, Axis::Col, Direction::Fwd),
                order_raster(h, w, Axis::Col, Direction::Rev),
            ],
            ScanKind::FrequencyBands { levels } => {
                let f = order_freq_blocks(h, w, levels)?;
                let r = f.reversed();
                vec![f, r]
            }
        })
    }
}

/// Builds the traversal list for a feature map of size `h x w`.
pub fn traversals(kind: ScanKind, layers: &[SsmLayer], p: &Bound, h: usize, w: usize) -> Result<Vec<(Rc<ScanOrder>, SsmVars)>> {
    let orders = kind.orders(h, w)?;
    debug_assert_eq!(orders.len(), layers.len());
    Ok(orders
        .into_iter()
        .zip(layers)
        .map(|(o, l)| (Rc::new(o), l.vars(p)))
        .collect())
}

/// DWConv -> SiLU -> 2D selective scan -> LayerNorm.
#[derive(Debug, Clone)]
pub struct MambaLayer {
    pub kind: ScanKind,
    pub dwconv: Conv,
    pub ssm: Vec<SsmLayer>,
    pub norm: Norm,
}

impl MambaLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize, kind: ScanKind) -> Self {
        let dwconv = Conv::depthwise(store, &format!("{name}.dwconv"), channels, 3);
        let ssm = (0..kind.traversal_count())
            .map(|i| SsmLayer::new(store, &format!("{name}.ssm{i}"), channels, state_dim))
            .collect();
        let norm = Norm::new(store, &format!("{name}.norm"), channels);
        MambaLayer {
            kind,
            dwconv,
            ssm,
            norm,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.forward_as(tape, p, x, self.kind)
    }

    /// Runs the layer with another traversal family of the same size, e.g.
    /// a shallower packet depth on a small feature map.
    pub fn forward_as(&self, tape: &mut Tape, p: &Bound, x: Var, kind: ScanKind) -> Result<Var> {
        if kind.traversal_count() != self.ssm.len() {
            return arg_err(
                "MambaLayer",
                format!("{kind:?} needs {} parameter sets, layer has {}", kind.traversal_count(), self.ssm.len()),
            );
        }
        let s = tape.value(x).shape();
        let y = self.dwconv.forward(tape, p, x)?;
        let y = ops::silu(tape, y);
        let tr = traversals(kind, &self.ssm, p, s.h(), s.w())?;
        let y = scan2d(tape, y, &tr)?;
        self.norm.forward(tape, p, y)
    }
}

/// Spatial Mamba: raster scans in four directions.
pub fn spatial_mamba(tape: &mut Tape, p: &Bound, layer: &MambaLayer, f: Var) -> Result<Var> {
    debug_assert_eq!(layer.kind, ScanKind::Spatial);
    layer.forward(tape, p, f)
}

/// Frequency Mamba: frequency-block scans over a wavelet mosaic.
pub fn freq_mamba(tape: &mut Tape, p: &Bound, layer: &MambaLayer, mosaic: Var) -> Result<Var> {
    debug_assert!(matches!(layer.kind, ScanKind::FrequencyBands { .. }));
    layer.forward(tape, p, mosaic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check_many, Coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription of the recurrence, one step at a time.
    pub(crate) fn naive_scan(u: &[Vec<f64>], p: &SsmParams) -> Vec<Vec<f64>> {
        let (ch, st) = (p.channels, p.state_dim);
        let mut h = vec![vec![0.0; st]; ch];
        let mut ys = Vec::new();
        for ut in u {
            let dot = |w: &[f64]| w.iter().zip(ut).map(|(a, b)| a * b).sum::<f64>();
            let delta = (1.0 + (dot(&p.proj_delta) + p.delta_bias).exp()).ln();
            let b: Vec<f64> = (0..st).map(|s| dot(&p.proj_b[s * ch..(s + 1) * ch])).collect();
            let c: Vec<f64> = (0..st).map(|s| dot(&p.proj_c[s * ch..(s + 1) * ch])).collect();
            let mut y = vec![0.0; ch];
            for k in 0..ch {
                for s in 0..st {
                    let a = -p.a_log[k * st + s].exp();
                    h[k][s] = (delta * a).exp() * h[k][s] + delta * b[s] * ut[k];
                }
                y[k] = (0..st).map(|s| c[s] * h[k][s]).sum::<f64>() + p.d[k] * ut[k];
            }
            ys.push(y);
        }
        ys
    }

    pub(crate) fn random_params(ch: usize, st: usize, rng: &mut ChaCha8Rng) -> SsmParams {
        let mut r = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
        SsmParams {
            state_dim: st,
            channels: ch,
            a_log: r(ch * st, 1.5),
            d: r(ch, 1.0),
            proj_b: r(st * ch, 1.0),
            proj_c: r(st * ch, 1.0),
            proj_delta: r(ch, 0.5),
            delta_bias: r(1, 1.0)[0],
        }
    }

    fn seq_tensor(u: &[Vec<f64>]) -> Tensor {
        let ch = u[0].len();
        Tensor::new(Shape::new(1, 1, u.len(), ch), u.concat()).unwrap()
    }

    #[test]
    fn raster_orders() {
        assert_eq!(order_raster(2, 2, Axis::Row, Direction::Fwd).forward, [0, 1, 2, 3]);
        assert_eq!(order_raster(2, 2, Axis::Col, Direction::Fwd).forward, [0, 2, 1, 3]);
        assert_eq!(order_raster(2, 3, Axis::Col, Direction::Rev).forward, [5, 2, 4, 1, 3, 0]);
        for axis in [Axis::Row, Axis::Col] {
            for dir in [Direction::Fwd, Direction::Rev] {
                assert!(order_raster(4, 4, axis, dir).is_bijection());
            }
        }
    }

    #[test]
    fn freq_orders() {
        assert_eq!(order_freq_blocks(2, 2, 1).unwrap().forward, [0, 1, 2, 3]);
        let o = order_freq_blocks(4, 4, 2).unwrap();
        // LLLL, LLLH, LLHL, LLHH are the 1x1 tiles of the top-left quadrant
        assert_eq!(&o.forward[..4], &[0, 1, 4, 5]);
        assert_eq!(band_rank_sequence(&o, 2), (0..16).collect::<Vec<_>>());
        assert!(o.is_bijection());
        let o8 = order_freq_blocks(8, 8, 2).unwrap();
        assert_eq!(&o8.forward[..4], &[0, 1, 8, 9]);
        assert!(order_freq_blocks(6, 8, 2).is_err());
        let r = o8.reversed();
        assert_eq!(r.forward[0], 63);
    }

    #[test]
    fn skip_only_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = random_params(3, 4, &mut rng);
        p.proj_c.iter_mut().for_each(|v| *v = 0.0);
        p.d = vec![1.0; 3];
        let u: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = selective_scan(&seq_tensor(&u), &p).unwrap();
        assert_eq!(y, seq_tensor(&u));
    }

    #[test]
    fn single_step_by_hand() {
        let p = SsmParams {
            state_dim: 1,
            channels: 1,
            a_log: vec![0.3],
            d: vec![0.7],
            proj_b: vec![1.5],
            proj_c: vec![-0.4],
            proj_delta: vec![0.2],
            delta_bias: 0.1,
        };
        let u = 0.8;
        let delta = (1.0f64 + (0.2 * u + 0.1f64).exp()).ln();
        let (b, c) = (1.5 * u, -0.4 * u);
        let expected = c * (delta * b) * u + 0.7 * u;
        let y = selective_scan(&seq_tensor(&[vec![u]]), &p).unwrap();
        assert!((y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(4, 5, &mut rng);
        let u: Vec<Vec<f64>> = (0..32).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = selective_scan(&seq_tensor(&u), &p).unwrap();
        let r = naive_scan(&u, &p);
        let diff = y.data().iter().zip(r.concat()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn rejects_bad_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(2, 2, &mut rng);
        assert!(selective_scan(&Tensor::zeros(Shape::new(1, 1, 4, 3)), &p).is_err());
    }

    fn scan_store(ch: usize, kind: ScanKind, seed: u64) -> (ParamStore, Vec<SsmLayer>) {
        let mut store = ParamStore::new(seed);
        let layers = (0..kind.traversal_count())
            .map(|i| SsmLayer::new(&mut store, &format!("s{i}"), ch, 4))
            .collect();
        (store, layers)
    }

    #[test]
    fn scan2d_skip_identity_and_symmetry() {
        let (mut store, layers) = scan_store(2, ScanKind::Spatial, 4);
        layers[0].set_skip_only(&mut store);
        let f = Tensor::randn(Shape::new(2, 2, 4, 6), 1.0, 5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let row = Rc::new(order_raster(4, 6, Axis::Row, Direction::Fwd));
        let y = scan2d(&mut tape, fv, &[(Rc::clone(&row), layers[0].vars(&p))]).unwrap();
        assert_eq!(tape.value(y), &f);

        // identical parameters in both directions on a constant image
        let c = Tensor::full(Shape::new(1, 2, 4, 4), 0.5);
        let cv = tape.constant(c);
        let fwd = Rc::new(order_raster(4, 4, Axis::Row, Direction::Fwd));
        let rev = Rc::new(fwd.reversed());
        let v = layers[1].vars(&p);
        let yf = scan2d(&mut tape, cv, &[(Rc::clone(&fwd), v)]).unwrap();
        let yr = scan2d(&mut tape, cv, &[(Rc::clone(&rev), v)]).unwrap();
        let both = scan2d(&mut tape, cv, &[(fwd, v), (rev, v)]).unwrap();
        // the reverse pass sees the same sequence, mapped to mirrored pixels
        let (a, b) = (tape.value(yf).clone(), tape.value(yr).clone());
        for i in 0..16 {
            assert!((a.data()[i] - b.data()[15 - i]).abs() < 1e-15);
        }
        assert!(tape.value(both).max_abs_diff(&a.zip_with(&b, |x, y| x + y).unwrap()) < 1e-15);
        let total_a: f64 = a.sum();
        assert!((tape.value(both).sum() - 2.0 * total_a).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let f = Tensor::randn(Shape::new(2, 3, 4, 4), 1.0, 6);
        let o = order_freq_blocks(4, 4, 2).unwrap();
        let mut out = Tensor::zeros(f.shape());
        for n in 0..2 {
            let seq = gather_sequence(&f, n, &o.forward);
            scatter_sequence(&seq, &mut out, n, &o.forward);
        }
        assert_eq!(out, f);
    }

    #[test]
    fn order_length_mismatch_is_an_error() {
        let (store, layers) = scan_store(2, ScanKind::Spatial, 7);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let fv = tape.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let o = Rc::new(order_raster(4, 5, Axis::Row, Direction::Fwd));
        assert!(scan2d(&mut tape, fv, &[(o, layers[0].vars(&p))]).is_err());
    }

    #[test]
    fn scan_gradients_all_parameter_groups() {
        let ch = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_params(ch, 4, &mut rng);
        let f = Tensor::randn(Shape::new(2, ch, 4, 4), 0.7, 9);
        let probe = Tensor::randn(f.shape(), 1.0, 10);
        let order = Rc::new(order_raster(4, 4, Axis::Col, Direction::Rev));
        let mut inputs = vec![f];
        inputs.extend(params.to_tensors());
        let r = grad_check_many(
            |t, v| {
                let vars = SsmVars([v[1], v[2], v[3], v[4], v[5], v[6]]);
                let y = scan_traversal(t, v[0], vars, Rc::clone(&order))?;
                ops::weighted_sum(t, y, &probe)
            },
            &inputs,
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn mamba_layers_zero_and_parameter_gradients() {
        let mut store = ParamStore::new(11);
        let sp = MambaLayer::new(&mut store, "sp", 4, 4, ScanKind::Spatial);
        let fq = MambaLayer::new(&mut store, "fq", 4, 4, ScanKind::FrequencyBands { levels: 2 });
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let z = tape.constant(Tensor::zeros(Shape::new(1, 4, 8, 8)));
        let y1 = spatial_mamba(&mut tape, &p, &sp, z).unwrap();
        let y2 = freq_mamba(&mut tape, &p, &fq, z).unwrap();
        assert_eq!(tape.value(y1).max_abs(), 0.0);
        assert_eq!(tape.value(y2).max_abs(), 0.0);

        let x = Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 12);
        let probe = Tensor::randn(x.shape(), 1.0, 13);
        for layer in [&sp, &fq] {
            let mut inputs = vec![x.clone()];
            inputs.extend(store.tensors().iter().cloned());
            let r = grad_check_many(
                |t, v| {
                    let p = Bound::from_vars(v[1..].to_vec());
                    let y = layer.forward(t, &p, v[0])?;
                    ops::weighted_sum(t, y, &probe)
                },
                &inputs,
                1e-5,
                Coords::Sampled { count: 400, seed: 14 },
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "{:?} {r:?}", layer.kind);
        }
    }

    #[test]
    fn mamba_layer_input_gradients() {
        let mut store = ParamStore::new(11);
        let sp = MambaLayer::new(&mut store, "sp", 2, 4, ScanKind::Spatial);
        let fq = MambaLayer::new(&mut store, "fq", 2, 4, ScanKind::FrequencyBands { levels: 2 });
        let x = Tensor::randn(Shape::new(1, 2, 8, 8), 1.0, 12);
        let probe = Tensor::randn(x.shape(), 1.0, 13);
        for layer in [&sp, &fq] {
            let err = crate::autograd::grad_check(
                |t, v| {
                    let p = store.bind(t, false);
                    let y = layer.forward(t, &p, v)?;
                    ops::weighted_sum(t, y, &probe)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "{:?} {err:e}", layer.kind);
        }
    }

    #[test]
    fn freq_mamba_consumes_freq_block_order() {
        let mut store = ParamStore::new(15);
        let fq = MambaLayer::new(&mut store, "fq", 2, 4, ScanKind::FrequencyBands { levels: 2 });
        let ((), log) = with_visit_log(|| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(Tensor::randn(Shape::new(1, 2, 8, 8), 1.0, 16));
            freq_mamba(&mut tape, &p, &fq, x).unwrap();
        });
        let expected = order_freq_blocks(8, 8, 2).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0], expected.forward);
        assert_eq!(log[1], expected.reversed().forward);
    }
}
