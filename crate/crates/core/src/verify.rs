//! The gradient-check suite: every differentiable operation, the block
//! components and a small full model, each reduced to a scalar by a fixed
//! random probe.

use std::rc::Rc;

use crate::autograd::{directional_check, grad_check_many, Coords, Tape, Var};
use crate::block::{self, Ablation, AttentionMapGen, BandBranch, FreqSsmBlock, SpatialBranch};
use crate::error::Result;
use crate::fourier::{self, FourierBranch};
use crate::model::{Model, ModelConfig};
use crate::ops::{self, ConvGeometry, Resize};
use crate::params::{Bound, ParamStore};
use crate::scan::{self, Axis, Direction, MambaLayer, ScanKind, SsmLayer, SsmVars};
use crate::tensor::{Shape, Tensor};
use crate::training::{loss_total, LossWeights};
use crate::wavelet;

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Central differences at every coordinate of every input.
    Coordinates,
    /// Random joint directions over all inputs.
    Directional { directions: usize, seed: u64 },
}

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub method: Method,
    f: CaseFn,
}

impl GradCase {
    /// Worst relative error between tape and finite-difference derivatives.
    pub fn run(&self, h: f64) -> Result<f64> {
        match self.method {
            Method::Coordinates => {
                Ok(grad_check_many(|t, v| (self.f)(t, v), &self.inputs, h, Coords::All)?.max_rel_error)
            }
            Method::Directional { directions, seed } => {
                directional_check(|t, v| (self.f)(t, v), &self.inputs, h, directions, seed)
            }
        }
    }
}

/// All cases: operations, branches, block, attention, loss, then the full
/// model (input coordinates and parameter directions).
pub fn gradient_suite() -> Vec<GradCase> {
    let mut cases: Vec<GradCase> = operation_cases()
        .into_iter()
        .map(|(name, f, inputs)| GradCase {
            name,
            inputs,
            method: Method::Coordinates,
            f,
        })
        .collect();

    let model = Rc::new(gradcheck_model());
    let x = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, 82);
    let m = Rc::clone(&model);
    cases.push(GradCase {
        name: "model input",
        inputs: vec![x.clone()],
        method: Method::Coordinates,
        f: Box::new(move |t, v| {
            let p = m.store.bind(t, false);
            let y = m.forward(t, &p, v[0])?;
            probe_sum(t, y, 83)
        }),
    });
    let inputs = store_inputs(x, &model.store);
    cases.push(GradCase {
        name: "model parameters",
        inputs,
        method: Method::Directional { directions: 8, seed: 84 },
        f: Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let y = model.forward(t, &p, v[0])?;
            probe_sum(t, y, 83)
        }),
    });
    cases
}

fn probe_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let probe = Tensor::randn(t.value(y).shape(), 1.0, seed);
    ops::weighted_sum(t, y, &probe)
}

type RawCase = (&'static str, CaseFn, Vec<Tensor>);

fn store_inputs(x: Tensor, store: &ParamStore) -> Vec<Tensor> {
    let mut v = vec![x];
    v.extend(store.tensors().iter().cloned());
    v
}

fn operation_cases() -> Vec<RawCase> {
    let s = Shape::new(1, 2, 6, 4);
    let x = || Tensor::randn(s, 1.0, 11);
    let y = || Tensor::randn(s, 1.0, 12);
    let mut cases: Vec<RawCase> = vec![
        (
            "conv2d",
            Box::new(|t, v| {
                let o = ops::conv2d(t, v[0], v[1], v[2], ConvGeometry::same(3))?;
                probe_sum(t, o, 1)
            }),
            vec![x(), Tensor::randn(Shape::new(3, 2, 3, 3), 0.5, 13), Tensor::randn(Shape::new(1, 3, 1, 1), 0.5, 14)],
        ),
        (
            "conv2d depthwise",
            Box::new(|t, v| {
                let o = ops::conv2d(t, v[0], v[1], v[2], ConvGeometry::depthwise(3, 2))?;
                probe_sum(t, o, 2)
            }),
            vec![x(), Tensor::randn(Shape::new(2, 1, 3, 3), 0.5, 15), Tensor::randn(Shape::new(1, 2, 1, 1), 0.5, 16)],
        ),
        (
            "pointwise_conv",
            Box::new(|t, v| {
                let o = ops::pointwise_conv(t, v[0], v[1], v[2])?;
                probe_sum(t, o, 3)
            }),
            vec![x(), Tensor::randn(Shape::new(3, 2, 1, 1), 0.5, 17), Tensor::randn(Shape::new(1, 3, 1, 1), 0.5, 18)],
        ),
        (
            "silu",
            Box::new(|t, v| {
                let o = ops::silu(t, v[0]);
                probe_sum(t, o, 4)
            }),
            vec![x()],
        ),
        (
            "layer_norm",
            Box::new(|t, v| {
                let o = ops::layer_norm(t, v[0], v[1], v[2], 1e-5)?;
                probe_sum(t, o, 5)
            }),
            vec![
                Tensor::randn(Shape::new(1, 4, 4, 4), 1.0, 19),
                Tensor::uniform(Shape::new(1, 4, 1, 1), 0.5, 1.5, 20),
                Tensor::randn(Shape::new(1, 4, 1, 1), 0.3, 21),
            ],
        ),
        (
            "add/sub/mul/scale",
            Box::new(|t, v| {
                let a = ops::add(t, v[0], v[1])?;
                let b = ops::sub(t, a, v[1])?;
                let c = ops::mul(t, b, v[1])?;
                let d = ops::scale(t, c, -1.7);
                probe_sum(t, d, 6)
            }),
            vec![x(), y()],
        ),
        (
            "concat/slice channels",
            Box::new(|t, v| {
                let c = ops::concat_channels(t, &[v[0], v[1]])?;
                let s = ops::slice_channels(t, c, 1, 2)?;
                probe_sum(t, s, 7)
            }),
            vec![x(), y()],
        ),
        (
            "resize down2/up2",
            Box::new(|t, v| {
                let d = ops::resize(t, v[0], Resize::Down2)?;
                let u = ops::resize(t, d, Resize::Up2)?;
                let u2 = ops::mul(t, u, v[0])?;
                probe_sum(t, u2, 8)
            }),
            vec![x()],
        ),
        (
            "sum/l1_mean",
            Box::new(|t, v| {
                let l = ops::l1_mean(t, v[0], v[1])?;
                let sq = ops::mul(t, v[0], v[0])?;
                let s = ops::sum(t, sq);
                ops::add(t, l, s)
            }),
            // keep |a - b| clear of the kink at zero
            vec![x(), x().map(|v| v + 0.5)],
        ),
        (
            "dft2/amp_phase",
            Box::new(|t, v| {
                let (re, im) = fourier::dft2_op(t, v[0]);
                let (a, p) = fourier::amp_phase_op(t, re, im)?;
                let a = probe_sum(t, a, 9)?;
                let p = probe_sum(t, p, 10)?;
                ops::add(t, a, p)
            }),
            vec![x()],
        ),
        (
            "polar/idft2",
            Box::new(|t, v| {
                let (re, im) = fourier::polar_op(t, v[0], v[1])?;
                let o = fourier::idft2_op(t, re, im)?;
                probe_sum(t, o, 11)
            }),
            vec![Tensor::uniform(s, 0.5, 2.0, 22), Tensor::uniform(s, -3.0, 3.0, 23)],
        ),
        (
            "dwt2/idwt2",
            Box::new(|t, v| {
                let [ll, lh, hl, hh] = wavelet::dwt2_op(t, v[0])?;
                let ll2 = ops::mul(t, ll, ll)?;
                let back = wavelet::idwt2_op(t, [ll2, lh, hl, hh])?;
                probe_sum(t, back, 12)
            }),
            vec![x()],
        ),
        (
            "wpt/iwpt mosaic",
            Box::new(|t, v| {
                let m = wavelet::wpt_mosaic_op(t, v[0], 2)?;
                let m2 = ops::mul(t, m, m)?;
                let back = wavelet::iwpt_mosaic_op(t, m2, 2)?;
                probe_sum(t, back, 13)
            }),
            vec![Tensor::randn(Shape::new(1, 2, 8, 8), 1.0, 24)],
        ),
    ];

    let ssm_inputs = |c: usize, seed: u64| {
        let mut store = ParamStore::new(seed);
        let layer = SsmLayer::new(&mut store, "ssm", c, 4);
        let mut p = layer.params(&store);
        p.proj_delta.iter_mut().for_each(|v| *v *= 5.0);
        layer.set_params(&mut store, &p).unwrap();
        store_inputs(Tensor::randn(Shape::new(1, c, 4, 5), 1.0, seed + 1), &store)
    };
    cases.push((
        "scan_traversal",
        Box::new(|t, v| {
            let order = Rc::new(scan::order_raster(4, 5, Axis::Col, Direction::Rev));
            let vars = SsmVars([v[1], v[2], v[3], v[4], v[5], v[6]]);
            let o = scan::scan_traversal(t, v[0], vars, order)?;
            probe_sum(t, o, 14)
        }),
        ssm_inputs(3, 30),
    ));
    cases.push((
        "scan2d",
        Box::new(|t, v| {
            let vars = SsmVars([v[1], v[2], v[3], v[4], v[5], v[6]]);
            let tr = vec![
                (Rc::new(scan::order_raster(4, 5, Axis::Row, Direction::Fwd)), vars),
                (Rc::new(scan::order_raster(4, 5, Axis::Row, Direction::Rev)), vars),
            ];
            let o = scan::scan2d(t, v[0], &tr)?;
            probe_sum(t, o, 15)
        }),
        ssm_inputs(2, 40),
    ));

    for (name, kind) in [("spatial_mamba", ScanKind::Spatial), ("freq_mamba", ScanKind::FrequencyBands { levels: 2 })] {
        let mut store = ParamStore::new(50);
        let layer = MambaLayer::new(&mut store, "m", 4, 4, kind);
        let inputs = store_inputs(Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 51), &store);
        cases.push((
            name,
            Box::new(move |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let o = match kind {
                    ScanKind::Spatial => scan::spatial_mamba(t, &p, &layer, v[0])?,
                    _ => scan::freq_mamba(t, &p, &layer, v[0])?,
                };
                probe_sum(t, o, 16)
            }),
            inputs,
        ));
    }

    let mut store = ParamStore::new(60);
    let fb = FourierBranch::new(&mut store, "f", 2);
    let inputs = store_inputs(Tensor::randn(Shape::new(1, 2, 8, 8), 1.0, 61), &store);
    cases.push((
        "fourier_branch",
        Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let o = fb.forward(t, &p, v[0])?;
            probe_sum(t, o, 17)
        }),
        inputs,
    ));

    let mut store = ParamStore::new(62);
    let sb = SpatialBranch::new(&mut store, "s", 4, 4);
    let inputs = store_inputs(Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 63), &store);
    cases.push((
        "spatial branch",
        Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let o = sb.forward(t, &p, v[0])?;
            probe_sum(t, o, 18)
        }),
        inputs,
    ));

    let mut store = ParamStore::new(64);
    let bb = BandBranch::new(&mut store, "b", 4, 4);
    let inputs = store_inputs(Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 65), &store);
    cases.push((
        "band branch",
        Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let o = bb.forward(t, &p, v[0])?;
            probe_sum(t, o, 19)
        }),
        inputs,
    ));

    let mut store = ParamStore::new(66);
    let blk = FreqSsmBlock::new(&mut store, "blk", 4, 4, Ablation::default());
    let inputs = store_inputs(Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 67), &store);
    cases.push((
        "freqssm_block",
        Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let o = blk.forward(t, &p, v[0])?;
            probe_sum(t, o, 20)
        }),
        inputs,
    ));

    let mut store = ParamStore::new(68);
    let gen = AttentionMapGen::new(&mut store, "att", 3, 4, 4);
    let mut inputs = vec![
        Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, 69),
        Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, 70),
    ];
    inputs.extend(store.tensors().iter().cloned());
    cases.push((
        "degradation_attention",
        Box::new(move |t, v| {
            let p = Bound::from_vars(v[2..].to_vec());
            let o = block::degradation_attention(t, &p, &gen, v[0], v[1])?;
            probe_sum(t, o, 21)
        }),
        inputs,
    ));

    let target = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, 71);
    cases.push((
        "loss_total",
        Box::new(move |t, v| Ok(loss_total(t, v[0], &target, LossWeights::default())?.0)),
        vec![Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, 72)],
    ));
    cases
}

/// One-block-per-stage desk model with a live output layer (a zero output
/// layer would make the input gradient trivially the identity).
pub fn gradcheck_model() -> Model {
    let cfg = ModelConfig {
        depths: vec![1; 7],
        base_channels: 8,
        ..ModelConfig::default()
    };
    let mut m = Model::build(cfg, 80).unwrap();
    for name in ["outro.weight", "outro.bias"] {
        let id = m.store.find(name).unwrap();
        let s = m.store.get(id).shape();
        m.store.set(id, Tensor::randn(s, 0.2, 81)).unwrap();
    }
    m
}

