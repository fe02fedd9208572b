//! Named parameter storage and the small layer types built on it.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. Each forward pass binds the
//! whole store onto a tape once and layers look their variables up through
//! the resulting [`Bound`] table.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_randn(&mut self, name: impl Into<String>, shape: Shape, std: f64) -> ParamId {
        let t = Tensor::randn_with(shape, std, &mut self.rng);
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Shape, value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                detail: format!("{}: {} vs {}", self.names[id.0], cur.shape(), value.shape()),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Puts every parameter on the tape; `trainable` controls whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// Parameter variables of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects gradients in store order (zeros where none reached).
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Square convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let weight = store.add_randn(
            format!("{name}.weight"),
            Shape::new(c_out, c_in, k, k),
            fan_in_std(c_in * k * k),
        );
        let bias = store.add_const(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), 0.0);
        Conv {
            weight,
            bias,
            geometry: ConvGeometry::same(k),
        }
    }

    /// Depthwise `k x k` convolution over `channels`.
    pub fn depthwise(store: &mut ParamStore, name: &str, channels: usize, k: usize) -> Self {
        let weight = store.add_randn(
            format!("{name}.weight"),
            Shape::new(channels, 1, k, k),
            fan_in_std(k * k),
        );
        let bias = store.add_const(format!("{name}.bias"), Shape::new(1, channels, 1, 1), 0.0);
        Conv {
            weight,
            bias,
            geometry: ConvGeometry::depthwise(k, channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        ops::conv2d(tape, x, p.var(self.weight), p.var(self.bias), self.geometry)
    }

    /// Sets the weights so the layer passes its input through unchanged
    /// (requires matching channel counts).
    pub fn set_identity(&self, store: &mut ParamStore) {
        let ws = store.get(self.weight).shape();
        let k = ws.h();
        let depthwise = self.geometry.groups > 1;
        let id = Tensor::from_fn(ws, |o, i, y, x| {
            let diag = depthwise || o == i;
            (diag && y == k / 2 && x == k / 2) as u8 as f64
        });
        store.set(self.weight, id).unwrap();
        let bs = store.get(self.bias).shape();
        store.set(self.bias, Tensor::zeros(bs)).unwrap();
    }
}

/// 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let weight = store.add_randn(
            format!("{name}.weight"),
            Shape::new(c_out, c_in, 1, 1),
            fan_in_std(c_in),
        );
        let bias = store.add_const(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), 0.0);
        Pointwise { weight, bias }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Self {
        let weight = store.add_const(format!("{name}.weight"), Shape::new(c_out, c_in, 1, 1), 0.0);
        let bias = store.add_const(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), 0.0);
        Pointwise { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        ops::pointwise_conv(tape, x, p.var(self.weight), p.var(self.bias))
    }

    pub fn c_in(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape().c()
    }

    pub fn c_out(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape().n()
    }

    /// Identity weight plus a constant bias.
    pub fn set_identity(&self, store: &mut ParamStore, bias: f64) {
        let ws = store.get(self.weight).shape();
        store
            .set(self.weight, Tensor::from_fn(ws, |o, i, _, _| (o == i) as u8 as f64))
            .unwrap();
        let bs = store.get(self.bias).shape();
        store.set(self.bias, Tensor::full(bs, bias)).unwrap();
    }

    /// Overwrites weight and bias with an explicit channel matrix.
    pub fn set_matrix(&self, store: &mut ParamStore, f: impl Fn(usize, usize) -> f64) {
        let ws = store.get(self.weight).shape();
        store.set(self.weight, Tensor::from_fn(ws, |o, i, _, _| f(o, i))).unwrap();
        let bs = store.get(self.bias).shape();
        store.set(self.bias, Tensor::zeros(bs)).unwrap();
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Channel-wise layer normalization with affine parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        Norm {
            gamma: store.add_const(format!("{name}.gamma"), s, 1.0),
            beta: store.add_const(format!("{name}.beta"), s, 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        ops::layer_norm(tape, x, p.var(self.gamma), p.var(self.beta), LAYER_NORM_EPS)
    }
}
