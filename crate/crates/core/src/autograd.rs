//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation pushes one record holding its input and
//! output node ids plus a closure computing input gradients from output
//! gradients. Records are appended in evaluation order, so the tape is
//! topologically sorted by construction and a single reverse sweep suffices.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps output gradients (None when an output received no gradient) to
/// input gradients (None when an input gets no contribution).
pub type BackwardFn = Box<dyn Fn(&[Option<&Tensor>]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

struct Record {
    inputs: Vec<Var>,
    outputs: Vec<Var>,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Rc::new(value), requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_node(&mut self, value: Rc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Shared handle to a node's value, for capture in backward closures.
    pub fn value_rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Records an operation. The closure is dropped without being stored
    /// when no input requires a gradient.
    pub fn record(&mut self, inputs: &[Var], outputs: Vec<Tensor>, backward: BackwardFn) -> Vec<Var> {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let outs: Vec<Var> = outputs
            .into_iter()
            .map(|t| self.push_node(Rc::new(t), needs_grad))
            .collect();
        if needs_grad {
            self.records.push(Record {
                inputs: inputs.to_vec(),
                outputs: outs.clone(),
                backward,
            });
        }
        outs
    }

    pub fn record1(&mut self, inputs: &[Var], output: Tensor, backward: BackwardFn) -> Var {
        self.record(inputs, vec![output], backward)[0]
    }

    /// Whether any of `vars` needs a gradient; lets ops skip saving state.
    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a scalar `loss`, populating the gradient of every
    /// node that requires one and is reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if loss_shape.numel() != 1 {
            return shape_err(
                "backward",
                format!("loss must be a scalar, got shape {loss_shape}"),
            );
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::full(loss_shape, 1.0));
        for ri in (0..self.records.len()).rev() {
            let rec = &self.records[ri];
            let out_grads: Vec<Option<&Tensor>> =
                rec.outputs.iter().map(|o| self.nodes[o.0].grad.as_ref()).collect();
            if out_grads.iter().all(Option::is_none) {
                continue;
            }
            let in_grads = (rec.backward)(&out_grads);
            debug_assert_eq!(in_grads.len(), rec.inputs.len());
            let inputs = rec.inputs.clone();
            for (inp, g) in inputs.into_iter().zip(in_grads) {
                let Some(g) = g else { continue };
                let node = &mut self.nodes[inp.0];
                if !node.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), node.value.shape());
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Which coordinates a gradient check perturbs.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// A seeded random sample of `count` coordinates over all inputs.
    Sampled { count: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of a scalar function of one tensor against
/// central finite differences at every coordinate and returns the maximum
/// relative error.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(input),
        h,
        Coords::All,
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input gradient check. Every input is a differentiable leaf.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, coords: Coords) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return arg_err("grad_check", format!("step h must be > 0, got {h}"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return shape_err("grad_check", "function must return a scalar");
        }
        Ok(v.data()[0])
    };

    let selected: Vec<(usize, usize)> = match coords {
        Coords::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Coords::Sampled { count, seed } => {
            let total: usize = inputs.iter().map(Tensor::numel).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count.min(total))
                .map(|_| {
                    let mut k = rng.random_range(0..total);
                    let mut i = 0;
                    while k >= inputs[i].numel() {
                        k -= inputs[i].numel();
                        i += 1;
                    }
                    (i, k)
                })
                .collect()
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, j) in selected {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let fp = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let fm = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i].data()[j], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Compares the analytic directional derivative `<grad f, v>` with
/// `(f(x + h v) - f(x - h v)) / 2h` for `directions` seeded random unit
/// Gaussian directions spanning all inputs jointly. Returns the worst
/// relative error.
///
/// Complements the per-coordinate check when many gradient entries sit far
/// below the loss scale, where coordinate differences are pure roundoff.
pub fn directional_check<F>(f: F, inputs: &[Tensor], h: f64, directions: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return arg_err("directional_check", format!("step h must be > 0, got {h}"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Option<Tensor>> = vars.iter().map(|v| tape.grad(*v).cloned()).collect();
    let eval = |x: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = x.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dirs: Vec<Tensor> = inputs.iter().map(|t| Tensor::randn_with(t.shape(), 1.0, &mut rng)).collect();
        let norm = dirs.iter().map(Tensor::sum_sq).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let dirs: Vec<Tensor> = dirs.into_iter().map(|d| d.scale(1.0 / norm)).collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dirs)
            .filter_map(|(g, d)| g.as_ref().map(|g| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()))
            .sum();
        let shifted = |sign: f64| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| x.zip_with(d, |a, b| a + sign * h * b).unwrap())
                .collect()
        };
        let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Shape;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, 3);
        let err = grad_check(|t, v| Ok(ops::sum(t, v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");

        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let s = ops::sum(&mut tape, v);
        tape.backward(s).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x);
        let sq = ops::mul(&mut tape, v, v).unwrap();
        let s = ops::sum(&mut tape, sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!(grad_check(|t, v| Ok(ops::sum(t, v)), &x, 0.0).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(Shape::new(1, 1, 1, 2), 2.0));
        let b = tape.constant(Tensor::full(Shape::new(1, 1, 1, 2), 3.0));
        let m = ops::mul(&mut tape, a, b).unwrap();
        let s = ops::sum(&mut tape, m);
        tape.backward(s).unwrap();
        assert!(tape.grad(b).is_none());
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 3.0]);
    }
}
