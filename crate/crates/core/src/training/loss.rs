use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{arg_err, Result};
use crate::fourier::{self, amp_phase_op, dft2_op};
use crate::ops;
use crate::tensor::Tensor;

/// Weights of the amplitude and phase terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.05, beta: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Spatial,
    Amplitude,
    Phase,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return arg_err("LossWeights", format!("weights must be non-negative, got {self:?}"));
        }
        Ok(())
    }

    /// Terms that contribute to the optimized objective.
    pub fn active_terms(&self) -> Vec<LossTerm> {
        let mut t = vec![LossTerm::Spatial];
        if self.alpha > 0.0 {
            t.push(LossTerm::Amplitude);
        }
        if self.beta > 0.0 {
            t.push(LossTerm::Phase);
        }
        t
    }
}

/// Component values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub spatial: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub total: f64,
}

/// `mean|Y - X| + alpha mean|A(Y) - A(X)| + beta mean|P(Y) - P(X)|` on the
/// tape. Terms with zero weight are evaluated for reporting only and are
/// not part of the graph.
pub fn loss_total(tape: &mut Tape, y: Var, x: &Tensor, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    tape.value(y).expect_same_shape(x, "loss_total")?;
    let target = fourier::to_amp_phase(&fourier::dft2(x));
    let xv = tape.constant(x.clone());
    let spa = ops::l1_mean(tape, y, xv)?;
    let (re, im) = dft2_op(tape, y);
    let (amp, pha) = amp_phase_op(tape, re, im)?;
    let amp_t = tape.constant(target.amplitude);
    let pha_t = tape.constant(target.phase);
    let l_amp = ops::l1_mean(tape, amp, amp_t)?;
    let l_pha = ops::l1_mean(tape, pha, pha_t)?;

    let mut total = spa;
    if w.alpha > 0.0 {
        let t = ops::scale(tape, l_amp, w.alpha);
        total = ops::add(tape, total, t)?;
    }
    if w.beta > 0.0 {
        let t = ops::scale(tape, l_pha, w.beta);
        total = ops::add(tape, total, t)?;
    }
    let value = |v: Var| tape.value(v).data()[0];
    let parts = LossBreakdown {
        spatial: value(spa),
        amplitude: value(l_amp),
        phase: value(l_pha),
        total: value(total),
    };
    Ok((total, parts))
}

/// Loss components computed directly on tensors, without a tape.
pub fn loss_values(y: &Tensor, x: &Tensor, w: LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    y.expect_same_shape(x, "loss_values")?;
    let mean_abs = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64
    };
    let (fy, fx) = (fourier::to_amp_phase(&fourier::dft2(y)), fourier::to_amp_phase(&fourier::dft2(x)));
    let spatial = mean_abs(y, x);
    let amplitude = mean_abs(&fy.amplitude, &fx.amplitude);
    let phase = mean_abs(&fy.phase, &fx.phase);
    Ok(LossBreakdown {
        spatial,
        amplitude,
        phase,
        total: spatial + w.alpha * amplitude + w.beta * phase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::tensor::Shape;

    fn eval(y: &Tensor, x: &Tensor, w: LossWeights) -> LossBreakdown {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        loss_total(&mut tape, yv, x, w).unwrap().1
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, 1);
        let b = eval(&x, &x, LossWeights::default());
        assert_eq!((b.spatial, b.amplitude, b.phase, b.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_weights_give_plain_l1() {
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, 2);
        let y = Tensor::uniform(x.shape(), 0.0, 1.0, 3);
        let b = eval(&y, &x, LossWeights { alpha: 0.0, beta: 0.0 });
        let l1 = y.data().iter().zip(x.data()).map(|(a, c)| (a - c).abs()).sum::<f64>() / 192.0;
        assert!((b.total - l1).abs() < 1e-15);
    }

    #[test]
    fn total_composes_components() {
        let x = Tensor::uniform(Shape::new(2, 3, 8, 8), 0.0, 1.0, 4);
        let y = Tensor::uniform(x.shape(), 0.0, 1.0, 5);
        let w = LossWeights::default();
        let b = eval(&y, &x, w);
        // components from the tape-free path
        let r = loss_values(&y, &x, w).unwrap();
        assert!((b.spatial - r.spatial).abs() < 1e-12);
        assert!((b.amplitude - r.amplitude).abs() < 1e-12);
        assert!((b.phase - r.phase).abs() < 1e-12);
        assert!((b.total - (r.spatial + 0.05 * r.amplitude + 0.05 * r.phase)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_and_negative_weights_fail() {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8)));
        assert!(loss_total(&mut tape, y, &Tensor::zeros(Shape::new(1, 3, 8, 4)), LossWeights::default()).is_err());
        let w = LossWeights { alpha: -1.0, beta: 0.0 };
        assert!(loss_total(&mut tape, y, &Tensor::zeros(Shape::new(1, 3, 8, 8)), w).is_err());
    }

    #[test]
    fn loss_ablations_wire_the_expected_terms() {
        use LossTerm::*;
        let cases = [
            (LossWeights::default(), vec![Spatial, Amplitude, Phase]),
            (LossWeights { alpha: 0.0, beta: 0.05 }, vec![Spatial, Phase]),
            (LossWeights { alpha: 0.05, beta: 0.0 }, vec![Spatial, Amplitude]),
            (LossWeights { alpha: 0.0, beta: 0.0 }, vec![Spatial]),
        ];
        for (w, terms) in cases {
            assert_eq!(w.active_terms(), terms);
        }
    }

    #[test]
    fn loss_gradient() {
        let x = Tensor::uniform(Shape::new(1, 2, 8, 8), 0.0, 1.0, 6);
        let y = Tensor::uniform(x.shape(), 0.0, 1.0, 7);
        let err = grad_check(|t, v| Ok(loss_total(t, v, &x, LossWeights::default())?.0), &y, 1e-6).unwrap();
        assert!(err < 1e-4, "{err:e}");
    }
}
