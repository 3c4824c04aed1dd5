use super::{Real, Tape, Tensor, TensorError, Var};
use crate::error::Result;

/// A scalar-valued function of a list of parameter tensors, expressed as a
/// graph on any [`Tape`] precision.
pub trait ScalarFunction {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

/// Central finite-difference gradient check.
///
/// Both the analytic and numeric gradients are computed in `f64` from the
/// same graph code, so `f32` rounding does not swamp the comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-3,
            max_coords_per_param: None,
        }
    }
}

/// Max over all coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<F: ScalarFunction>(f: &F, params: &[Tensor<f32>], h: f64) -> Result<f64> {
    GradCheck {
        h,
        max_coords_per_param: None,
    }
    .run(f, params)
}

impl GradCheck {
    pub fn run<F: ScalarFunction>(&self, f: &F, params: &[Tensor<f32>]) -> Result<f64> {
        let base: Vec<Tensor<f64>> = params.iter().map(|p| p.cast()).collect();

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = base.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let loss = f.eval(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(&base)
            .map(|(&v, p)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();

        let eval_at = |pi: usize, ci: usize, delta: f64| -> Result<f64> {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = base
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut p = p.clone();
                    if i == pi {
                        p.data_mut()[ci] += delta;
                    }
                    tape.leaf(p, false)
                })
                .collect();
            let out = f.eval(&mut tape, &vars)?;
            let v = tape.value(out);
            if v.numel() != 1 {
                return Err(TensorError::NotScalar {
                    op: "grad_check",
                    shape: v.shape().to_vec(),
                }
                .into());
            }
            Ok(v.data()[0])
        };

        let mut worst: f64 = 0.0;
        for (pi, p) in base.iter().enumerate() {
            let n = p.numel();
            let stride = match self.max_coords_per_param {
                Some(max) if max > 0 && n > max => n.div_ceil(max),
                _ => 1,
            };
            for ci in (0..n).step_by(stride) {
                let numeric = (eval_at(pi, ci, self.h)? - eval_at(pi, ci, -self.h)?) / (2.0 * self.h);
                let a = analytic[pi][ci];
                let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}
