//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Moments;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update of every parameter that has a gradient.
///
/// `step` is the 1-based update count used for bias correction and
/// `lr_for` gives each parameter's learning rate. Moments are created on
/// first use. The arithmetic runs in `f64`; parameters and moments are
/// stored back as `f32`. A non-finite gradient aborts before anything is
/// modified.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f32>>,
    moments: &mut Moments,
    step: u64,
    lr_for: &dyn Fn(&str) -> f64,
    weight_decay: f64,
    opt: &AdamW,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("adamw step count starts at 1".into()));
    }
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Divergence(format!("gradient of {name}[{i}] is {} at step {step}", g[i])));
        }
    }
    let c1 = 1.0 - opt.beta1.powi(step as i32);
    let c2 = 1.0 - opt.beta2.powi(step as i32);
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("gradient for unknown parameter {name}")))?;
        if p.numel() != g.len() {
            return Err(Error::Data(format!("{name}: {} gradients for {} values", g.len(), p.numel())));
        }
        let (m, v) = moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
        let lr = lr_for(name);
        let decay = 1.0 - lr * weight_decay;
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gi = gi as f64;
            let m1 = opt.beta1 * *mi as f64 + (1.0 - opt.beta1) * gi;
            let v1 = opt.beta2 * *vi as f64 + (1.0 - opt.beta2) * gi * gi;
            let update = (m1 / c1) / ((v1 / c2).sqrt() + opt.eps);
            *x = (*x as f64 * decay - lr * update) as f32;
            *mi = m1 as f32;
            *vi = v1 as f32;
        }
    }
    Ok(())
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`; `step` is clamped
/// to `total_steps`, and a zero-length schedule stays at `base_lr`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![x]).unwrap(), false);
        s
    }

    fn grad(g: f32) -> BTreeMap<String, Vec<f32>> {
        [("p".to_string(), vec![g])].into()
    }

    #[test]
    fn single_step_hand_value() {
        let mut s = scalar_store(1.0);
        let mut m = Moments::new();
        adamw_step(&mut s, &grad(1.0), &mut m, 1, &|_| 0.1, 0.0, &AdamW::default()).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get("p").unwrap().data()[0] as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut s = scalar_store(0.7);
        let mut m = Moments::new();
        adamw_step(&mut s, &grad(0.0), &mut m, 1, &|_| 0.1, 0.0, &AdamW::default()).unwrap();
        assert_eq!(s.get("p").unwrap().data()[0], 0.7);
        adamw_step(&mut s, &grad(0.0), &mut m, 2, &|_| 0.1, 0.05, &AdamW::default()).unwrap();
        let want = 0.7f32 as f64 * (1.0 - 0.1 * 0.05);
        assert!((s.get("p").unwrap().data()[0] as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut s = scalar_store(0.5);
        let mut m = Moments::new();
        let err = adamw_step(&mut s, &grad(f32::NAN), &mut m, 1, &|_| 0.1, 0.0, &AdamW::default());
        assert!(matches!(err, Err(Error::Divergence(_))));
        assert_eq!(s.get("p").unwrap().data()[0], 0.5);
        assert!(m.is_empty());
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.3), 0.3);
        assert!(cosine_lr(100, 100, 0.3).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.3) - 0.15).abs() < 1e-15);
        assert_eq!(cosine_lr(3, 0, 0.3), 0.3);
    }
}
