//! Batch-based classification losses for forward and reversed queries.
//!
//! All losses take unit rows, form `temperature * cosine` logits, and return
//! the mean negative log-softmax of the positive entry. The positive is part
//! of its own denominator.

use serde::{Deserialize, Serialize};

use crate::composer::Composer;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Where the reversed loss draws its negatives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// Compose every in-batch target image with the query text (`B^2`
    /// compositions) and score each against the query's reference.
    TargetSide,
    /// Keep the composed query fixed and contrast against in-batch
    /// references (`B` compositions).
    ReferenceSide,
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target-side" => Ok(NegativeMode::TargetSide),
            "reference-side" => Ok(NegativeMode::ReferenceSide),
            other => Err(Error::Usage(format!("unknown negative mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub reversed_negatives: NegativeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 100.0,
            alpha: 0.5,
            reversed_negatives: NegativeMode::TargetSide,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

const UNIT_TOL: f64 = 1e-4;

fn batch_dims<T: Real>(tape: &Tape<T>, what: &str, v: Var) -> Result<(usize, usize)> {
    let (b, d) = tape.value(v).dims2("loss")?;
    for i in 0..b {
        let n = tape.value(v).row(i).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Data(format!("{what} row {i} has norm {n}, expected unit rows")));
        }
    }
    Ok((b, d))
}

fn same_batch(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("batch shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `-mean_i log_softmax_j(temperature * logits)[i, i]` for square `[B,B]` logits.
fn diagonal_nll<T: Real>(tape: &mut Tape<T>, sims: Var, temperature: f64) -> Result<Var> {
    let b = tape.shape(sims)[0];
    let logits = tape.scale(sims, temperature)?;
    let lsm = tape.log_softmax_rows(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let pos = tape.pick_per_row(lsm, &diag)?;
    let mean = tape.mean(pos)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Forward loss: composed query `i` against every in-batch target `j`.
pub fn forward_loss<T: Real>(tape: &mut Tape<T>, composed: Var, targets: Var, temperature: f64) -> Result<Var> {
    let a = batch_dims(tape, "composed", composed)?;
    same_batch(a, batch_dims(tape, "targets", targets)?)?;
    let tt = tape.transpose(targets)?;
    let sims = tape.matmul(composed, tt)?;
    diagonal_nll(tape, sims, temperature)
}

/// Reversed loss with target-side negatives: logits
/// `[i, j] = cos(f(target_j, rtext_i), reference_i)`.
pub fn reversed_loss<T: Real, C: Composer>(
    tape: &mut Tape<T>,
    target_imgs: Var,
    reversed_txts: Var,
    references: Var,
    temperature: f64,
    compose: &C,
) -> Result<Var> {
    let a = batch_dims(tape, "target images", target_imgs)?;
    same_batch(a, batch_dims(tape, "reversed texts", reversed_txts)?)?;
    same_batch(a, batch_dims(tape, "references", references)?)?;
    let b = a.0;
    let img_idx: Vec<usize> = (0..b).flat_map(|_| 0..b).collect();
    let row_idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, b)).collect();
    let imgs = tape.gather_rows(target_imgs, &img_idx)?;
    let txts = tape.gather_rows(reversed_txts, &row_idx)?;
    let composed = compose.compose(tape, imgs, txts)?;
    let refs = tape.gather_rows(references, &row_idx)?;
    let prod = tape.mul(composed, refs)?;
    let sims = tape.sum_rows(prod)?;
    let sims = tape.reshape(sims, vec![b, b])?;
    diagonal_nll(tape, sims, temperature)
}

/// Reversed loss with reference-side negatives: logits
/// `[i, j] = cos(f(target_i, rtext_i), reference_j)`.
pub fn reversed_loss_refneg<T: Real, C: Composer>(
    tape: &mut Tape<T>,
    target_imgs: Var,
    reversed_txts: Var,
    references: Var,
    temperature: f64,
    compose: &C,
) -> Result<Var> {
    let a = batch_dims(tape, "target images", target_imgs)?;
    same_batch(a, batch_dims(tape, "reversed texts", reversed_txts)?)?;
    same_batch(a, batch_dims(tape, "references", references)?)?;
    let composed = compose.compose(tape, target_imgs, reversed_txts)?;
    forward_loss(tape, composed, references, temperature)
}

/// Dispatches on `mode`.
pub fn reversed_loss_with<T: Real, C: Composer>(
    tape: &mut Tape<T>,
    mode: NegativeMode,
    target_imgs: Var,
    reversed_txts: Var,
    references: Var,
    temperature: f64,
    compose: &C,
) -> Result<Var> {
    match mode {
        NegativeMode::TargetSide => reversed_loss(tape, target_imgs, reversed_txts, references, temperature, compose),
        NegativeMode::ReferenceSide => {
            reversed_loss_refneg(tape, target_imgs, reversed_txts, references, temperature, compose)
        }
    }
}

/// `forward + alpha * reversed`. With `alpha == 0` the forward node itself is
/// returned.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, forward: Var, reversed: Option<Var>, alpha: f64) -> Result<Var> {
    for v in [Some(forward), reversed].into_iter().flatten() {
        if tape.value(v).numel() != 1 {
            return Err(Error::Data("total_loss expects scalar terms".into()));
        }
    }
    match reversed {
        Some(r) if alpha != 0.0 => {
            let w = tape.scale(r, alpha)?;
            Ok(tape.add(forward, w)?)
        }
        _ => Ok(forward),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{Additive, Counting};
    use crate::tensor::Tensor;

    fn mat(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_pair_losses_are_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(mat(&[&[0.6, 0.8]]));
        let b = tape.constant(mat(&[&[1.0, 0.0]]));
        let c = tape.constant(mat(&[&[0.0, 1.0]]));
        let f = forward_loss(&mut tape, a, b, 100.0).unwrap();
        assert_eq!(tape.value(f).data()[0], 0.0);
        let r = reversed_loss(&mut tape, a, b, c, 100.0, &Additive).unwrap();
        assert_eq!(tape.value(r).data()[0], 0.0);
        let r = reversed_loss_refneg(&mut tape, a, b, c, 100.0, &Additive).unwrap();
        assert_eq!(tape.value(r).data()[0], 0.0);
    }

    #[test]
    fn forward_loss_two_term_value() {
        let mut tape = Tape::<f32>::new();
        let i = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = tape.constant(i.clone());
        let b = tape.constant(i);
        let f = forward_loss(&mut tape, a, b, 1.0).unwrap();
        let expected = (1.0f64 + (-1.0f64).exp()).ln();
        assert!((tape.value(f).data()[0] as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn identical_references_give_log_b() {
        let mut tape = Tape::<f32>::new();
        let t = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0], &[0.6, 0.8]]));
        let x = tape.constant(mat(&[&[0.0, 1.0], &[1.0, 0.0], &[0.8, 0.6]]));
        let r = tape.constant(mat(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]));
        let l = reversed_loss_refneg(&mut tape, t, x, r, 100.0, &Additive).unwrap();
        assert!((tape.value(l).data()[0] as f64 - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn non_unit_and_mismatched_rows_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(mat(&[&[2.0, 0.0]]));
        let b = tape.constant(mat(&[&[1.0, 0.0]]));
        assert!(forward_loss(&mut tape, a, b, 1.0).is_err());
        let c = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!(forward_loss(&mut tape, b, c, 1.0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(Tensor::scalar(0.5));
        let r = tape.constant(Tensor::scalar(0.3));
        let t = total_loss(&mut tape, f, Some(r), 0.1).unwrap();
        assert!((tape.value(t).data()[0] - 0.53).abs() < 1e-7);
        let t0 = total_loss(&mut tape, f, Some(r), 0.0).unwrap();
        assert_eq!(t0, f);
    }

    #[test]
    fn composition_counts() {
        let mut tape = Tape::<f32>::new();
        let rows: Vec<Vec<f32>> = (0..4).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let counter = Counting::new(Additive);
        reversed_loss(&mut tape, x, x, x, 10.0, &counter).unwrap();
        assert_eq!(counter.count(), 16);
        counter.reset();
        reversed_loss_refneg(&mut tape, x, x, x, 10.0, &counter).unwrap();
        assert_eq!(counter.count(), 4);
    }
}
