//! Joint embedding functions `f(image, text)`.
//!
//! Stage 1 uses plain addition; stage 2 swaps in a combiner made of a gated
//! convex combination of the two inputs plus a learned image-text mixture:
//!
//! ```text
//! c   = [img, txt]
//! g   = sigmoid(Gate(c))          Gate: 2d -> h -> 1
//! m   = Mix(c)                    Mix:  2d -> h -> d
//! out = normalize(g * txt + (1 - g) * img + m)
//! ```

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Row-wise composition of `img[n,d]` and `txt[n,d]` into unit rows `[n,d]`.
pub trait Composer {
    fn compose<T: Real>(&self, tape: &mut Tape<T>, img: Var, txt: Var) -> Result<Var>;
}

impl<C: Composer> Composer for &C {
    fn compose<T: Real>(&self, tape: &mut Tape<T>, img: Var, txt: Var) -> Result<Var> {
        (**self).compose(tape, img, txt)
    }
}

fn check_pair<T: Real>(tape: &Tape<T>, img: Var, txt: Var) -> Result<()> {
    let (a, b) = (tape.shape(img), tape.shape(txt));
    if a != b || a.len() != 2 {
        return Err(Error::Data(format!("composer inputs {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `normalize(img + txt)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Additive;

impl Composer for Additive {
    fn compose<T: Real>(&self, tape: &mut Tape<T>, img: Var, txt: Var) -> Result<Var> {
        check_pair(tape, img, txt)?;
        let s = tape.add(img, txt)?;
        Ok(tape.l2_normalize_rows(s)?)
    }
}

/// Combiner bound to parameters on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct Combiner<'a> {
    params: &'a Bound,
}

impl<'a> Combiner<'a> {
    pub fn new(params: &'a Bound) -> Self {
        Self { params }
    }
}

impl Composer for Combiner<'_> {
    fn compose<T: Real>(&self, tape: &mut Tape<T>, img: Var, txt: Var) -> Result<Var> {
        check_pair(tape, img, txt)?;
        let p = self.params;
        let c = tape.concat_cols(img, txt)?;
        let mlp = |tape: &mut Tape<T>, prefix: &str| -> Result<Var> {
            let h = tape.matmul(c, p[format!("{prefix}.w1").as_str()])?;
            let h = tape.add_bias(h, p[format!("{prefix}.b1").as_str()])?;
            let h = tape.relu(h)?;
            let o = tape.matmul(h, p[format!("{prefix}.w2").as_str()])?;
            Ok(tape.add_bias(o, p[format!("{prefix}.b2").as_str()])?)
        };
        let mix = mlp(tape, "comb.mix")?;
        let gate_logit = mlp(tape, "comb.gate")?;
        let g = tape.sigmoid(gate_logit)?;
        let neg = tape.scale(g, -1.0)?;
        let one_minus_g = tape.add_scalar(neg, 1.0)?;
        let t = tape.mul_rows(txt, g)?;
        let i = tape.mul_rows(img, one_minus_g)?;
        let s = tape.add(t, i)?;
        let s = tape.add(s, mix)?;
        Ok(tape.l2_normalize_rows(s)?)
    }
}

/// Wraps a composer and counts how many row pairs it has composed.
#[derive(Debug, Default)]
pub struct Counting<C> {
    inner: C,
    count: Cell<usize>,
}

impl<C> Counting<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            count: Cell::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.get()
    }

    pub fn reset(&self) {
        self.count.set(0);
    }
}

impl<C: Composer> Composer for Counting<C> {
    fn compose<T: Real>(&self, tape: &mut Tape<T>, img: Var, txt: Var) -> Result<Var> {
        let rows = tape.shape(img).first().copied().unwrap_or(0);
        self.count.set(self.count.get() + rows);
        self.inner.compose(tape, img, txt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombinerConfig {
    pub hidden: usize,
    /// Start with zeroed output layers, so the untrained combiner equals the
    /// additive composer.
    pub zero_init_output: bool,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            zero_init_output: true,
        }
    }
}

/// Fresh combiner parameters named under `comb.` for embedding dimension `dim`.
pub fn init_combiner(cfg: &CombinerConfig, dim: usize, rng: &mut impl Rng) -> ParamStore {
    let h = cfg.hidden;
    let mut s = ParamStore::new();
    let mut dense = |rows: usize, cols: usize, zero: bool| -> Tensor<f32> {
        if zero {
            return Tensor::zeros(vec![rows, cols]);
        }
        let dist = Normal::new(0.0, (1.0 / rows as f64).sqrt()).unwrap();
        let data = (0..rows * cols).map(|_| dist.sample(rng) as f32).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    };
    for (branch, out) in [("mix", dim), ("gate", 1)] {
        s.insert(format!("comb.{branch}.w1"), dense(2 * dim, h, false), false);
        s.insert(format!("comb.{branch}.b1"), Tensor::zeros(vec![h]), false);
        s.insert(format!("comb.{branch}.w2"), dense(h, out, cfg.zero_init_output), false);
        s.insert(format!("comb.{branch}.b2"), Tensor::zeros(vec![out]), false);
    }
    s
}

fn single_pair(img: &Tensor<f32>, txt: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if img.shape() != txt.shape() || img.rank() != 1 {
        return Err(Error::Data(format!(
            "composer inputs {:?} and {:?} differ",
            img.shape(),
            txt.shape()
        )));
    }
    let d = img.numel();
    Ok((img.clone().reshape(vec![1, d])?, txt.clone().reshape(vec![1, d])?))
}

/// `normalize(img + txt)` for a single pair of `[d]` vectors.
pub fn compose_additive(img: &Tensor<f32>, txt: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (i, t) = single_pair(img, txt)?;
    let mut tape = Tape::new();
    let (i, t) = (tape.constant(i), tape.constant(t));
    let out = Additive.compose(&mut tape, i, t)?;
    Ok(tape.value(out).clone().reshape(vec![img.numel()])?)
}

/// Combiner output for a single pair of `[d]` vectors.
pub fn compose_combiner(img: &Tensor<f32>, txt: &Tensor<f32>, params: &ParamStore) -> Result<Tensor<f32>> {
    let (i, t) = single_pair(img, txt)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (i, t) = (tape.constant(i), tape.constant(t));
    let out = Combiner::new(&bound).compose(&mut tape, i, t)?;
    Ok(tape.value(out).clone().reshape(vec![img.numel()])?)
}
