//! Two-stage training.
//!
//! Stage 1 finetunes the text encoder (direction-token rows and projection
//! included) with additive composition. Stage 2 freezes the encoder and
//! trains only the combiner. Both stages minimize `forward + alpha *
//! reversed` and select the epoch with the best forward validation metric.

pub mod config;
pub mod optim;

pub use config::{ExperimentConfig, Schedule, StageConfig, TrainConfig, TrainSection, PRESETS};
pub use optim::{adamw_step, cosine_lr, AdamW};

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{init_combiner, Additive, Combiner, Composer};
use crate::data::{build_batch, Dataset, DirectionalBatch, QueryHalf, Split};
use crate::encoders::{encode_batch, tokenize, Direction, EncoderConfig, ImageFeatureStore, PROJECTION};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{ModelMeta, ModelState, Moments};
use crate::objective::{forward_loss, reversed_loss_with, total_loss, LossConfig};
use crate::params::Bound;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub total: Var,
    pub forward: Var,
    pub reversed: Option<Var>,
}

/// Store rows as a constant `[n, d]` block.
pub fn image_rows<T: Real>(tape: &mut Tape<T>, store: &ImageFeatureStore, rows: &[usize]) -> Result<Var> {
    let data: Vec<T> = rows
        .iter()
        .flat_map(|&i| store.row(i).iter().map(|&x| T::from_f64(x as f64)))
        .collect();
    Ok(tape.constant(Tensor::new(vec![rows.len(), store.dim()], data)?))
}

/// Forward loss on `batch.forward` plus, when the batch has a reversed
/// half, the reversed loss, combined with weight `alpha`.
pub fn batch_objective<T: Real, C: Composer>(
    tape: &mut Tape<T>,
    compose: &C,
    store: &ImageFeatureStore,
    batch: &DirectionalBatch,
    forward_text: Var,
    reversed_text: Option<Var>,
    loss: &LossConfig,
) -> Result<StepLosses> {
    let refs = image_rows(tape, store, &batch.forward.images)?;
    let targets = image_rows(tape, store, &batch.forward.positives)?;
    let composed = compose.compose(tape, refs, forward_text)?;
    let forward = forward_loss(tape, composed, targets, loss.temperature)?;
    let reversed = match reversed_text {
        Some(txt) if !batch.reversed.is_empty() => {
            let imgs = image_rows(tape, store, &batch.reversed.images)?;
            let goals = image_rows(tape, store, &batch.reversed.positives)?;
            Some(reversed_loss_with(
                tape,
                loss.reversed_negatives,
                imgs,
                txt,
                goals,
                loss.temperature,
                compose,
            )?)
        }
        _ => None,
    };
    let total = total_loss(tape, forward, reversed, loss.alpha)?;
    Ok(StepLosses {
        total,
        forward,
        reversed,
    })
}

/// The stage-1 objective: both halves encoded in one pass, composed by
/// addition.
pub fn stage1_objective<T: Real>(
    tape: &mut Tape<T>,
    params: &Bound,
    encoder: &EncoderConfig,
    store: &ImageFeatureStore,
    batch: &DirectionalBatch,
    loss: &LossConfig,
) -> Result<StepLosses> {
    let b = batch.forward.len();
    let mut seqs = batch.forward.tokens.clone();
    seqs.extend(batch.reversed.tokens.iter().cloned());
    let txt = encode_batch(tape, params, encoder, &seqs)?;
    let fwd_idx: Vec<usize> = (0..b).collect();
    let forward_text = tape.gather_rows(txt, &fwd_idx)?;
    let reversed_text = if batch.reversed.is_empty() {
        None
    } else {
        let idx: Vec<usize> = (b..b + batch.reversed.len()).collect();
        Some(tape.gather_rows(txt, &idx)?)
    };
    batch_objective(tape, &Additive, store, batch, forward_text, reversed_text, loss)
}

/// One logged epoch. `metrics` holds forward validation recalls and
/// averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub split: Split,
    pub loss_f: f64,
    pub loss_b: Option<f64>,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
}

/// Checksum of something that must not change during a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenAudit {
    pub what: String,
    pub before: u64,
    pub after: u64,
}

impl FrozenAudit {
    pub fn intact(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the epoch with the best forward validation metric.
    pub best: ModelState,
    pub best_epoch: usize,
    pub last: ModelState,
    pub log: Vec<EpochRecord>,
    /// `(forward, reversed)` loss per optimizer step.
    pub step_losses: Vec<(f64, Option<f64>)>,
    pub audits: Vec<FrozenAudit>,
    /// Set when a non-finite loss or gradient stopped the run early.
    pub divergence: Option<String>,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Divergence(_) | Error::Tensor(TensorError::NonFinite { .. }))
}

/// Runs `consume` on batches built by `make` on a producer thread, with at
/// most two batches in flight.
fn prefetch<B: Send>(
    batches: &[Vec<usize>],
    make: &(dyn Fn(&[usize]) -> Result<B> + Sync),
    mut consume: impl FnMut(B) -> Result<()>,
) -> Result<()> {
    std::thread::scope(|s| {
        let (tx, rx) = sync_channel::<Result<B>>(2);
        s.spawn(move || {
            for b in batches {
                if tx.send(make(b)).is_err() {
                    break;
                }
            }
        });
        for item in rx {
            consume(item?)?;
        }
        Ok(())
    })
}

/// Index batches for one epoch, shuffled by a generator keyed on
/// `(seed, stage, epoch)`. A trailing batch smaller than two is dropped
/// since it carries no negatives.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, stage: u8, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn lr_factor(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        Schedule::Cosine => cosine_lr(step, total, 1.0),
        Schedule::Constant => 1.0,
    }
}

fn gradients_by_name<T: Real>(bound: &Bound, grads: &crate::tensor::Gradients<T>) -> BTreeMap<String, Vec<f32>> {
    bound
        .iter()
        .filter_map(|(name, v)| grads.get(v).map(|g| (name.to_string(), g.iter().map(|x| x.as_f64() as f32).collect())))
        .collect()
}

fn epoch_metrics(ds: &Dataset, state: &ModelState) -> Result<Option<(f64, BTreeMap<String, f64>)>> {
    if ds.val.is_empty() {
        return Ok(None);
    }
    let r = evaluate(ds, Split::Val, state, Direction::Forward)?;
    let mut m = BTreeMap::new();
    for (k, v) in &r.recall {
        m.insert(format!("recall@{k}"), *v);
    }
    for (k, v) in &r.subset_recall {
        m.insert(format!("subset_recall@{k}"), *v);
    }
    m.insert("avg_metric_fiq".into(), r.avg_metric_fiq);
    if let Some(c) = r.avg_metric_cirr {
        m.insert("avg_metric_cirr".into(), c);
    }
    Ok(Some((r.primary_metric(), m)))
}

/// Epoch loop shared by both stages. `step` performs one optimizer update
/// and returns the batch's `(forward, reversed)` losses.
fn run_epochs<B: Send>(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut state: ModelState,
    make: &(dyn Fn(&[usize]) -> Result<B> + Sync),
    step: &mut dyn FnMut(&mut ModelState, B, f64) -> Result<(f64, Option<f64>)>,
) -> Result<(ModelState, usize, ModelState, Vec<EpochRecord>, Vec<(f64, Option<f64>)>, Option<String>)> {
    let n = ds.train.len();
    if n < 2 {
        return Err(Error::Data("training split needs at least two triplets".into()));
    }
    let per_epoch = epoch_batches(n, cfg.batch_size, cfg.seed, cfg.stage, 0).len();
    let total_steps = per_epoch * cfg.epochs;
    let mut best = state.clone();
    let mut best_epoch = 0;
    let mut best_metric = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut steps = Vec::with_capacity(total_steps);
    let mut divergence = None;
    let mut global = 0usize;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(n, cfg.batch_size, cfg.seed, cfg.stage, epoch);
        let (mut sum_f, mut sum_b, mut count) = (0.0, 0.0, 0usize);
        let mut has_b = false;
        let result = prefetch(&batches, make, |b| {
            let factor = lr_factor(cfg, global, total_steps);
            let (lf, lb) = step(&mut state, b, factor)?;
            global += 1;
            sum_f += lf;
            if let Some(x) = lb {
                sum_b += x;
                has_b = true;
            }
            count += 1;
            steps.push((lf, lb));
            Ok(())
        });
        if let Err(e) = result {
            if is_divergence(&e) {
                warn!("stage {} diverged in epoch {epoch}: {e}", cfg.stage);
                divergence = Some(e.to_string());
                break;
            }
            return Err(e);
        }
        let count = count.max(1) as f64;
        let (metric, metrics) = match epoch_metrics(ds, &state)? {
            Some((m, ms)) => (m, ms),
            None => (epoch as f64, BTreeMap::new()),
        };
        info!(
            "stage {} epoch {epoch}/{}: loss_f {:.4} metric {:.4}",
            cfg.stage,
            cfg.epochs,
            sum_f / count,
            metric
        );
        log.push(EpochRecord {
            stage: cfg.stage,
            epoch,
            split: Split::Val,
            loss_f: sum_f / count,
            loss_b: has_b.then(|| sum_b / count),
            metrics,
        });
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best = state.clone();
        }
    }
    Ok((best, best_epoch, state, log, steps, divergence))
}

/// Stage 1: trains `text.*` from a fresh initialization.
pub fn train_stage1(exp: &ExperimentConfig, ds: &Dataset) -> Result<TrainOutcome> {
    exp.validate()?;
    let cfg = exp.stage(1);
    let enc = exp.encoder;
    if enc.out_dim != ds.store.dim() {
        return Err(Error::Config(format!(
            "encoder.out_dim {} differs from image feature dim {}",
            enc.out_dim,
            ds.store.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
    rng.set_stream(100);
    let params = crate::encoders::init_text_encoder(&enc, ds.vocab.len(), &mut rng);
    let state = ModelState {
        meta: ModelMeta {
            encoder: enc,
            combiner: None,
            stage: 1,
            token_scheme: cfg.token_scheme,
            bidirectional: cfg.bidirectional,
        },
        params,
        moments: Moments::new(),
        step: 0,
        fingerprint: exp.fingerprint(),
    };
    let image_before = ds.store.checksum();
    let loss = LossConfig {
        temperature: cfg.temperature,
        alpha: cfg.alpha,
        reversed_negatives: cfg.reversed_negatives,
    };
    let make = |idx: &[usize]| -> Result<DirectionalBatch> {
        let ts: Vec<_> = idx.iter().map(|&i| &ds.train[i]).collect();
        build_batch(&ts, &ds.vocab, &ds.store, enc.max_len, cfg.bidirectional, cfg.token_scheme)
    };
    let mut step = |state: &mut ModelState, batch: DirectionalBatch, factor: f64| -> Result<(f64, Option<f64>)> {
        let mut tape = Tape::<f32>::new();
        let bound = state.params.bind(&mut tape);
        let l = stage1_objective(&mut tape, &bound, &enc, &ds.store, &batch, &loss)?;
        let lf = tape.value(l.forward).data()[0] as f64;
        let lb = l.reversed.map(|v| tape.value(v).data()[0] as f64);
        let grads = tape.backward(l.total)?;
        let grads = gradients_by_name(&bound, &grads);
        state.step += 1;
        let lr_for = |name: &str| factor * if name == PROJECTION { cfg.projection_lr } else { cfg.lr };
        adamw_step(
            &mut state.params,
            &grads,
            &mut state.moments,
            state.step,
            &lr_for,
            cfg.weight_decay,
            &exp.adamw,
        )?;
        Ok((lf, lb))
    };
    let (best, best_epoch, last, log, step_losses, divergence) = run_epochs(&cfg, ds, state, &make, &mut step)?;
    let audits = vec![FrozenAudit {
        what: "image features".into(),
        before: image_before,
        after: ds.store.checksum(),
    }];
    Ok(TrainOutcome {
        best,
        best_epoch,
        last,
        log,
        step_losses,
        audits,
        divergence,
    })
}

/// Stage 2: freezes every `text.*` array of `stage1` and trains a fresh
/// combiner on precomputed text embeddings.
pub fn train_stage2(exp: &ExperimentConfig, ds: &Dataset, stage1: &ModelState) -> Result<TrainOutcome> {
    exp.validate()?;
    let cfg = exp.stage(2);
    if stage1.meta.stage != 1 {
        return Err(Error::Usage(format!(
            "stage 2 needs a stage-1 checkpoint, got stage {}",
            stage1.meta.stage
        )));
    }
    let enc = stage1.meta.encoder;
    if enc.out_dim != ds.store.dim() {
        return Err(Error::Config("checkpoint and image features disagree on dimension".into()));
    }
    let scheme = stage1.meta.token_scheme;
    if scheme != cfg.token_scheme {
        warn!("using the checkpoint's token scheme {scheme:?} instead of {:?}", cfg.token_scheme);
    }
    let mut params = stage1.params.subset("text.");
    params.set_frozen("text.", true);
    let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
    rng.set_stream(200);
    params.merge(init_combiner(&exp.combiner, enc.out_dim, &mut rng));
    let state = ModelState {
        meta: ModelMeta {
            encoder: enc,
            combiner: Some(exp.combiner),
            stage: 2,
            token_scheme: scheme,
            bidirectional: stage1.meta.bidirectional || cfg.bidirectional,
        },
        params,
        moments: Moments::new(),
        step: 0,
        fingerprint: exp.fingerprint(),
    };
    let image_before = ds.store.checksum();
    let text_before = state.params.checksum("text.");

    // The encoder is frozen, so every caption is embedded once up front.
    let embed = |direction: Direction| -> Result<Vec<Vec<f32>>> {
        let seqs = ds
            .train
            .iter()
            .map(|t| tokenize(&t.words(), scheme.token(direction), &ds.vocab, enc.max_len))
            .collect::<Result<Vec<_>>>()?;
        state.embed_texts(&seqs)
    };
    let fwd_text = embed(Direction::Forward)?;
    let rev_text = if cfg.bidirectional { embed(Direction::Reversed)? } else { Vec::new() };
    let loss = LossConfig {
        temperature: cfg.temperature,
        alpha: cfg.alpha,
        reversed_negatives: cfg.reversed_negatives,
    };
    let make = |idx: &[usize]| -> Result<Vec<usize>> { Ok(idx.to_vec()) };
    let mut step = |state: &mut ModelState, idx: Vec<usize>, factor: f64| -> Result<(f64, Option<f64>)> {
        let mut batch = DirectionalBatch::default();
        let mut fwd_rows = Vec::with_capacity(idx.len());
        let mut rev_rows = Vec::new();
        for &i in &idx {
            let t = &ds.train[i];
            let (r, g) = (ds.store.index_of(&t.ref_id)?, ds.store.index_of(&t.target_id)?);
            batch.forward.images.push(r);
            batch.forward.positives.push(g);
            fwd_rows.push(fwd_text[i].as_slice());
            if cfg.bidirectional {
                batch.reversed.images.push(g);
                batch.reversed.positives.push(r);
                rev_rows.push(rev_text[i].as_slice());
            }
        }
        let mut tape = Tape::<f32>::new();
        let comb = state.params.subset("comb.");
        let bound = comb.bind(&mut tape);
        let ft = tape.constant(Tensor::from_rows(&fwd_rows)?);
        let rt = if rev_rows.is_empty() {
            None
        } else {
            Some(tape.constant(Tensor::from_rows(&rev_rows)?))
        };
        let l = batch_objective(&mut tape, &Combiner::new(&bound), &ds.store, &batch, ft, rt, &loss)?;
        let lf = tape.value(l.forward).data()[0] as f64;
        let lb = l.reversed.map(|v| tape.value(v).data()[0] as f64);
        let grads = tape.backward(l.total)?;
        let grads = gradients_by_name(&bound, &grads);
        state.step += 1;
        let lr_for = |_: &str| factor * cfg.lr;
        adamw_step(
            &mut state.params,
            &grads,
            &mut state.moments,
            state.step,
            &lr_for,
            cfg.weight_decay,
            &exp.adamw,
        )?;
        Ok((lf, lb))
    };
    let (best, best_epoch, last, log, step_losses, divergence) = run_epochs(&cfg, ds, state, &make, &mut step)?;
    let audits = vec![
        FrozenAudit {
            what: "image features".into(),
            before: image_before,
            after: ds.store.checksum(),
        },
        FrozenAudit {
            what: "text encoder".into(),
            before: text_before,
            after: last.params.checksum("text."),
        },
    ];
    Ok(TrainOutcome {
        best,
        best_epoch,
        last,
        log,
        step_losses,
        audits,
        divergence,
    })
}

/// Forward/reversed halves of a batch as plain rows, for external
/// reference computations.
pub fn half_rows(store: &ImageFeatureStore, half: &QueryHalf) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    (
        half.images.iter().map(|&i| store.row(i).to_vec()).collect(),
        half.positives.iter().map(|&i| store.row(i).to_vec()).collect(),
    )
}
