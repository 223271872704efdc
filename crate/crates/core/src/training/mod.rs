//! Two-stage optimization: the autoencoder first, then the latent flow
//! against the frozen encoder. One AdamW optimizer with linear warmup
//! and stepped exponential decay drives both stages; training is a pure
//! function of (dataset, config, seed), so reruns agree bitwise and an
//! interrupted run resumed from a checkpoint matches an uninterrupted
//! one exactly.

pub mod checkpoint;

use crate::data::{tags, CorruptConfig, CorruptStream, FieldDataset, Split};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::geofae::GeoFaeModel;
use crate::geometry::ConditioningInstance;
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Global gradient-norm ceiling; guards rare attention blowups.
pub const GRAD_CLIP: f64 = 1.0;
/// Reconstruction queries per training instance (capped by cloud size),
/// resampled every iteration.
pub const TRAIN_QUERIES: usize = 128;

/// Optimizer and schedule settings shared by both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Steps of linear warmup from 0 to `base_lr`.
    pub warmup_steps: usize,
    /// Multiplier applied every `decay_every` steps after warmup.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    /// Observation noise relative to per-channel field std.
    pub noise_level: f64,
    /// Sensor fractions drawn uniformly per instance.
    pub fraction_set: Vec<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale schedule: 1e5 iterations, warmup 5000 to 1e-3, decay
    /// 0.9 every 5000, weight decay 1e-5, 1% noise, quarter fractions.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            iterations: 100_000,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_steps: 5000,
            decay_factor: 0.9,
            decay_every: 5000,
            weight_decay: 1e-5,
            noise_level: 0.01,
            fraction_set: vec![0.25, 0.5, 0.75, 1.0],
            seed,
        }
    }

    /// Single-core schedule: same optimizer, compressed horizon.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_steps: 250,
            decay_factor: 0.9,
            decay_every: 1000,
            weight_decay: 1e-5,
            noise_level: 0.01,
            fraction_set: vec![0.25, 0.5, 0.75, 1.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |details: String| Err(Error::config("TrainConfig::validate", details));
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be >= 1".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor {} must be in (0, 1]", self.decay_factor));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return fail("iterations, batch_size, decay_every must all be >= 1".into());
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || self.noise_level < 0.0 {
            return fail("base_lr must be > 0; weight_decay and noise_level >= 0".into());
        }
        if self.fraction_set.is_empty()
            || self.fraction_set.iter().any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return fail("fraction_set must be non-empty with entries in (0, 1]".into());
        }
        Ok(())
    }
}

/// Learning rate at an optimizer step: linear from 0 to `base_lr` over
/// the warmup, then `base_lr * decay_factor^floor((step - warmup) / every)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let periods = ((step - cfg.warmup_steps) / cfg.decay_every) as i32;
        cfg.base_lr * cfg.decay_factor.powi(periods)
    }
}

/// AdamW first/second moments (flat, aligned with `ParamStore::to_flat`)
/// plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(numel: usize) -> Self {
        OptimizerState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
        }
    }
}

/// One AdamW update over every trainable entry: decoupled weight decay
/// (`p *= 1 - lr*wd`, skipped for entries flagged decay-exempt such as
/// layer-norm affines and the latent queries), then the bias-corrected
/// moment update. Frozen/non-trainable entries are left untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let numel = store.numel();
    if grads.len() != numel || state.m.len() != numel || state.v.len() != numel {
        return Err(Error::dim(
            "adamw_step",
            format!(
                "store has {numel} scalars, grads {} / moments {}",
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);

    let mut flat = store.to_flat();
    let mut offset = 0usize;
    for e in store.entries() {
        let n = e.value.numel();
        if !e.trainable {
            offset += n;
            continue;
        }
        let wd = if e.decay { weight_decay } else { 0.0 };
        for i in offset..offset + n {
            let g = grads[i];
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            flat[i] = flat[i] * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        offset += n;
    }
    store.load_flat(&flat)
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Write a loss history as CSV with header `step,lr,loss`.
pub fn write_loss_csv(path: &std::path::Path, history: &[LossRecord]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |s: String| w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e));
    put("step,lr,loss\n".into())?;
    for r in history {
        put(format!("{},{},{}\n", r.step, r.lr, r.loss))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn corrupt_stream<'a>(
    ds: &'a FieldDataset,
    train: &[usize],
    cfg: &TrainConfig,
) -> Result<CorruptStream<'a>> {
    CorruptStream::new(
        ds,
        train,
        CorruptConfig {
            noise_level: cfg.noise_level,
            fraction_set: cfg.fraction_set.clone(),
            root_seed: cfg.seed,
        },
    )
}

/// Accumulate per-entry gradient slices from one backward pass into a
/// flat store-aligned buffer.
fn accumulate_grads(
    store: &ParamStore,
    bind: &crate::nn::StoreBinding,
    grads: &crate::tensor::Gradients,
    acc: &mut [f64],
) {
    let mut offset = 0usize;
    for (i, e) in store.entries().iter().enumerate() {
        let n = e.value.numel();
        if let Some(g) = bind.grad(grads, i) {
            for (a, &gv) in acc[offset..offset + n].iter_mut().zip(g) {
                *a += gv;
            }
        }
        offset += n;
    }
}

fn check_finite(loss: f64, stage: &'static str, step: usize, draw: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            op: "train",
            details: format!("{stage}: non-finite loss {loss} at step {step}, draw {draw}; aborting"),
        })
    }
}

/// Stage 1: reconstruction training of the autoencoder. Resumes from
/// `state.step`; draw indices are a pure function of the global step, so
/// a resumed run is bitwise identical to an uninterrupted one.
pub fn train_stage1(
    fae: &mut GeoFaeModel,
    ds: &FieldDataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if fae.is_frozen() {
        return Err(Error::contract(
            "train_stage1",
            "autoencoder is frozen; stage 1 must run before freezing",
        ));
    }
    if state.m.len() != fae.store.numel() {
        return Err(Error::dim(
            "train_stage1",
            format!(
                "optimizer state sized {} vs {} parameters",
                state.m.len(),
                fae.store.numel()
            ),
        ));
    }
    let split = Split::default_for(ds.len())?;
    let stream = corrupt_stream(ds, &split.train, cfg)?;
    let mut history = Vec::new();

    for step in state.step as usize..cfg.iterations {
        let lr = lr_at(step, cfg);
        let mut grad_acc = vec![0.0; fae.store.numel()];
        let mut loss_sum = 0.0;
        for j in 0..cfg.batch_size {
            let k = (step * cfg.batch_size + j) as u64;
            let (inst, target) = stream.draw(k)?;
            let m = target.cloud.len();
            let qn = TRAIN_QUERIES.min(m);
            let qidx = Rng::derive2(cfg.seed, tags::QUERIES, k).sample_indices(m, qn);

            let mut tape = Tape::new();
            let bind = fae.store.bind(&mut tape, true);
            let loss = fae.fae_loss_on_tape(&mut tape, &bind, &inst, &target, &qidx)?;
            let lv = tape.value(loss).item()?;
            check_finite(lv, "stage 1", step, k)?;
            loss_sum += lv;
            let grads = tape.backward(loss)?;
            accumulate_grads(&fae.store, &bind, &grads, &mut grad_acc);
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        for g in &mut grad_acc {
            *g *= inv_b;
        }
        clip_global_norm(&mut grad_acc, GRAD_CLIP);
        adamw_step(&mut fae.store, &grad_acc, state, lr, cfg.weight_decay)?;
        history.push(LossRecord {
            step,
            lr,
            loss: loss_sum * inv_b,
        });
    }
    Ok(history)
}

/// Stage 2: rectified-flow training against the frozen encoder. The
/// corruption distribution is the same as stage 1's; references are the
/// fully observed (noise-free) versions of each drawn mesh.
pub fn train_stage2(
    flow: &mut FlowModel,
    fae: &GeoFaeModel,
    ds: &FieldDataset,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if !fae.is_frozen() {
        return Err(Error::contract(
            "train_stage2",
            "autoencoder must be frozen before flow training",
        ));
    }
    if state.m.len() != flow.store.numel() {
        return Err(Error::dim(
            "train_stage2",
            format!(
                "optimizer state sized {} vs {} parameters",
                state.m.len(),
                flow.store.numel()
            ),
        ));
    }
    let encoder_before = fae.store.clone();
    let split = Split::default_for(ds.len())?;
    let stream = corrupt_stream(ds, &split.train, cfg)?;
    let mut history = Vec::new();

    for step in state.step as usize..cfg.iterations {
        let lr = lr_at(step, cfg);
        let mut grad_acc = vec![0.0; flow.store.numel()];
        let mut loss_sum = 0.0;
        for j in 0..cfg.batch_size {
            let k = (step * cfg.batch_size + j) as u64;
            let (inst, target) = stream.draw(k)?;
            let reference =
                ConditioningInstance::full(target.cloud.clone(), &target.values, target.channels)?;
            let draw_seed = Rng::derive2(cfg.seed, tags::CRF_DRAW, k).next_u64();

            let mut tape = Tape::new();
            let bind = flow.store.bind(&mut tape, true);
            let loss =
                flow.crf_loss_on_tape(&mut tape, &bind, fae, &inst, &reference, draw_seed)?;
            let lv = tape.value(loss).item()?;
            check_finite(lv, "stage 2", step, k)?;
            loss_sum += lv;
            let grads = tape.backward(loss)?;
            accumulate_grads(&flow.store, &bind, &grads, &mut grad_acc);
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        for g in &mut grad_acc {
            *g *= inv_b;
        }
        clip_global_norm(&mut grad_acc, GRAD_CLIP);
        adamw_step(&mut flow.store, &grad_acc, state, lr, cfg.weight_decay)?;
        history.push(LossRecord {
            step,
            lr,
            loss: loss_sum * inv_b,
        });
    }
    if !fae.store.bitwise_eq(&encoder_before) {
        return Err(Error::contract(
            "train_stage2",
            "frozen encoder parameters changed during flow training",
        ));
    }
    Ok(history)
}
