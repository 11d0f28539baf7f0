//! Optimization loops: AdamW with the Noam schedule for the local model,
//! random answer masking, adversarial fine-tuning on the embedded streams,
//! and truncated backpropagation through time for the global model.
//!
//! Every random draw comes from a ChaCha stream keyed by the run seed and
//! the position of the draw (step, window), and per-window gradients are
//! summed in a fixed order, so results do not depend on the thread count.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MuseError, Result};
use crate::features::{LocalFeatureFrame, QuestionStep, Response};
use crate::muse_global::{GlobalInputs, GlobalModel};
use crate::muse_local::{FrameInputs, LocalModel, StreamDelta};
use crate::numcore::{Gradients, Graph, ParamGroup, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Windows (local) or users (global) per optimizer step.
    pub batch: usize,
    pub warmup: u64,
    pub ram_ratio: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    /// Global model segment length for truncated backpropagation.
    pub tbptt: usize,
    /// Steps between training windows of the local model; 0 means the window length.
    pub window_stride: usize,
    pub adv_steps: usize,
    pub adv_step_size: f64,
    pub adv_epsilon: f64,
    pub adv_extra_steps: usize,
    /// Write a checkpoint every this many optimizer steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            batch: 2048,
            warmup: 8000,
            ram_ratio: 0.25,
            epochs: 1,
            clip_norm: 1.0,
            tbptt: 512,
            window_stride: 0,
            adv_steps: 3,
            adv_step_size: 0.01,
            adv_epsilon: 0.3,
            adv_extra_steps: 10_000,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Effective local window stride for a window of `window` steps.
    pub fn stride(&self, window: usize) -> usize {
        if self.window_stride == 0 { window } else { self.window_stride.min(window) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MuseError::InvalidArgument(format!("training: {m}")));
        if !(self.lr_base > 0.0 && self.adv_step_size > 0.0 && self.clip_norm > 0.0) {
            return bad("rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.adv_epsilon < 0.0 {
            return bad("weight decay and epsilon must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ram_ratio) {
            return bad(format!("ram ratio {} outside [0, 1]", self.ram_ratio));
        }
        if self.batch == 0 || self.warmup == 0 || self.tbptt == 0 || self.epochs == 0 {
            return bad("batch, warmup, tbptt and epochs must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at `step` (1-based); peaks at exactly `lr_base` when
/// `step == warmup`.
pub fn noam_lr(step: u64, warmup: u64, d_model: usize, lr_base: f64) -> Result<f64> {
    if step < 1 || warmup < 1 {
        return Err(MuseError::InvalidArgument(format!("noam schedule needs step, warmup >= 1 (got {step}, {warmup})")));
    }
    let raw = |s: f64| (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5));
    Ok(lr_base * raw(step as f64) / raw(warmup as f64))
}

/// Adam moments plus decoupled weight decay for `Decay` parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW { beta1, beta2, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    /// One update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(MuseError::shape("adamw", format!("{} moments for {} parameters", self.m.len(), store.len())));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.shape() != p.value.shape() {
                return Err(MuseError::shape("adamw", format!("moment {:?} for {} {:?}", m.shape(), p.name, p.value.shape())));
            }
            let wd = if p.group == ParamGroup::Decay { self.weight_decay } else { 0.0 };
            let g = p.grad.data();
            let theta = p.value.data_mut();
            for i in 0..g.len() {
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * theta[i]);
            }
        }
        Ok(())
    }
}

/// Rescales accumulated gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let c = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.scale_assign(c);
        }
    }
    norm
}

/// Replaces each observed historical response (correct or incorrect) with
/// the mask token with probability `ratio`. Returns the frame and the masked
/// positions; exercise features, labels and validity are untouched.
pub fn apply_ram<R: Rng + ?Sized>(frame: &LocalFeatureFrame, ratio: f64, rng: &mut R) -> (LocalFeatureFrame, Vec<usize>) {
    let mut out = frame.clone();
    let mut masked = Vec::new();
    if ratio <= 0.0 {
        return (out, masked);
    }
    for (i, (s, &v)) in out.steps.iter_mut().zip(&frame.valid).enumerate() {
        if v && matches!(s.response, Response::Correct | Response::Incorrect) && rng.random::<f64>() < ratio {
            s.response = Response::Mask;
            masked.push(i);
        }
    }
    (out, masked)
}

/// A training or evaluation window: the frame ends at `end` and positions
/// `from..=end` of the user's steps are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub user: usize,
    pub end: usize,
    pub from: usize,
}

/// Training windows of a history of `n` steps, placed back from the last
/// step every `stride` steps; each scores all of its positions. With
/// `stride == window` every position is scored exactly once and only the
/// earliest window is left-padded.
pub fn train_windows(user: usize, n: usize, window: usize, stride: usize) -> Vec<Window> {
    let stride = stride.clamp(1, window.max(1));
    let mut out = Vec::new();
    let mut end = n;
    while end > 0 {
        let from = end.saturating_sub(window);
        out.push(Window { user, end: end - 1, from });
        if from == 0 {
            break;
        }
        end = end.saturating_sub(stride);
    }
    out.reverse();
    out
}

/// Windows advancing by `window / 2`: after the first window every scored
/// position sees at least half a window of context.
pub fn eval_windows(user: usize, n: usize, window: usize) -> Vec<Window> {
    let stride = (window / 2).max(1);
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut end = n.min(window) - 1;
    out.push(Window { user, end, from: 0 });
    while end + 1 < n {
        let next = (end + stride).min(n - 1);
        out.push(Window { user, end: next, from: end + 1 });
        end = next;
    }
    out
}

/// Mean binary cross-entropy weights for a window: 1 on scored, labeled,
/// valid positions.
fn window_targets(frame: &LocalFeatureFrame, scored_from_slot: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = Vec::with_capacity(frame.window());
    let mut w = Vec::with_capacity(frame.window());
    for (k, (s, &v)) in frame.steps.iter().zip(&frame.valid).enumerate() {
        let scored = v && k >= scored_from_slot && s.label.is_some();
        y.push(s.label.unwrap_or(0) as f64);
        w.push(if scored { 1.0 } else { 0.0 });
    }
    (y, w)
}

fn frame_for(users: &[Vec<QuestionStep>], win: &Window, window: usize) -> (LocalFeatureFrame, usize) {
    let frame = LocalFeatureFrame::from_steps(&users[win.user], win.end, window);
    let slot = window - 1 - (win.end - win.from);
    (frame, slot)
}

/// Stream for the draws tied to one (step, item) pair of a run.
pub fn item_rng(seed: u64, purpose: u64, step: u64, item: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(step.wrapping_mul(1 << 20).wrapping_add(item));
    r
}

const RAM_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

/// One optimizer step's worth of bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Where training writes its log and checkpoints.
pub struct TrainSink<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    /// Extra metadata stamped on every checkpoint.
    pub meta: Vec<(String, String)>,
}

impl TrainSink<'_> {
    pub fn none() -> TrainSink<'static> {
        TrainSink { log: None, checkpoint_dir: None, meta: Vec::new() }
    }

    fn record(&mut self, r: &StepRecord) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            writeln!(w, "{},{},{}", r.step, r.lr, r.loss).map_err(|e| MuseError::io("<training log>", e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, model: &str, step: u64, mut archive: crate::numcore::Archive) -> Result<Option<PathBuf>> {
        let Some(dir) = self.checkpoint_dir else { return Ok(None) };
        for (k, v) in &self.meta {
            archive.set_meta(k, v);
        }
        let p = dir.join(format!("{model}.{step}.ckpt"));
        archive.write(&p)?;
        Ok(Some(p))
    }
}

struct WindowResult {
    loss_sum: f64,
    count: f64,
    grads: Gradients,
}

fn local_window_grads(
    model: &LocalModel,
    users: &[Vec<QuestionStep>],
    win: &Window,
    ram_ratio: f64,
    seed: u64,
    step: u64,
    item: u64,
) -> Result<WindowResult> {
    let w = model.config.window;
    let (frame, slot) = frame_for(users, win, w);
    let (y, wt) = window_targets(&frame, slot);
    let count: f64 = wt.iter().sum();
    let mut ram_rng = item_rng(seed, RAM_STREAM, step, item);
    let (frame, _) = apply_ram(&frame, ram_ratio, &mut ram_rng);
    let x = FrameInputs::new(&model.config, &frame)?;
    let mut g = Graph::new(model.store()).with_training(true);
    let mut drop_rng = item_rng(seed, DROPOUT_STREAM, step, item);
    let out = model.forward(&mut g, &x, None, Some(&mut drop_rng as &mut dyn RngCore))?;
    let loss = g.bce_sum(out.probs, &y, &wt)?;
    let loss_sum = g.value(loss).item();
    let grads = if count > 0.0 { g.backward(loss)?.into_params() } else { Gradients::empty(model.store().len()) };
    Ok(WindowResult { loss_sum, count, grads })
}

fn shuffled<T: Clone>(items: &[T], seed: u64, epoch: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut item_rng(seed, SHUFFLE_STREAM, epoch, 0));
    v
}

/// Applies one batch of per-item gradients: mean over scored positions,
/// clipping, then the optimizer. Returns the mean loss.
fn apply_batch(
    store: &mut ParamStore,
    opt: &mut AdamW,
    results: Vec<WindowResult>,
    clip: f64,
    lr: f64,
) -> Result<f64> {
    let total: f64 = results.iter().map(|r| r.count).sum();
    let loss: f64 = results.iter().map(|r| r.loss_sum).sum::<f64>() / total.max(1.0);
    store.zero_grads();
    if total > 0.0 {
        for r in &results {
            store.accumulate(&r.grads, 1.0 / total);
        }
        clip_grad_norm(store, clip);
        opt.update(store, lr)?;
    }
    Ok(loss)
}

/// Trains the local model on per-user step sequences; one epoch visits every
/// [`train_windows`] window once in a seeded order.
pub fn train_local(
    model: &mut LocalModel,
    users: &[Vec<QuestionStep>],
    cfg: &TrainConfig,
    sink: &mut TrainSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    let windows: Vec<Window> = users
        .iter()
        .enumerate()
        .flat_map(|(u, s)| train_windows(u, s.len(), model.config.window, cfg.stride(model.config.window)))
        .collect();
    if windows.is_empty() {
        return Err(MuseError::EmptyDataset("no question steps to train on".into()));
    }
    let mut opt = AdamW::new(model.store(), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = shuffled(&windows, cfg.seed, epoch as u64);
        for batch in order.chunks(cfg.batch) {
            step += 1;
            let lr = noam_lr(step, cfg.warmup, model.config.d_model, cfg.lr_base)?;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(i, win)| local_window_grads(model, users, win, cfg.ram_ratio, cfg.seed, step, i as u64))
                .collect::<Result<Vec<_>>>()?;
            let loss = apply_batch(&mut model.params.store, &mut opt, results, cfg.clip_norm, lr)?;
            let rec = StepRecord { step, lr, loss };
            debug!("local step {step} lr {lr:.3e} loss {loss:.5}");
            sink.record(&rec)?;
            report.records.push(rec);
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                report.checkpoints.extend(sink.checkpoint("local", step, local_archive(model, step))?);
            }
        }
        info!("local epoch {} done after {step} steps, last loss {:.5}", epoch + 1, report.records.last().map_or(0.0, |r| r.loss));
    }
    report.checkpoints.extend(sink.checkpoint("local", step, local_archive(model, step))?);
    Ok(report)
}

fn local_archive(model: &LocalModel, step: u64) -> crate::numcore::Archive {
    let mut a = model.to_archive();
    a.set_meta("step", step);
    a
}

/// Per-batch measurements from adversarial fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub step: u64,
    /// Largest perturbation norm seen after any inner step, over the batch.
    pub max_delta_norm: f64,
    /// Mean loss at zero perturbation.
    pub clean_loss: f64,
    /// Mean loss at the final perturbation.
    pub ascent_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdvReport {
    pub batches: Vec<AdvBatch>,
    pub checkpoints: Vec<PathBuf>,
}

struct AdvWindow {
    grads: Gradients,
    count: f64,
    clean: f64,
    ascent: f64,
    max_norm: f64,
}

fn adv_window(
    model: &LocalModel,
    users: &[Vec<QuestionStep>],
    win: &Window,
    cfg: &TrainConfig,
    step: u64,
    item: u64,
) -> Result<AdvWindow> {
    let (w, d) = (model.config.window, model.config.d_model);
    let (frame, slot) = frame_for(users, win, w);
    let (y, wt) = window_targets(&frame, slot);
    let count: f64 = wt.iter().sum();
    let mut ram_rng = item_rng(cfg.seed, RAM_STREAM, step, item);
    let (frame, _) = apply_ram(&frame, cfg.ram_ratio, &mut ram_rng);
    let x = FrameInputs::new(&model.config, &frame)?;
    let mut delta = vec![Tensor::zeros(&[w, d]); 3];
    let mut grads = Gradients::empty(model.store().len());
    let (mut clean, mut max_norm) = (0.0, 0.0f64);
    let k = cfg.adv_steps.max(1);
    let run = |delta: &[Tensor], want_grads: bool, pass: u64| -> Result<(f64, Option<(Gradients, Vec<Tensor>)>)> {
        let mut g = Graph::new(model.store()).with_training(true);
        let dv = StreamDelta {
            exercise: g.input(delta[0].clone()),
            response: g.input(delta[1].clone()),
            lecture: g.input(delta[2].clone()),
        };
        let mut drop_rng = item_rng(cfg.seed, DROPOUT_STREAM, step, (item << 8) | pass);
        let out = model.forward(&mut g, &x, Some(dv), Some(&mut drop_rng as &mut dyn RngCore))?;
        let loss = g.bce_sum(out.probs, &y, &wt)?;
        let value = g.value(loss).item();
        if !want_grads || count == 0.0 {
            return Ok((value, None));
        }
        let b = g.backward(loss)?;
        let gd = [dv.exercise, dv.response, dv.lecture]
            .iter()
            .map(|&v| b.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&[w, d])))
            .collect();
        Ok((value, Some((b.into_params(), gd))))
    };
    for pass in 0..k {
        let (value, res) = run(&delta, true, pass as u64)?;
        if pass == 0 {
            clean = value;
        }
        let Some((pg, gd)) = res else { break };
        grads.add(&pg);
        // Ascend along the normalized gradient, then project onto the ball.
        let gnorm = gd.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt();
        if gnorm > 0.0 {
            for (dt, gt) in delta.iter_mut().zip(&gd) {
                for (a, b) in dt.data_mut().iter_mut().zip(gt.data()) {
                    *a += cfg.adv_step_size * b / gnorm;
                }
            }
        }
        let norm_of = |d: &[Tensor]| d.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt();
        let mut norm = norm_of(&delta);
        let mut c = cfg.adv_epsilon / norm;
        // Rescaling can land a few ulps outside the ball; shrink until it doesn't.
        while norm > cfg.adv_epsilon {
            for dt in &mut delta {
                dt.scale_assign(c);
            }
            norm = norm_of(&delta);
            c = 1.0 - 4.0 * f64::EPSILON;
        }
        max_norm = max_norm.max(norm);
    }
    let (ascent, _) = run(&delta, false, k as u64)?;
    grads.scale(1.0 / k as f64);
    Ok(AdvWindow { grads, count, clean, ascent, max_norm })
}

/// Continues training with perturbations on the three embedded streams.
/// Each batch runs `adv_steps` ascent steps on a per-window perturbation
/// kept inside an L2 ball of radius `adv_epsilon`, accumulating parameter
/// gradients at every step, then applies their average.
pub fn adversarial_finetune(
    model: &mut LocalModel,
    users: &[Vec<QuestionStep>],
    cfg: &TrainConfig,
    start_step: u64,
    sink: &mut TrainSink,
) -> Result<AdvReport> {
    cfg.validate()?;
    let windows: Vec<Window> = users
        .iter()
        .enumerate()
        .flat_map(|(u, s)| train_windows(u, s.len(), model.config.window, cfg.stride(model.config.window)))
        .collect();
    if windows.is_empty() {
        return Err(MuseError::EmptyDataset("no question steps to fine-tune on".into()));
    }
    let mut opt = AdamW::new(model.store(), cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut report = AdvReport::default();
    let mut order = Vec::new();
    let mut epoch = 0u64;
    let mut step = start_step;
    for _ in 0..cfg.adv_extra_steps {
        if order.len() < cfg.batch {
            order.extend(shuffled(&windows, cfg.seed ^ 0xADD, epoch));
            epoch += 1;
        }
        let batch: Vec<Window> = order.drain(..cfg.batch.min(order.len())).collect();
        step += 1;
        let lr = noam_lr(step, cfg.warmup, model.config.d_model, cfg.lr_base)?;
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(i, win)| adv_window(model, users, win, cfg, step, i as u64))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = results.iter().map(|r| r.count).sum::<f64>().max(1.0);
        let clean = results.iter().map(|r| r.clean).sum::<f64>() / total;
        let ascent = results.iter().map(|r| r.ascent).sum::<f64>() / total;
        let max_norm = results.iter().map(|r| r.max_norm).fold(0.0, f64::max);
        let rs = results
            .into_iter()
            .map(|r| WindowResult { loss_sum: r.clean, count: r.count, grads: r.grads })
            .collect();
        apply_batch(&mut model.params.store, &mut opt, rs, cfg.clip_norm, lr)?;
        sink.record(&StepRecord { step, lr, loss: ascent })?;
        report.batches.push(AdvBatch { step, max_delta_norm: max_norm, clean_loss: clean, ascent_loss: ascent });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            report.checkpoints.extend(sink.checkpoint("local-adv", step, local_archive(model, step))?);
        }
    }
    report.checkpoints.extend(sink.checkpoint("local-adv", step, local_archive(model, step))?);
    Ok(report)
}

/// Trains the global model with Adam at a constant rate. Users are batched;
/// each user's history is cut into `tbptt`-step segments processed in order
/// with the hidden state carried (but not differentiated) across segments,
/// one optimizer step per segment round.
pub fn train_global(
    model: &mut GlobalModel,
    users: &[Vec<QuestionStep>],
    cfg: &TrainConfig,
    sink: &mut TrainSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    let inputs = users
        .iter()
        .map(|s| GlobalInputs::new(&model.config, s))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = (0..users.len()).filter(|&u| !users[u].is_empty()).collect();
    if ids.is_empty() {
        return Err(MuseError::EmptyDataset("no question steps to train on".into()));
    }
    let mut opt = AdamW::new(&model.store, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = shuffled(&ids, cfg.seed, epoch as u64);
        for batch in order.chunks(cfg.batch) {
            let mut states: Vec<Vec<Tensor>> = batch.iter().map(|_| model.zero_state()).collect();
            let rounds = batch.iter().map(|&u| inputs[u].len().div_ceil(cfg.tbptt)).max().unwrap_or(0);
            for round in 0..rounds {
                step += 1;
                let lr = cfg.lr_base;
                let m: &GlobalModel = model;
                let results = batch
                    .par_iter()
                    .zip(states.par_iter())
                    .enumerate()
                    .map(|(i, (&u, st))| -> Result<Option<(WindowResult, Vec<Tensor>)>> {
                        let x = &inputs[u];
                        let start = round * cfg.tbptt;
                        if start >= x.len() {
                            return Ok(None);
                        }
                        let seg = x.slice(start, (start + cfg.tbptt).min(x.len()));
                        let y: Vec<f64> = seg.labels.iter().map(|l| l.unwrap_or(0) as f64).collect();
                        let wt: Vec<f64> = seg.labels.iter().map(|l| l.is_some() as u8 as f64).collect();
                        let count = wt.iter().sum();
                        let mut g = Graph::new(&m.store).with_training(true);
                        let mut rng = item_rng(cfg.seed, DROPOUT_STREAM, step, i as u64);
                        let out = m.forward(&mut g, &seg, st, Some(&mut rng as &mut dyn RngCore))?;
                        let loss = g.bce_sum(out.probs, &y, &wt)?;
                        let loss_sum = g.value(loss).item();
                        let next = out.state.iter().map(|&v| g.value(v).clone()).collect();
                        let grads = if count > 0.0 { g.backward(loss)?.into_params() } else { Gradients::empty(m.store.len()) };
                        Ok(Some((WindowResult { loss_sum, count, grads }, next)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut rs = Vec::new();
                for (i, r) in results.into_iter().enumerate() {
                    if let Some((wr, next)) = r {
                        states[i] = next;
                        rs.push(wr);
                    }
                }
                let loss = apply_batch(&mut model.store, &mut opt, rs, cfg.clip_norm, lr)?;
                let rec = StepRecord { step, lr, loss };
                debug!("global step {step} loss {loss:.5}");
                sink.record(&rec)?;
                report.records.push(rec);
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    report.checkpoints.extend(sink.checkpoint("global", step, global_archive(model, step))?);
                }
            }
        }
        info!("global epoch {} done after {step} steps", epoch + 1);
    }
    report.checkpoints.extend(sink.checkpoint("global", step, global_archive(model, step))?);
    Ok(report)
}

fn global_archive(model: &GlobalModel, step: u64) -> crate::numcore::Archive {
    let mut a = model.to_archive();
    a.set_meta("step", step);
    a
}

/// Local-model probability for every step of every user, from
/// [`eval_windows`].
pub fn predict_local(model: &LocalModel, users: &[Vec<QuestionStep>]) -> Result<Vec<Vec<f64>>> {
    users
        .par_iter()
        .enumerate()
        .map(|(u, steps)| -> Result<Vec<f64>> {
            let w = model.config.window;
            let mut out = vec![0.0; steps.len()];
            for win in eval_windows(u, steps.len(), w) {
                let (frame, slot) = frame_for(users, &win, w);
                let probs = model.predict_dense(&frame)?;
                for (k, p) in probs.iter().enumerate().skip(slot) {
                    out[win.end + 1 + k - w] = *p;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Global-model probability for every step of every user.
pub fn predict_global(model: &GlobalModel, users: &[Vec<QuestionStep>]) -> Result<Vec<Vec<f64>>> {
    users.par_iter().map(|s| model.forward_steps(s)).collect()
}
