//! Two-phase training: the backbone on every source station, then only the
//! transform and combinator with the backbone frozen.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use microcast_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{StationSeries, WindowPair, WindowRef, ZeroShotSplit, LOC_DIM};
use crate::error::{Error, Result};
use crate::model::{Forward, ParamStore, BACKBONE, TRANSFORM};
use crate::transform::{Merge, ZeroShotModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Backbone,
    Transform,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Backbone => "backbone",
            Phase::Transform => "transform",
        }
    }

    /// Parameter namespace the optimiser may update in this phase.
    pub fn namespace(self) -> &'static str {
        match self {
            Phase::Backbone => BACKBONE,
            Phase::Transform => TRANSFORM,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backbone" => Ok(Phase::Backbone),
            "transform" => Ok(Phase::Transform),
            other => Err(Error::InvalidArgument(format!(
                "unknown phase `{other}` (expected backbone or transform)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: String,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Upper bound on optimiser steps per epoch; `None` sweeps every window.
    pub batches_per_epoch: Option<usize>,
    /// Upper bound on validation windows, taken evenly spaced in time.
    pub val_windows: Option<usize>,
    /// Global gradient-norm clip. Off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            loss: "mse".into(),
            patience: 10,
            max_epochs: 50,
            seed: 0,
            batches_per_epoch: None,
            val_windows: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.loss != "mse" {
            return bad(format!("unsupported loss `{}`", self.loss));
        }
        if self.batches_per_epoch == Some(0) || self.val_windows == Some(0) {
            return bad("batch and validation caps must be positive".into());
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam update of every parameter whose name passes
/// `trainable` and which holds a gradient.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, trainable: &dyn Fn(&str) -> bool) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let names: Vec<bool> = store.names().iter().map(|n| trainable(n)).collect();
    for (i, p) in store.tensors_mut().iter_mut().enumerate() {
        if !names[i] {
            continue;
        }
        let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64, trainable: &dyn Fn(&str) -> bool) {
    let mask: Vec<bool> = store.names().iter().map(|n| trainable(n)).collect();
    let sq: f64 = store
        .tensors()
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .filter_map(|(t, _)| t.grad())
        .flatten()
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm <= max_norm {
        return;
    }
    let s = max_norm / norm;
    for (t, m) in store.tensors_mut().iter_mut().zip(&mask) {
        if *m && t.grad().is_some() {
            t.grad_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub phase: Phase,
    /// Validation loss before the first update, when it was measured.
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// 0 when the untouched starting point scored best.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl TrainLog {
    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        let key = |l: &TrainLog| {
            (
                l.phase,
                l.initial_val_loss.map(f64::to_bits),
                l.epochs
                    .iter()
                    .map(|e| (e.epoch, e.train_loss.to_bits(), e.val_loss.to_bits()))
                    .collect::<Vec<_>>(),
                l.best_epoch,
                l.best_val_loss.to_bits(),
                l.stop_reason,
            )
        };
        key(self) == key(other)
    }

    /// One JSON object per epoch followed by a summary line.
    /// One line per epoch plus a closing summary, each stamped with the
    /// config digest and tool version.
    pub fn write_jsonl(&self, path: &Path, config_digest: &str) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for e in &self.epochs {
            lines.push(serde_json::json!({
                "record": "epoch",
                "config_digest": config_digest,
                "tool_version": env!("CARGO_PKG_VERSION"),
                "phase": self.phase,
                "epoch": e.epoch,
                "train_loss": e.train_loss,
                "val_loss": e.val_loss,
                "wall_secs": e.wall_secs,
            }));
        }
        lines.push(serde_json::json!({
            "record": "summary",
            "config_digest": config_digest,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "phase": self.phase,
            "initial_val_loss": self.initial_val_loss,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
        }));
        for l in lines {
            writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Epoch loop with early stopping.
///
/// `epoch_fn` trains for one epoch and returns `(train_loss, val_loss)`.
/// Patience counts trained epochs only; the returned state is the one with
/// the lowest validation loss, which may be the starting state when
/// `initial_val` is given.
pub fn run_epochs<S: Clone>(
    cfg: &TrainConfig,
    phase: Phase,
    initial_val: Option<f64>,
    state: &mut S,
    mut epoch_fn: impl FnMut(&mut S, usize) -> Result<(f64, f64)>,
) -> Result<(TrainLog, S)> {
    let mut best_state = state.clone();
    let mut best_val = initial_val.unwrap_or(f64::INFINITY);
    let mut best_epoch = 0;
    let mut best_trained = f64::INFINITY;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let (train_loss, val_loss) = epoch_fn(state, epoch)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_state = state.clone();
        }
        if val_loss < best_trained {
            best_trained = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let log = TrainLog {
        phase,
        initial_val_loss: initial_val,
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stop_reason,
    };
    Ok((log, best_state))
}

/// Evenly spaced subset of at most `cap` items, order preserved.
pub fn subsample<T: Clone>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(c) if items.len() > c => (0..c).map(|i| items[i * items.len() / c].clone()).collect(),
        _ => items.to_vec(),
    }
}

fn epoch_rng(seed: u64, phase: Phase, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 32) | epoch as u64);
    rng
}

fn diverged(store: &ParamStore, phase: Phase, epoch: usize, batch: usize, loss: f64) -> Error {
    let norms = store
        .norms()
        .into_iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Error::Diverged(format!(
        "{} phase, epoch {epoch}, batch {batch}: loss {loss}; parameter norms: {norms}",
        phase.as_str()
    ))
}

/// Sums per-sample losses and scales by `1/n`.
fn batch_mean(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut acc = losses[0];
    for l in &losses[1..] {
        acc = tape.add(acc, *l)?;
    }
    Ok(tape.scale(acc, 1.0 / losses.len() as f64))
}

fn step(
    model: &mut ZeroShotModel,
    tape: &Tape,
    loss: Var,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<()> {
    model.store.zero_grads();
    tape.backward_into(loss, model.store.tensors_mut())?;
    let ns = phase.namespace();
    let trainable = |n: &str| n.starts_with(ns);
    if let Some(c) = cfg.grad_clip {
        clip_gradients(&mut model.store, c, &trainable);
    }
    adam_step(&mut model.store, adam, cfg.learning_rate, &trainable);
    model.store.zero_grads();
    Ok(())
}

/// Normalised input, decoder context and target for one window.
struct Sample {
    x: Vec<f64>,
    ctx: Vec<f64>,
    y: Tensor,
    anchor: i64,
}

fn sample(model: &ZeroShotModel, w: &WindowPair) -> Sample {
    let y = w.y.iter().map(|v| model.normalizer.normalize_target(*v)).collect();
    Sample {
        x: model.normalized_x(w),
        ctx: model.context(&w.x),
        y: Tensor::new(vec![w.y.len(), 1], y).expect("column"),
        anchor: w.t,
    }
}

fn backbone_loss(model: &ZeroShotModel, tape: &mut Tape, fw: &mut Forward, s: &Sample) -> Result<Var> {
    let pred = model.backbone.forward(tape, fw, &s.x, &s.ctx, s.anchor)?;
    let y = tape.constant(s.y.clone());
    Ok(tape.mse(pred, y)?)
}

/// Mean normalised MSE of the plain encoder-decoder over `windows`.
pub fn backbone_validation_loss(
    model: &ZeroShotModel,
    stations: &[StationSeries],
    windows: &[WindowRef],
) -> Result<f64> {
    let c = model.config();
    let mut total = 0.0;
    for w in windows {
        let s = sample(model, &w.materialize(stations, c.lx, c.ly));
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&model.store);
        let l = backbone_loss(model, &mut tape, &mut fw, &s)?;
        total += tape.value(l).item();
    }
    Ok(total / windows.len().max(1) as f64)
}

/// Phase 1: fits the encoder-decoder on the history windows of every
/// training station and keeps the best-validation parameters.
pub fn train_backbone(
    model: &mut ZeroShotModel,
    stations: &[StationSeries],
    split: &ZeroShotSplit,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if split.train_stations.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "backbone training needs at least 2 stations, split has {}",
            split.train_stations.len()
        )));
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidArgument("split has no training or validation windows".into()));
    }
    let phase = Phase::Backbone;
    let val = subsample(&split.val, cfg.val_windows);
    let (lx, ly) = (model.config().lx, model.config().ly);
    let dropout = model.config().dropout;
    let mut adam = AdamState::new(&model.store);
    let (log, best) = run_epochs(cfg, phase, None, model, |model, epoch| {
        let mut order = split.train.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, phase, epoch));
        let mut n_batches = order.len().div_ceil(cfg.batch_size);
        if let Some(cap) = cfg.batches_per_epoch {
            n_batches = n_batches.min(cap);
        }
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).take(n_batches).enumerate() {
            let samples: Vec<Sample> = chunk
                .iter()
                .map(|w| sample(model, &w.materialize(stations, lx, ly)))
                .collect();
            let mut tape = Tape::new();
            let loss = {
                let seed = cfg.seed ^ ((epoch as u64) << 40) ^ ((b as u64) << 20);
                let mut fw = Forward::train(&model.store, dropout, seed);
                let mut losses = Vec::with_capacity(samples.len());
                for s in &samples {
                    losses.push(backbone_loss(model, &mut tape, &mut fw, s)?);
                }
                batch_mean(&mut tape, &losses)?
            };
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(diverged(&model.store, phase, epoch, b, lv));
            }
            total += lv;
            step(model, &tape, loss, &mut adam, cfg, phase)?;
        }
        let val_loss = backbone_validation_loss(model, stations, &val)?;
        Ok((total / n_batches as f64, val_loss))
    })?;
    *model = best;
    Ok(log)
}

/// Anchors at which every training station has a valid window.
fn aligned_anchors(windows: &[WindowRef], stations: &[usize]) -> Vec<i64> {
    let mut by_anchor: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for w in windows {
        by_anchor.entry(w.anchor).or_default().push(w.station);
    }
    by_anchor
        .into_iter()
        .filter(|(_, s)| stations.iter().all(|st| s.contains(st)))
        .map(|(a, _)| a)
        .collect()
}

/// Order in which training stations act as pseudo-target during `epoch`.
pub fn pseudo_target_schedule(train_stations: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train_stations.to_vec();
    order.shuffle(&mut epoch_rng(seed ^ 0x5eed, Phase::Transform, epoch));
    order
}

/// Frozen encoder outputs, computed on first use.
struct EmbeddingCache<'a> {
    stations: &'a [StationSeries],
    map: HashMap<(usize, i64), Tensor>,
}

impl<'a> EmbeddingCache<'a> {
    fn get(&mut self, model: &ZeroShotModel, station: usize, anchor: i64) -> Result<&Tensor> {
        if !self.map.contains_key(&(station, anchor)) {
            let c = model.config();
            let w = WindowRef { station, anchor }.materialize(self.stations, c.lx, c.ly);
            let e = model.embedding(&w)?;
            self.map.insert((station, anchor), e);
        }
        Ok(&self.map[&(station, anchor)])
    }
}

fn pseudo_target_loss(
    model: &ZeroShotModel,
    cache: &mut EmbeddingCache,
    tape: &mut Tape,
    fw: &mut Forward,
    train_stations: &[usize],
    target: usize,
    anchor: i64,
    merge: Merge,
) -> Result<Var> {
    let stations = cache.stations;
    let mut sources: Vec<(usize, Var, [f64; LOC_DIM])> = Vec::with_capacity(train_stations.len());
    for &si in train_stations.iter().filter(|&&s| s != target) {
        let e = cache.get(model, si, anchor)?.clone();
        let slot = model.slot_of(stations[si].id())?;
        sources.push((slot, tape.constant(e), model.normalizer.location(&stations[si].meta)));
    }
    let tloc = model.normalizer.location(&stations[target].meta);
    let merged = model.merged_embedding(tape, fw, &sources, &tloc, merge)?;
    let c = model.config();
    let tw = WindowRef {
        station: target,
        anchor,
    }
    .materialize(stations, c.lx, c.ly);
    let s = sample(model, &tw);
    let pred = model.backbone.decode_from(tape, fw, merged, &s.ctx, anchor)?;
    let y = tape.constant(s.y);
    Ok(tape.mse(pred, y)?)
}

/// Phase-2 objective on the validation anchors: every training station in
/// turn is forecast from all the others.
pub fn transform_validation_loss(
    model: &ZeroShotModel,
    stations: &[StationSeries],
    split: &ZeroShotSplit,
    cfg: &TrainConfig,
    merge: Merge,
) -> Result<f64> {
    let mut cache = EmbeddingCache {
        stations,
        map: HashMap::new(),
    };
    let anchors = subsample(&aligned_anchors(&split.val, &split.train_stations), cfg.val_windows);
    transform_val_with(model, &mut cache, split, &anchors, merge)
}

fn transform_val_with(
    model: &ZeroShotModel,
    cache: &mut EmbeddingCache,
    split: &ZeroShotSplit,
    anchors: &[i64],
    merge: Merge,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for &p in &split.train_stations {
        for &a in anchors {
            let mut tape = Tape::new();
            let mut fw = Forward::eval(&model.store);
            let l = pseudo_target_loss(model, cache, &mut tape, &mut fw, &split.train_stations, p, a, merge)?;
            total += tape.value(l).item();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

/// Phase 2: trains δ and the combinator logits with every other parameter
/// frozen, rotating the pseudo-target through the training stations.
pub fn train_transform(
    model: &mut ZeroShotModel,
    stations: &[StationSeries],
    split: &ZeroShotSplit,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let train_stations = &split.train_stations;
    if train_stations.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "transform training needs at least 2 stations to pair sources with a pseudo-target, split has {}",
            train_stations.len()
        )));
    }
    for &s in train_stations {
        model.slot_of(stations[s].id())?;
    }
    let phase = Phase::Transform;
    let train_anchors = aligned_anchors(&split.train, train_stations);
    let val_anchors = subsample(&aligned_anchors(&split.val, train_stations), cfg.val_windows);
    if train_anchors.is_empty() || val_anchors.is_empty() {
        return Err(Error::InvalidArgument(
            "no anchor has windows at every training station".into(),
        ));
    }
    let mut cache = EmbeddingCache {
        stations,
        map: HashMap::new(),
    };
    let initial = transform_val_with(model, &mut cache, split, &val_anchors, Merge::Transform)?;
    let per_target = cfg
        .batches_per_epoch
        .map(|c| c.div_ceil(train_stations.len()))
        .unwrap_or(usize::MAX);
    let mut adam = AdamState::new(&model.store);
    let (log, best) = run_epochs(cfg, phase, Some(initial), model, |model, epoch| {
        let mut rng = epoch_rng(cfg.seed, phase, epoch);
        let mut total = 0.0;
        let mut n_batches = 0usize;
        for p in pseudo_target_schedule(train_stations, cfg.seed, epoch) {
            let mut anchors = train_anchors.clone();
            anchors.shuffle(&mut rng);
            for chunk in anchors.chunks(cfg.batch_size).take(per_target) {
                let mut tape = Tape::new();
                let loss = {
                    let mut fw = Forward::eval(&model.store);
                    let mut losses = Vec::with_capacity(chunk.len());
                    for &a in chunk {
                        losses.push(pseudo_target_loss(
                            model,
                            &mut cache,
                            &mut tape,
                            &mut fw,
                            train_stations,
                            p,
                            a,
                            Merge::Transform,
                        )?);
                    }
                    batch_mean(&mut tape, &losses)?
                };
                let lv = tape.value(loss).item();
                if !lv.is_finite() {
                    return Err(diverged(&model.store, phase, epoch, n_batches, lv));
                }
                total += lv;
                n_batches += 1;
                step(model, &tape, loss, &mut adam, cfg, phase)?;
            }
        }
        let val = transform_val_with(model, &mut cache, split, &val_anchors, Merge::Transform)?;
        Ok((total / n_batches.max(1) as f64, val))
    })?;
    *model = best;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, v) in values {
            s.insert(n, Tensor::vector(v.clone())).unwrap();
        }
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[("backbone.a", vec![1.0, -2.0])]);
        s.tensors_mut()[0].accumulate_grad(&[0.0, 0.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, &|_| true);
        assert_eq!(s.tensors()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn frozen_namespace_is_untouched() {
        let mut s = store_with(&[("backbone.a", vec![1.0]), ("transform.b", vec![1.0])]);
        for t in s.tensors_mut() {
            t.accumulate_grad(&[5.0]);
        }
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, &|n| n.starts_with(TRANSFORM));
        assert_eq!(s.get("backbone.a").unwrap().data(), &[1.0]);
        assert!(s.get("transform.b").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn scalar_quadratic_converges() {
        // minimise (w - 3)^2 from w = -2
        let mut s = store_with(&[("w", vec![-2.0])]);
        let mut st = AdamState::new(&s);
        for _ in 0..500 {
            let w = s.tensors()[0].data()[0];
            s.tensors_mut()[0].clear_grad();
            s.tensors_mut()[0].accumulate_grad(&[2.0 * (w - 3.0)]);
            adam_step(&mut s, &mut st, 0.05, &|_| true);
        }
        assert!((s.tensors()[0].data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn patience_one_stops_after_two_worsening_epochs() {
        let cfg = TrainConfig {
            patience: 1,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let mut state = 0usize;
        let (log, best) = run_epochs(&cfg, Phase::Backbone, None, &mut state, |s, e| {
            *s = e;
            Ok((1.0, e as f64))
        })
        .unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(log.stop_reason, StopReason::Patience);
        assert_eq!((log.best_epoch, best), (1, 1));
    }

    #[test]
    fn best_not_last_is_returned() {
        let cfg = TrainConfig {
            patience: 3,
            max_epochs: 6,
            ..TrainConfig::default()
        };
        let vals = [5.0, 3.0, 4.0, 2.0, 2.5, 2.2];
        let mut state = 0usize;
        let (log, best) = run_epochs(&cfg, Phase::Backbone, None, &mut state, |s, e| {
            *s = e;
            Ok((0.0, vals[e - 1]))
        })
        .unwrap();
        assert_eq!(log.stop_reason, StopReason::MaxEpochs);
        assert_eq!(best, 4);
        let min = log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log.best_val_loss, min);
    }

    #[test]
    fn starting_point_wins_when_training_only_hurts() {
        let cfg = TrainConfig {
            patience: 2,
            ..TrainConfig::default()
        };
        let mut state = 0usize;
        let (log, best) = run_epochs(&cfg, Phase::Transform, Some(1.0), &mut state, |s, e| {
            *s = e;
            Ok((0.0, 1.0 + e as f64))
        })
        .unwrap();
        assert_eq!((log.best_epoch, best, log.epochs.len()), (0, 0, 3));
    }

    #[test]
    fn schedule_is_a_permutation() {
        let st = vec![4, 0, 7, 2, 9];
        for epoch in 1..5 {
            let mut s = pseudo_target_schedule(&st, 11, epoch);
            s.sort();
            assert_eq!(s, vec![0, 2, 4, 7, 9]);
        }
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let d = TrainConfig::default();
        assert_eq!((d.batch_size, d.learning_rate, d.patience), (32, 1e-4, 10));
        assert!(TrainConfig { patience: 0, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..d.clone() }.validate().is_err());
        assert!(TrainConfig { loss: "mae".into(), ..d }.validate().is_err());
    }

    #[test]
    fn subsample_is_even() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(subsample(&v, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(subsample(&v, Some(20)), v);
        assert_eq!(subsample(&v, None), v);
    }
}
