//! Location-aware transform of source-station embeddings and their weighted
//! combination into a target-station embedding.

use std::cmp::Ordering;

use microcast_tensor::{kernels, Tape, Tensor, Var};

use crate::data::{Normalizer, StationMeta, WindowPair, LOC_DIM};
use crate::error::{Error, Result};
use crate::model::{Forward, ModelConfig, ParamStore, Seq2Seq, TRANSFORM};

pub const DELTA_W: &str = "transform.delta.w";
pub const DELTA_B: &str = "transform.delta.b";
pub const LOGITS: &str = "transform.logits";

/// The fully connected layer δ and one combinator logit per source station.
#[derive(Debug, Clone)]
pub struct TransformLayer {
    w: usize,
    b: usize,
    logits: usize,
    d_model: usize,
    n_sources: usize,
}

impl TransformLayer {
    /// Adds δ at identity (zero weight on the location inputs, zero bias) and
    /// equal logits.
    pub fn init(store: &mut ParamStore, d_model: usize, n_sources: usize) -> Result<Self> {
        if n_sources == 0 {
            return Err(Error::InvalidArgument("transform needs at least one source".into()));
        }
        let mut w = Tensor::zeros(&[d_model + 2 * LOC_DIM, d_model]);
        for i in 0..d_model {
            w.data_mut()[i * d_model + i] = 1.0;
        }
        Ok(Self {
            w: store.insert(DELTA_W, w)?,
            b: store.insert(DELTA_B, Tensor::zeros(&[d_model]))?,
            logits: store.insert(LOGITS, Tensor::zeros(&[n_sources, 1]))?,
            d_model,
            n_sources,
        })
    }

    pub fn bind(store: &ParamStore, d_model: usize, n_sources: usize) -> Result<Self> {
        Ok(Self {
            w: store.expect(DELTA_W, &[d_model + 2 * LOC_DIM, d_model])?,
            b: store.expect(DELTA_B, &[d_model])?,
            logits: store.expect(LOGITS, &[n_sources, 1])?,
            d_model,
            n_sources,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    /// Position-wise `δ(concat(E[p], loc_src, loc_tar))`.
    pub fn transform_embedding(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        e: Var,
        loc_src: &[f64],
        loc_tar: &[f64],
    ) -> Result<Var> {
        if loc_src.len() != LOC_DIM || loc_tar.len() != LOC_DIM {
            return Err(Error::Contract(format!(
                "location vectors must have {LOC_DIM} entries, got {} and {}",
                loc_src.len(),
                loc_tar.len()
            )));
        }
        let shape = tape.shape(e).to_vec();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::Contract(format!(
                "embedding shape {shape:?} does not match width {}",
                self.d_model
            )));
        }
        let rows = shape[0];
        let src = tape.constant(Tensor::vector(loc_src.to_vec()));
        let tar = tape.constant(Tensor::vector(loc_tar.to_vec()));
        let src = tape.repeat_rows(src, rows);
        let tar = tape.repeat_rows(tar, rows);
        let z = tape.concat_cols(&[e, src, tar])?;
        let w = fw.param(tape, self.w);
        let b = fw.param(tape, self.b);
        let y = tape.matmul(z, w)?;
        Ok(tape.add_row(y, b)?)
    }

    /// Logits for the given source slots, as an `n × 1` column.
    pub fn logits(&self, tape: &mut Tape, fw: &mut Forward, slots: &[usize]) -> Result<Var> {
        let all = fw.param(tape, self.logits);
        if slots.len() == self.n_sources && slots.iter().enumerate().all(|(i, s)| i == *s) {
            return Ok(all);
        }
        Ok(tape.gather_rows(all, slots)?)
    }
}

/// Normalised positive weights `softplus(l_i) / Σ softplus(l_j)`.
pub fn combinator_weights(logits: &[f64]) -> Vec<f64> {
    let sp: Vec<f64> = logits.iter().map(|l| kernels::softplus(*l)).collect();
    let total: f64 = sp.iter().sum();
    sp.iter().map(|s| s / total).collect()
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Convex combination of same-shape embeddings with weights from `logits`
/// (an `n × 1` column aligned with `embeddings`).
///
/// Terms are accumulated in an order fixed by the (logit, embedding) values
/// themselves, so jointly permuting both inputs leaves the result bitwise
/// unchanged.
pub fn combine(tape: &mut Tape, embeddings: &[Var], logits: Var) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(Error::Contract("combine needs at least one embedding".into()));
    }
    let n = embeddings.len();
    if tape.value(logits).numel() != n {
        return Err(Error::Contract(format!(
            "{} logits for {n} embeddings",
            tape.value(logits).numel()
        )));
    }
    let shape = tape.shape(embeddings[0]).to_vec();
    if let Some(bad) = embeddings.iter().find(|e| tape.shape(**e) != shape) {
        return Err(Error::Contract(format!(
            "embedding shapes differ: {shape:?} vs {:?}",
            tape.shape(*bad)
        )));
    }
    let lv = tape.value(logits).data().to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        lv[a].total_cmp(&lv[b]).then_with(|| {
            lexicographic(tape.value(embeddings[a]).data(), tape.value(embeddings[b]).data())
        })
    });
    let col = if tape.shape(logits).len() == 2 {
        logits
    } else {
        let t = tape.value(logits).clone().reshape(vec![n, 1])?;
        tape.constant(t)
    };
    let sorted = tape.gather_rows(col, &order)?;
    let sp = tape.softplus(sorted);
    let total = tape.sum(sp);
    let w = tape.div_by(sp, total)?;
    // E_0 + Σ w_k (E_k − E_0): equal to Σ w_k E_k since the weights sum to
    // one, and exact when every embedding is the same
    let base = embeddings[order[0]];
    let mut acc = base;
    for (k, &i) in order.iter().enumerate().skip(1) {
        let wk = tape.select(w, k)?;
        let diff = tape.sub(embeddings[i], base)?;
        let term = tape.scale_by(diff, wk)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// A source station's input window at the shared anchor.
#[derive(Debug, Clone)]
pub struct SourceInput<'a> {
    pub station_id: &'a str,
    pub window: &'a WindowPair,
    pub meta: &'a StationMeta,
}

/// How source embeddings are merged before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    /// δ on every source, then the learned combinator.
    Transform,
    /// Untransformed embeddings averaged with equal weights.
    MeanEmbedding,
}

/// Backbone, transform and everything needed to run them on raw data.
#[derive(Debug, Clone)]
pub struct ZeroShotModel {
    pub backbone: Seq2Seq,
    pub transform: TransformLayer,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    /// Station ids in logit order.
    pub source_ids: Vec<String>,
}

impl ZeroShotModel {
    /// Fresh backbone from `seed` plus an identity transform over
    /// `source_ids`.
    pub fn init(
        config: ModelConfig,
        normalizer: Normalizer,
        source_ids: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        if normalizer.channels.len() != config.n_features {
            return Err(Error::Contract(format!(
                "normaliser has {} channels, model expects {}",
                normalizer.channels.len(),
                config.n_features
            )));
        }
        let mut store = ParamStore::new();
        let backbone = Seq2Seq::init(config, &mut store, seed)?;
        let transform = TransformLayer::init(&mut store, backbone.config.d_model, source_ids.len())?;
        Ok(Self {
            backbone,
            transform,
            store,
            normalizer,
            source_ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.backbone.config
    }

    pub fn slot_of(&self, id: &str) -> Result<usize> {
        self.source_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownStation {
                id: id.to_string(),
                available: self.source_ids.join(", "),
            })
    }

    pub fn effective_weights(&self) -> Result<Vec<f64>> {
        Ok(combinator_weights(self.store.get(LOGITS)?.data()))
    }

    /// Normalised copy of a raw window's inputs.
    pub fn normalized_x(&self, w: &WindowPair) -> Vec<f64> {
        let mut x = w.x.clone();
        self.normalizer.normalize_rows(&mut x);
        x
    }

    /// Encoder output for a raw window, evaluated without dropout.
    pub fn embedding(&self, w: &WindowPair) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&self.store);
        let e = self
            .backbone
            .encode_window(&mut tape, &mut fw, &self.normalized_x(w), w.t)?;
        Ok(tape.value(e).clone())
    }

    /// Normalised decoder warm start taken from the tail of `target_x`.
    pub fn context(&self, target_x: &[f64]) -> Vec<f64> {
        self.normalizer.decoder_context(target_x, self.config().label_len)
    }

    /// Builds the merged embedding on `tape` from per-source embeddings.
    pub fn merged_embedding(
        &self,
        tape: &mut Tape,
        fw: &mut Forward,
        sources: &[(usize, Var, [f64; LOC_DIM])],
        target_loc: &[f64; LOC_DIM],
        merge: Merge,
    ) -> Result<Var> {
        if sources.is_empty() {
            return Err(Error::Contract("zero-shot forecast needs at least one source".into()));
        }
        match merge {
            Merge::Transform => {
                let mut es = Vec::with_capacity(sources.len());
                for (_, e, loc) in sources {
                    es.push(self.transform.transform_embedding(tape, fw, *e, loc, target_loc)?);
                }
                let slots: Vec<usize> = sources.iter().map(|s| s.0).collect();
                let logits = self.transform.logits(tape, fw, &slots)?;
                combine(tape, &es, logits)
            }
            Merge::MeanEmbedding => {
                let es: Vec<Var> = sources.iter().map(|s| s.1).collect();
                let zeros = tape.constant(Tensor::zeros(&[es.len(), 1]));
                combine(tape, &es, zeros)
            }
        }
    }

    /// Encode every source, merge, and decode with the target's own recent
    /// values as warm start. Returns the forecast in original units.
    ///
    /// `target_x` is the target's raw input window; only its last
    /// `label_len` target-channel values are read.
    pub fn zero_shot_forecast(
        &self,
        sources: &[SourceInput],
        target_meta: &StationMeta,
        target_x: &[f64],
        anchor: i64,
        merge: Merge,
    ) -> Result<Vec<f64>> {
        if sources.is_empty() {
            return Err(Error::Contract("zero-shot forecast needs at least one source".into()));
        }
        if let Some(bad) = sources.iter().find(|s| s.window.t != anchor) {
            return Err(Error::Contract(format!(
                "source {} window ends at {}, expected anchor {anchor}",
                bad.station_id, bad.window.t
            )));
        }
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&self.store);
        let mut encoded = Vec::with_capacity(sources.len());
        for s in sources {
            let slot = match merge {
                Merge::Transform => self.slot_of(s.station_id)?,
                Merge::MeanEmbedding => 0,
            };
            let x = self.normalized_x(s.window);
            let e = self.backbone.encode_window(&mut tape, &mut fw, &x, anchor)?;
            encoded.push((slot, e, self.normalizer.location(s.meta)));
        }
        let target_loc = self.normalizer.location(target_meta);
        let merged = self.merged_embedding(&mut tape, &mut fw, &encoded, &target_loc, merge)?;
        let ctx = self.context(target_x);
        let y = self.backbone.decode_from(&mut tape, &mut fw, merged, &ctx, anchor)?;
        Ok(self.denormalize(tape.value(y).data()))
    }

    /// Plain encoder-decoder forecast from the station's own window, in
    /// original units.
    pub fn direct_forecast(&self, w: &WindowPair) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut fw = Forward::eval(&self.store);
        let x = self.normalized_x(w);
        let ctx = self.context(&w.x);
        let y = self.backbone.forward(&mut tape, &mut fw, &x, &ctx, w.t)?;
        Ok(self.denormalize(tape.value(y).data()))
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| self.normalizer.denormalize_target(*v)).collect()
    }

    /// Parameters outside the transform namespace.
    pub fn backbone_digest(&self) -> String {
        self.store.digest(crate::model::BACKBONE)
    }

    pub fn transform_digest(&self) -> String {
        self.store.digest(TRANSFORM)
    }
}
