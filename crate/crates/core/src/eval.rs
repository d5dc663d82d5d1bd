//! Zero-shot evaluation: metrics, model comparisons, learning curves and the
//! report files they produce.

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, ArModel};
use crate::data::{
    find_station, fit_normalizer, raw_location, split_with, Scenario, SplitConfig,
    StationSeries, WindowPair, WindowRef, ZeroShotSplit,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::time::format_hour;
use crate::train::{train_backbone, train_transform, TrainConfig, TrainLog};
use crate::transform::{Merge, SourceInput, ZeroShotModel};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// First 16 hex digits of the SHA-256 of the value's canonical JSON (object
/// keys sorted).
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_value(value)?.to_string();
    let hash = Sha256::digest(canonical.as_bytes());
    Ok(hex::encode(hash)[..16].to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LastValue,
    Persistence,
    MovingAverage,
    Ar,
    /// Encoder-decoder without the transform: mean source embedding in the
    /// zero-shot scenario, the target's own window with full data.
    Backbone,
    #[serde(rename = "backbone_transform", alias = "transform")]
    Transform,
    /// Encoder-decoder fed the target's own input window.
    BackboneDirect,
}

impl ModelKind {
    /// The comparison-table models (the direct backbone is opt-in).
    pub const TABLE: [ModelKind; 6] = [
        ModelKind::LastValue,
        ModelKind::Persistence,
        ModelKind::MovingAverage,
        ModelKind::Ar,
        ModelKind::Backbone,
        ModelKind::Transform,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LastValue => "last_value",
            ModelKind::Persistence => "persistence",
            ModelKind::MovingAverage => "moving_average",
            ModelKind::Ar => "ar",
            ModelKind::Backbone => "backbone",
            ModelKind::Transform => "backbone_transform",
            ModelKind::BackboneDirect => "backbone_direct",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(
            self,
            ModelKind::Backbone | ModelKind::Transform | ModelKind::BackboneDirect
        )
    }

    /// `all` or a comma-separated list of names.
    pub fn parse_list(s: &str) -> Result<Vec<ModelKind>> {
        if s.trim() == "all" {
            return Ok(Self::TABLE.to_vec());
        }
        let mut out: Vec<ModelKind> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ModelKind::LastValue,
            ModelKind::Persistence,
            ModelKind::MovingAverage,
            ModelKind::Ar,
            ModelKind::Backbone,
            ModelKind::Transform,
            ModelKind::BackboneDirect,
        ]
        .into_iter()
        .find(|k| k.as_str() == s || (s == "transform" && *k == ModelKind::Transform))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown model `{s}` (expected all, last_value, persistence, moving_average, ar, backbone, backbone_transform or backbone_direct)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub ma_window: usize,
    pub persistence_period: usize,
    pub ar_max_lag: usize,
    pub ar_trend: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            ma_window: 24,
            persistence_period: 24,
            ar_max_lag: 48,
            ar_trend: true,
        }
    }
}

fn check_pairs(forecasts: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<usize> {
    if forecasts.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} forecasts for {} truths",
            forecasts.len(),
            truths.len()
        )));
    }
    let ly = truths.first().map_or(0, Vec::len);
    if forecasts.iter().chain(truths).any(|v| v.len() != ly) {
        return Err(Error::Contract("forecast and truth lengths differ".into()));
    }
    Ok(ly)
}

fn per_hour(forecasts: &[Vec<f64>], truths: &[Vec<f64>], f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let ly = check_pairs(forecasts, truths)?;
    let n = forecasts.len() as f64;
    Ok((0..ly)
        .map(|h| {
            forecasts
                .iter()
                .zip(truths)
                .map(|(p, t)| f(p[h] - t[h]))
                .sum::<f64>()
                / n
        })
        .collect())
}

/// Mean over windows of the squared error at each forecast hour.
pub fn mse_per_hour(forecasts: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Vec<f64>> {
    per_hour(forecasts, truths, |e| e * e)
}

pub fn mae_per_hour(forecasts: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Vec<f64>> {
    per_hour(forecasts, truths, f64::abs)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; `None` below two values.
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (v.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowType {
    /// Computed here.
    Cell,
    /// Aggregate over seeds.
    Summary,
    /// A published figure shown for context; never computed here.
    ExternalReference,
}

/// Errors of one model in one scenario for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub row_type: RowType,
    pub scenario: Scenario,
    pub model: String,
    pub seed: Option<u64>,
    pub per_hour_mse: Vec<f64>,
    pub per_hour_mae: Vec<f64>,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl EvalReport {
    pub fn from_forecasts(
        scenario: Scenario,
        model: &str,
        seed: Option<u64>,
        forecasts: &[Vec<f64>],
        truths: &[Vec<f64>],
        config_digest: &str,
    ) -> Result<Self> {
        if forecasts.is_empty() {
            return Err(Error::Contract(format!("no evaluation windows for {model}")));
        }
        let per_hour_mse = mse_per_hour(forecasts, truths)?;
        let per_hour_mae = mae_per_hour(forecasts, truths)?;
        Ok(Self {
            row_type: RowType::Cell,
            scenario,
            model: model.to_string(),
            seed,
            mse: mean(&per_hour_mse),
            mae: mean(&per_hour_mae),
            per_hour_mse,
            per_hour_mae,
            n_windows: forecasts.len(),
            config_digest: config_digest.to_string(),
            note: None,
        })
    }

    /// A labelled published number kept alongside computed rows.
    pub fn external_reference(
        scenario: Scenario,
        model: &str,
        mse: f64,
        mae: f64,
        note: &str,
        config_digest: &str,
    ) -> Self {
        Self {
            row_type: RowType::ExternalReference,
            scenario,
            model: model.to_string(),
            seed: None,
            per_hour_mse: Vec::new(),
            per_hour_mae: Vec::new(),
            mse,
            mae,
            n_windows: 0,
            config_digest: config_digest.to_string(),
            note: Some(note.to_string()),
        }
    }
}

/// Mean and spread over seeds of one (scenario, model) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub model: String,
    pub n_seeds: usize,
    pub mse_mean: f64,
    pub mse_std: Option<f64>,
    pub mae_mean: f64,
    pub mae_std: Option<f64>,
    pub per_hour_mse_mean: Vec<f64>,
}

pub fn summarize(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(Scenario, String)> = Vec::new();
    for r in reports.iter().filter(|r| r.row_type == RowType::Cell) {
        let k = (r.scenario, r.model.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(scenario, model)| {
            let rows: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| r.row_type == RowType::Cell && r.scenario == scenario && r.model == model)
                .collect();
            let mses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
            let maes: Vec<f64> = rows.iter().map(|r| r.mae).collect();
            let ly = rows[0].per_hour_mse.len();
            let per_hour_mse_mean = (0..ly)
                .map(|h| rows.iter().map(|r| r.per_hour_mse[h]).sum::<f64>() / rows.len() as f64)
                .collect();
            SummaryRow {
                scenario,
                model,
                n_seeds: rows.len(),
                mse_mean: mean(&mses),
                mse_std: sample_std(&mses),
                mae_mean: mean(&maes),
                mae_std: sample_std(&maes),
                per_hour_mse_mean,
            }
        })
        .collect()
}

/// One hourly point of a prediction-vs-truth trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub model: String,
    pub station: String,
    pub anchor: String,
    pub timestamp: String,
    pub horizon: usize,
    pub truth: f64,
    pub prediction: f64,
}

fn trace_rows(model: &str, w: &WindowPair, forecast: &[f64]) -> Vec<TraceRow> {
    forecast
        .iter()
        .zip(&w.y)
        .enumerate()
        .map(|(h, (p, t))| TraceRow {
            model: model.to_string(),
            station: w.station_id.clone(),
            anchor: format_hour(w.t),
            timestamp: format_hour(w.t + 1 + h as i64),
            horizon: h + 1,
            truth: *t,
            prediction: *p,
        })
        .collect()
}

/// `k` stations from `candidates` closest to `target`, by Euclidean distance
/// between locations z-scored over the candidates. Ties go to the earlier
/// candidate.
pub fn nearest_stations(
    stations: &[StationSeries],
    target: usize,
    candidates: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if k > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "asked for {k} stations but only {} are available",
            candidates.len()
        )));
    }
    let locs: Vec<[f64; 3]> = candidates.iter().map(|&i| raw_location(&stations[i].meta)).collect();
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for d in 0..3 {
        let v: Vec<f64> = locs.iter().map(|l| l[d]).collect();
        mean[d] = self::mean(&v);
        let var = v.iter().map(|x| (x - mean[d]).powi(2)).sum::<f64>() / v.len() as f64;
        std[d] = var.sqrt().max(1e-8);
    }
    let t = raw_location(&stations[target].meta);
    let dist = |l: &[f64; 3]| -> f64 {
        (0..3)
            .map(|d| ((l[d] - t[d]) / std[d]).powi(2))
            .sum::<f64>()
    };
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| dist(&locs[a]).total_cmp(&dist(&locs[b])).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&i| candidates[i]).collect())
}

/// A split plus the evaluation anchors every model is scored on.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub split: ZeroShotSplit,
    /// Stations that supply source windows at evaluation time.
    pub sources: Vec<usize>,
    /// Test anchors at which the target and every source have a full window.
    pub anchors: Vec<i64>,
}

impl ScenarioData {
    pub fn new(
        stations: &[StationSeries],
        target_id: &str,
        train_ids: &[String],
        scenario: Scenario,
        cfg: &SplitConfig,
    ) -> Result<Self> {
        let split = split_with(stations, target_id, train_ids, scenario, cfg)?;
        split.assert_no_leakage(stations)?;
        let sources: Vec<usize> = split
            .train_stations
            .iter()
            .copied()
            .filter(|&s| s != split.target)
            .collect();
        if sources.is_empty() {
            return Err(Error::InvalidArgument("no source stations besides the target".into()));
        }
        let anchors = split
            .test
            .iter()
            .map(|w| w.anchor)
            .filter(|&a| sources.iter().all(|&s| window_valid(&stations[s], a, cfg.lx, cfg.ly)))
            .collect::<Vec<_>>();
        if anchors.is_empty() {
            return Err(Error::InvalidArgument(
                "no test window has data at the target and every source".into(),
            ));
        }
        Ok(Self {
            split,
            sources,
            anchors,
        })
    }

    pub fn scenario(&self) -> Scenario {
        self.split.scenario
    }

    /// Whether the target and every source have a full window at `anchor`.
    pub fn covers(&self, stations: &[StationSeries], anchor: i64, lx: usize, ly: usize) -> bool {
        std::iter::once(&self.split.target)
            .chain(&self.sources)
            .all(|&s| window_valid(&stations[s], anchor, lx, ly))
    }
}

fn window_valid(s: &StationSeries, anchor: i64, lx: usize, ly: usize) -> bool {
    let Some(row) = s.row_of(anchor) else { return false };
    row + 1 >= lx && row + ly < s.len() && (row + 1 - lx..=row + ly).all(|r| s.is_valid_row(r))
}

/// AR baseline fitted on the target's own history (full data) or on the
/// nearest source station's history (zero-shot).
pub fn fit_ar_baseline(stations: &[StationSeries], sd: &ScenarioData, cfg: &BaselineConfig) -> Result<ArModel> {
    let station = match sd.scenario() {
        Scenario::FullData => sd.split.target,
        Scenario::ZeroShot => nearest_stations(stations, sd.split.target, &sd.split.train_stations, 1)?[0],
    };
    let s = &stations[station];
    let end = (sd.split.test_start - s.start_hour).clamp(0, s.len() as i64) as usize;
    // longest gap-free stretch ending at the cutoff
    let y = s.target();
    let begin = (0..end).rev().find(|&r| !y[r].is_finite()).map_or(0, |r| r + 1);
    baselines::fit_ar(&y[begin..end], s.start_hour + begin as i64, cfg.ar_max_lag, cfg.ar_trend)
}


/// Everything a scoring pass reads.
#[derive(Clone, Copy)]
pub struct EvalInputs<'a> {
    pub stations: &'a [StationSeries],
    pub data: &'a ScenarioData,
    pub baselines: &'a BaselineConfig,
    pub lx: usize,
    pub ly: usize,
    pub ar: Option<&'a ArModel>,
    pub learned: Option<&'a ZeroShotModel>,
}

impl EvalInputs<'_> {
    fn forecast(
        &self,
        kind: ModelKind,
        target: &WindowPair,
        sources: &[WindowPair],
    ) -> Result<Vec<f64>> {
        let tc = self.stations[self.data.split.target].target_index();
        let x = target.x_channel(tc);
        let ly = self.ly;
        let learned = || {
            self.learned
                .ok_or_else(|| Error::Contract(format!("{} needs a trained model", kind.as_str())))
        };
        match kind {
            ModelKind::LastValue => baselines::last_value(&x, ly),
            ModelKind::Persistence => baselines::persistence(&x, self.baselines.persistence_period, ly),
            ModelKind::MovingAverage => baselines::moving_average(&x, self.baselines.ma_window, ly),
            ModelKind::Ar => {
                let ar = self
                    .ar
                    .ok_or_else(|| Error::Contract("ar needs a fitted model".into()))?;
                baselines::forecast_ar(ar, &x, target.t, ly)
            }
            ModelKind::BackboneDirect => learned()?.direct_forecast(target),
            ModelKind::Backbone if self.data.scenario() == Scenario::FullData => {
                learned()?.direct_forecast(target)
            }
            ModelKind::Backbone => self.zero_shot(learned()?, target, sources, Merge::MeanEmbedding),
            ModelKind::Transform => self.zero_shot(learned()?, target, sources, Merge::Transform),
        }
    }

    fn zero_shot(
        &self,
        model: &ZeroShotModel,
        target: &WindowPair,
        sources: &[WindowPair],
        merge: Merge,
    ) -> Result<Vec<f64>> {
        let inputs: Vec<SourceInput> = self
            .data
            .sources
            .iter()
            .zip(sources)
            .map(|(&s, w)| SourceInput {
                station_id: self.stations[s].id(),
                window: w,
                meta: &self.stations[s].meta,
            })
            .collect();
        let meta = &self.stations[self.data.split.target].meta;
        model.zero_shot_forecast(&inputs, meta, &target.x, target.t, merge)
    }

    /// Forecast rows of one model at the given anchors.
    pub fn trace(&self, kind: ModelKind, anchors: &[i64]) -> Result<Vec<TraceRow>> {
        self.data.split.assert_no_leakage(self.stations)?;
        let mut rows = Vec::new();
        for &anchor in anchors {
            if !self.data.covers(self.stations, anchor, self.lx, self.ly) {
                return Err(Error::InvalidArgument(format!(
                    "no complete window at {} for the target and all sources",
                    format_hour(anchor)
                )));
            }
            let (tw, sources) = self.windows(anchor, true);
            rows.extend(trace_rows(kind.as_str(), &tw, &self.forecast(kind, &tw, &sources)?));
        }
        Ok(rows)
    }

    fn windows(&self, anchor: i64, with_sources: bool) -> (WindowPair, Vec<WindowPair>) {
        let tw = WindowRef {
            station: self.data.split.target,
            anchor,
        }
        .materialize(self.stations, self.lx, self.ly);
        let sources = if with_sources {
            self.data
                .sources
                .iter()
                .map(|&s| WindowRef { station: s, anchor }.materialize(self.stations, self.lx, self.ly))
                .collect()
        } else {
            Vec::new()
        };
        (tw, sources)
    }

    /// Scores `kinds` on every evaluation anchor. Traces cover anchors one
    /// horizon apart, so consecutive forecasts tile the span.
    pub fn evaluate(
        &self,
        kinds: &[ModelKind],
        seed: Option<u64>,
        config_digest: &str,
        want_trace: bool,
    ) -> Result<(Vec<EvalReport>, Vec<TraceRow>)> {
        self.data.split.assert_no_leakage(self.stations)?;
        if kinds.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let needs_sources = kinds.iter().any(|k| matches!(k, ModelKind::Backbone | ModelKind::Transform));
        let mut forecasts: Vec<Vec<Vec<f64>>> = vec![Vec::new(); kinds.len()];
        let mut truths = Vec::with_capacity(self.data.anchors.len());
        let mut traces = Vec::new();
        let first = self.data.anchors[0];
        for &anchor in &self.data.anchors {
            let (tw, sources) = self.windows(anchor, needs_sources);
            let traced = want_trace && (anchor - first) % self.ly as i64 == 0;
            for (k, kind) in kinds.iter().enumerate() {
                let f = self.forecast(*kind, &tw, &sources)?;
                if traced {
                    traces.extend(trace_rows(kind.as_str(), &tw, &f));
                }
                forecasts[k].push(f);
            }
            truths.push(tw.y);
        }
        let reports = kinds
            .iter()
            .zip(&forecasts)
            .map(|(kind, f)| {
                EvalReport::from_forecasts(self.data.scenario(), kind.as_str(), seed, f, &truths, config_digest)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((reports, traces))
    }
}

/// A trained model plus its training logs.
#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub scenario: Scenario,
    pub seed: u64,
    pub model: ZeroShotModel,
    pub backbone_log: TrainLog,
    pub transform_log: Option<TrainLog>,
}

/// Both training phases for one scenario and seed. The seed drives
/// initialisation, batch order, dropout and the pseudo-target rotation.
pub fn train_cell(
    stations: &[StationSeries],
    data: &ScenarioData,
    model_cfg: &ModelConfig,
    backbone_cfg: &TrainConfig,
    transform_cfg: Option<&TrainConfig>,
    seed: u64,
) -> Result<TrainedCell> {
    let split = &data.split;
    split.assert_no_leakage(stations)?;
    let normalizer = fit_normalizer(stations, split, model_cfg.lx, model_cfg.ly)?;
    let ids = split
        .train_stations
        .iter()
        .map(|&i| stations[i].id().to_string())
        .collect();
    let mut model = ZeroShotModel::init(model_cfg.clone(), normalizer, ids, seed)?;
    let seeded = |c: &TrainConfig| TrainConfig { seed, ..c.clone() };
    let backbone_log = train_backbone(&mut model, stations, split, &seeded(backbone_cfg))?;
    let transform_log = match transform_cfg {
        Some(c) => Some(train_transform(&mut model, stations, split, &seeded(c))?),
        None => None,
    };
    Ok(TrainedCell {
        scenario: split.scenario,
        seed,
        model,
        backbone_log,
        transform_log,
    })
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item visited"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub target: String,
    pub train_ids: Vec<String>,
    pub scenarios: Vec<Scenario>,
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub transform_train: TrainConfig,
    pub baselines: BaselineConfig,
}

impl ComparisonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.split.lx != self.model.lx || self.split.ly != self.model.ly {
            return Err(Error::InvalidArgument(format!(
                "window lengths {}+{} disagree with the model's {}+{}",
                self.split.lx, self.split.ly, self.model.lx, self.model.ly
            )));
        }
        if self.scenarios.is_empty() || self.models.is_empty() {
            return Err(Error::InvalidArgument("nothing to evaluate".into()));
        }
        if self.models.iter().any(|m| m.is_learned()) && self.seeds.is_empty() {
            return Err(Error::InvalidArgument("learned models need at least one seed".into()));
        }
        self.model.validate()?;
        self.transform_train.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    pub summary: Vec<SummaryRow>,
    pub traces: Vec<TraceRow>,
    pub cells: Vec<TrainedCell>,
}

/// Baselines once per scenario (they do not depend on the seed), learned
/// models once per (scenario, seed) cell.
pub fn run_comparison(
    stations: &[StationSeries],
    spec: &ComparisonSpec,
    jobs: usize,
    config_digest: &str,
) -> Result<Comparison> {
    spec.validate()?;
    let mut scenarios = spec.scenarios.clone();
    scenarios.sort();
    scenarios.dedup();
    let data: Vec<ScenarioData> = scenarios
        .iter()
        .map(|&sc| ScenarioData::new(stations, &spec.target, &spec.train_ids, sc, &spec.split))
        .collect::<Result<_>>()?;
    let (lx, ly) = (spec.split.lx, spec.split.ly);
    let fixed: Vec<ModelKind> = spec.models.iter().copied().filter(|m| !m.is_learned()).collect();
    let learned: Vec<ModelKind> = spec.models.iter().copied().filter(|m| m.is_learned()).collect();
    let first_seed = spec.seeds.first().copied();

    let mut rows: Vec<(Scenario, ModelKind, Option<u64>, EvalReport)> = Vec::new();
    let mut traces = Vec::new();
    for d in &data {
        let ar = if fixed.contains(&ModelKind::Ar) {
            Some(fit_ar_baseline(stations, d, &spec.baselines)?)
        } else {
            None
        };
        let inputs = EvalInputs {
            stations,
            data: d,
            baselines: &spec.baselines,
            lx,
            ly,
            ar: ar.as_ref(),
            learned: None,
        };
        let (reports, tr) = inputs.evaluate(&fixed, None, config_digest, d.scenario() == Scenario::ZeroShot)?;
        rows.extend(fixed.iter().zip(reports).map(|(k, r)| (d.scenario(), *k, None, r)));
        traces.extend(tr);
    }

    let mut cells = Vec::new();
    if !learned.is_empty() {
        let with_transform = learned.contains(&ModelKind::Transform);
        let work: Vec<(usize, u64)> = (0..data.len())
            .flat_map(|i| spec.seeds.iter().map(move |&s| (i, s)))
            .collect();
        let results = parallel_map(&work, jobs, |&(i, seed)| {
            let d = &data[i];
            let phase2 = with_transform.then_some(&spec.transform_train);
            let cell = train_cell(stations, d, &spec.model, &spec.train, phase2, seed)?;
            let inputs = EvalInputs {
                stations,
                data: d,
                baselines: &spec.baselines,
                lx,
                ly,
                ar: None,
                learned: Some(&cell.model),
            };
            let want_trace = d.scenario() == Scenario::ZeroShot && Some(seed) == first_seed;
            let (reports, tr) = inputs.evaluate(&learned, Some(seed), config_digest, want_trace)?;
            Ok((cell, reports, tr))
        })?;
        for (cell, reports, tr) in results {
            rows.extend(learned.iter().zip(reports).map(|(k, r)| (cell.scenario, *k, Some(cell.seed), r)));
            traces.extend(tr);
            cells.push(cell);
        }
    }
    rows.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    let reports: Vec<EvalReport> = rows.into_iter().map(|r| r.3).collect();
    Ok(Comparison {
        summary: summarize(&reports),
        reports,
        traces,
        cells,
    })
}

/// Zero-shot error of the transform model at one training-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvePoint {
    pub n_train_stations: usize,
    pub train_ids: Vec<String>,
    pub n_seeds: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub seed_mse: Vec<f64>,
    pub per_hour_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub target: String,
    /// Stations eligible for training; nearest first selection.
    pub pool: Vec<String>,
    pub counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub transform_train: TrainConfig,
}

/// For each count `k`, trains on the `k` pool stations nearest the target and
/// scores the transform model zero-shot on the target.
pub fn learning_curve(
    stations: &[StationSeries],
    spec: &CurveSpec,
    jobs: usize,
    config_digest: &str,
) -> Result<Vec<CurvePoint>> {
    if spec.seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a learning curve needs at least 2 seeds for its spread, got {}",
            spec.seeds.len()
        )));
    }
    let (target, _) = find_station(stations, &spec.target)?;
    let pool: Vec<usize> = spec
        .pool
        .iter()
        .map(|id| find_station(stations, id).map(|(i, _)| i))
        .collect::<Result<_>>()?;
    if pool.contains(&target) {
        return Err(Error::Leakage(format!("target {} is in the training pool", spec.target)));
    }
    let mut points_data = Vec::with_capacity(spec.counts.len());
    for &k in &spec.counts {
        if k < 2 || k > pool.len() {
            return Err(Error::InvalidArgument(format!(
                "station count {k} outside [2, {}]",
                pool.len()
            )));
        }
        let chosen = nearest_stations(stations, target, &pool, k)?;
        let ids: Vec<String> = chosen.iter().map(|&i| stations[i].id().to_string()).collect();
        points_data.push(ScenarioData::new(stations, &spec.target, &ids, Scenario::ZeroShot, &spec.split)?);
    }
    let work: Vec<(usize, u64)> = (0..points_data.len())
        .flat_map(|i| spec.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let baseline_cfg = BaselineConfig::default();
    let reports = parallel_map(&work, jobs, |&(i, seed)| {
        let d = &points_data[i];
        let cell = train_cell(stations, d, &spec.model, &spec.train, Some(&spec.transform_train), seed)?;
        let inputs = EvalInputs {
            stations,
            data: d,
            baselines: &baseline_cfg,
            lx: spec.split.lx,
            ly: spec.split.ly,
            ar: None,
            learned: Some(&cell.model),
        };
        let (mut r, _) = inputs.evaluate(&[ModelKind::Transform], Some(seed), config_digest, false)?;
        Ok(r.remove(0))
    })?;
    Ok(points_data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let rs: Vec<&EvalReport> = work
                .iter()
                .zip(&reports)
                .filter(|((j, _), _)| *j == i)
                .map(|(_, r)| r)
                .collect();
            let seed_mse: Vec<f64> = rs.iter().map(|r| r.mse).collect();
            let ly = rs[0].per_hour_mse.len();
            CurvePoint {
                n_train_stations: d.split.train_stations.len(),
                train_ids: d.split.train_stations.iter().map(|&s| stations[s].id().to_string()).collect(),
                n_seeds: rs.len(),
                mean_mse: mean(&seed_mse),
                std_mse: sample_std(&seed_mse).expect("at least two seeds"),
                per_hour_mse: (0..ly)
                    .map(|h| rs.iter().map(|r| r.per_hour_mse[h]).sum::<f64>() / rs.len() as f64)
                    .collect(),
                seed_mse,
            }
        })
        .collect())
}

// ---------------------------------------------------------------- files

/// Header stamped on every output artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_digest: String,
}

impl Provenance {
    pub fn new(config_digest: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            config_digest: config_digest.to_string(),
        }
    }
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCsvRow {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_digest: String,
    pub row_type: RowType,
    pub scenario: Scenario,
    pub model: String,
    pub seed: Option<u64>,
    pub n_seeds: usize,
    pub n_windows: usize,
    pub mse: f64,
    pub mse_std: Option<f64>,
    pub mae: f64,
    pub mae_std: Option<f64>,
}

pub fn report_csv_rows(reports: &[EvalReport], summary: &[SummaryRow], prov: &Provenance) -> Vec<ReportCsvRow> {
    let base = |row_type, scenario, model: &str| ReportCsvRow {
        schema_version: prov.schema_version,
        tool_version: prov.tool_version.clone(),
        config_digest: prov.config_digest.clone(),
        row_type,
        scenario,
        model: model.to_string(),
        seed: None,
        n_seeds: 0,
        n_windows: 0,
        mse: 0.0,
        mse_std: None,
        mae: 0.0,
        mae_std: None,
    };
    let mut rows: Vec<ReportCsvRow> = reports
        .iter()
        .map(|r| ReportCsvRow {
            seed: r.seed,
            n_seeds: usize::from(r.row_type == RowType::Cell),
            n_windows: r.n_windows,
            mse: r.mse,
            mae: r.mae,
            ..base(r.row_type, r.scenario, &r.model)
        })
        .collect();
    rows.extend(summary.iter().map(|s| {
        let n_windows = reports
            .iter()
            .find(|r| r.row_type == RowType::Cell && r.scenario == s.scenario && r.model == s.model)
            .map_or(0, |r| r.n_windows);
        ReportCsvRow {
            n_seeds: s.n_seeds,
            n_windows,
            mse: s.mse_mean,
            mse_std: s.mse_std,
            mae: s.mae_mean,
            mae_std: s.mae_std,
            ..base(RowType::Summary, s.scenario, &s.model)
        }
    }));
    rows
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_csv(path: &Path, reports: &[EvalReport], summary: &[SummaryRow], prov: &Provenance) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to write".into()));
    }
    write_csv(path, &report_csv_rows(reports, summary, prov))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportCsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ReportCsvRow>, _>>()
        .map_err(|e| Error::csv(path, e))
}

/// Everything in `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDocument {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub config: serde_json::Value,
    pub notes: Vec<String>,
    pub reports: Vec<EvalReport>,
    pub summary: Vec<SummaryRow>,
    #[serde(default)]
    pub curve: Vec<CurvePoint>,
}

pub fn write_report_json(path: &Path, doc: &ReportDocument) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parses `report.json` and checks the structural rules the type system
/// cannot express.
pub fn validate_report_json(text: &str) -> Result<ReportDocument> {
    let doc: ReportDocument = serde_json::from_str(text)?;
    if doc.provenance.schema_version != SCHEMA_VERSION {
        return Err(Error::Contract(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            doc.provenance.schema_version
        )));
    }
    for r in &doc.reports {
        if r.config_digest != doc.provenance.config_digest {
            return Err(Error::Contract(format!("{} row carries a foreign digest", r.model)));
        }
        if r.row_type != RowType::Cell {
            continue;
        }
        if r.per_hour_mse.len() != r.per_hour_mae.len() || r.per_hour_mse.is_empty() || r.n_windows == 0 {
            return Err(Error::Contract(format!("{} row has malformed per-hour arrays", r.model)));
        }
        if (mean(&r.per_hour_mse) - r.mse).abs() > 1e-9 || (mean(&r.per_hour_mae) - r.mae).abs() > 1e-9 {
            return Err(Error::Contract(format!("{} averages disagree with per-hour values", r.model)));
        }
    }
    for c in &doc.curve {
        if c.n_seeds < 2 || c.std_mse < 0.0 || c.seed_mse.len() != c.n_seeds {
            return Err(Error::Contract(format!("curve point k={} is malformed", c.n_train_stations)));
        }
    }
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveCsvRow {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_digest: String,
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub y_std: Option<f64>,
}

/// Long format: `mse_vs_stations` (x = station count) and
/// `mse_vs_horizon_k{n}` (x = forecast hour).
pub fn write_curve_csv(path: &Path, points: &[CurvePoint], prov: &Provenance) -> Result<()> {
    let row = |series: String, x: f64, y: f64, y_std| CurveCsvRow {
        schema_version: prov.schema_version,
        tool_version: prov.tool_version.clone(),
        config_digest: prov.config_digest.clone(),
        series,
        x,
        y,
        y_std,
    };
    let mut rows = Vec::new();
    for p in points {
        rows.push(row("mse_vs_stations".into(), p.n_train_stations as f64, p.mean_mse, Some(p.std_mse)));
    }
    for p in points {
        for (h, v) in p.per_hour_mse.iter().enumerate() {
            rows.push(row(format!("mse_vs_horizon_k{}", p.n_train_stations), (h + 1) as f64, *v, None));
        }
    }
    write_csv(path, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCsvRow {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_digest: String,
    pub model: String,
    pub station: String,
    pub anchor: String,
    pub timestamp: String,
    pub horizon: usize,
    pub truth: f64,
    pub prediction: f64,
}

pub fn write_trace_csv(path: &Path, traces: &[TraceRow], prov: &Provenance) -> Result<()> {
    let rows: Vec<TraceCsvRow> = traces
        .iter()
        .map(|t| TraceCsvRow {
            schema_version: prov.schema_version,
            tool_version: prov.tool_version.clone(),
            config_digest: prov.config_digest.clone(),
            model: t.model.clone(),
            station: t.station.clone(),
            anchor: t.anchor.clone(),
            timestamp: t.timestamp.clone(),
            horizon: t.horizon,
            truth: t.truth,
            prediction: t.prediction,
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceCsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<TraceCsvRow>, _>>()
        .map_err(|e| Error::csv(path, e))
}
