use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{find_station, StationSeries};
use crate::error::{Error, Result};

/// One training or evaluation sample.
///
/// `x` covers hours `(t − L_x, t]` (row-major, `L_x × n_features`) and `y`
/// covers `(t, t + L_y]` of the target channel.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub station_id: String,
    pub t: i64,
    pub n_features: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl WindowPair {
    pub fn lx(&self) -> usize {
        self.x.len() / self.n_features
    }

    /// Column `c` of the input window.
    pub fn x_channel(&self, c: usize) -> Vec<f64> {
        self.x.iter().skip(c).step_by(self.n_features).copied().collect()
    }
}

/// A window addressed by station index and anchor hour, materialised lazily.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowRef {
    pub station: usize,
    pub anchor: i64,
}

impl WindowRef {
    pub fn materialize(&self, stations: &[StationSeries], lx: usize, ly: usize) -> WindowPair {
        let s = &stations[self.station];
        let row = s.row_of(self.anchor).expect("window anchors come from the series");
        slice_window(s, row, lx, ly)
    }
}

fn slice_window(s: &StationSeries, anchor_row: usize, lx: usize, ly: usize) -> WindowPair {
    let n = s.n_features();
    let first = anchor_row + 1 - lx;
    let mut x = Vec::with_capacity(lx * n);
    for r in first..=anchor_row {
        x.extend(s.values.iter().map(|c| c[r]));
    }
    let target = s.target();
    WindowPair {
        station_id: s.id().to_string(),
        t: s.start_hour + anchor_row as i64,
        n_features: n,
        x,
        y: target[anchor_row + 1..=anchor_row + ly].to_vec(),
    }
}

fn window_is_valid(s: &StationSeries, anchor_row: usize, lx: usize, ly: usize) -> bool {
    (anchor_row + 1 - lx..=anchor_row + ly).all(|r| s.is_valid_row(r))
}

/// Anchor rows `L_x − 1, L_x − 1 + stride, …` whose windows fit in the series
/// and contain no dropped hours.
pub fn window_anchors(s: &StationSeries, lx: usize, ly: usize, stride: usize) -> Vec<usize> {
    assert!(lx >= 1 && stride >= 1, "window length and stride must be positive");
    if s.len() < lx + ly {
        return Vec::new();
    }
    (lx - 1..=s.len() - ly - 1)
        .step_by(stride)
        .filter(|&a| window_is_valid(s, a, lx, ly))
        .collect()
}

/// All windows of a series at the given stride. A too-short series yields none.
pub fn make_windows(s: &StationSeries, lx: usize, ly: usize, stride: usize) -> Vec<WindowPair> {
    window_anchors(s, lx, ly, stride)
        .into_iter()
        .map(|a| slice_window(s, a, lx, ly))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    FullData,
    ZeroShot,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::FullData => "full_data",
            Scenario::ZeroShot => "zero_shot",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_data" => Ok(Scenario::FullData),
            "zero_shot" => Ok(Scenario::ZeroShot),
            _ => Err(Error::InvalidArgument(format!(
                "unknown scenario `{s}` (expected full_data or zero_shot)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub lx: usize,
    pub ly: usize,
    /// Hours between consecutive training anchors.
    pub train_stride: usize,
    pub test_stride: usize,
    /// Trailing share of the history (by time) held out for validation.
    pub val_fraction: f64,
    /// Length of the evaluation span at the end of the target's record.
    pub test_hours: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            lx: 48,
            ly: 24,
            train_stride: 1,
            test_stride: 1,
            val_fraction: 0.1,
            test_hours: 24 * 30,
        }
    }
}

/// Train/validation history plus the target's test windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSplit {
    pub scenario: Scenario,
    pub target: usize,
    pub train_stations: Vec<usize>,
    pub train: Vec<WindowRef>,
    pub val: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
    pub val_start: i64,
    pub test_start: i64,
    pub test_end: i64,
}

impl ZeroShotSplit {
    /// Every history window, training then validation.
    pub fn history(&self) -> impl Iterator<Item = &WindowRef> {
        self.train.iter().chain(&self.val)
    }

    /// Fails if any history window comes from the target in the zero-shot
    /// scenario.
    pub fn assert_no_leakage(&self, stations: &[StationSeries]) -> Result<()> {
        if self.scenario != Scenario::ZeroShot {
            return Ok(());
        }
        if self.train_stations.contains(&self.target) {
            return Err(Error::Leakage(format!(
                "target {} is a training station",
                stations[self.target].id()
            )));
        }
        if let Some(w) = self.history().find(|w| w.station == self.target) {
            return Err(Error::Leakage(format!(
                "history window at {} belongs to target {}",
                w.anchor,
                stations[self.target].id()
            )));
        }
        Ok(())
    }
}

/// Zero-shot split with every non-target station as a source.
pub fn split_zero_shot(
    stations: &[StationSeries],
    target_id: &str,
    cfg: &SplitConfig,
) -> Result<ZeroShotSplit> {
    let train: Vec<String> = stations
        .iter()
        .filter(|s| s.id() != target_id)
        .map(|s| s.id().to_string())
        .collect();
    split_with(stations, target_id, &train, Scenario::ZeroShot, cfg)
}

/// Builds a split for an explicit set of training stations.
///
/// The test span is the last `test_hours` of the target's record. History
/// windows are those whose forecast horizon ends before it; the latest
/// `val_fraction` of history anchor times become validation.
pub fn split_with(
    stations: &[StationSeries],
    target_id: &str,
    train_ids: &[String],
    scenario: Scenario,
    cfg: &SplitConfig,
) -> Result<ZeroShotSplit> {
    let (target, tseries) = find_station(stations, target_id)?;
    let mut train_stations = Vec::with_capacity(train_ids.len());
    for id in train_ids {
        let (i, _) = find_station(stations, id)?;
        if scenario == Scenario::ZeroShot && i == target {
            return Err(Error::Leakage(format!(
                "target {target_id} listed as a training station"
            )));
        }
        if !train_stations.contains(&i) {
            train_stations.push(i);
        }
    }
    if scenario == Scenario::FullData && !train_stations.contains(&target) {
        train_stations.push(target);
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {} outside [0, 1)",
            cfg.val_fraction
        )));
    }
    let span = cfg.test_hours as i64;
    if span < (cfg.lx + cfg.ly) as i64 || span > tseries.len() as i64 {
        return Err(Error::InvalidArgument(format!(
            "test span of {span} h does not fit a {}+{} h window inside {} h of data for {target_id}",
            cfg.lx,
            cfg.ly,
            tseries.len()
        )));
    }
    let test_end = tseries.end_hour();
    let test_start = test_end - span;

    let test = grid_anchors(tseries, cfg.lx, cfg.ly, cfg.test_stride, test_start)
        .filter(|&h| h + 1 - cfg.lx as i64 >= test_start && h + (cfg.ly as i64) < test_end)
        .map(|anchor| WindowRef {
            station: target,
            anchor,
        })
        .collect::<Vec<_>>();

    let mut history = Vec::new();
    for &si in &train_stations {
        let s = &stations[si];
        for anchor in grid_anchors(s, cfg.lx, cfg.ly, cfg.train_stride, test_start) {
            if anchor + (cfg.ly as i64) < test_start {
                history.push(WindowRef { station: si, anchor });
            }
        }
    }
    if history.is_empty() {
        return Err(Error::InvalidArgument(
            "no history windows precede the test span".into(),
        ));
    }
    let times: Vec<i64> = history
        .iter()
        .map(|w| w.anchor)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cut = ((times.len() as f64) * (1.0 - cfg.val_fraction)).floor() as usize;
    let val_start = times.get(cut).copied().unwrap_or(i64::MAX);
    let (val, train): (Vec<_>, Vec<_>) = history.into_iter().partition(|w| w.anchor >= val_start);

    let split = ZeroShotSplit {
        scenario,
        target,
        train_stations,
        train,
        val,
        test,
        val_start,
        test_start,
        test_end,
    };
    split.assert_no_leakage(stations)?;
    Ok(split)
}

/// Valid anchor hours on a grid aligned so that `test_start − 1` would be a
/// grid point, making anchors coincide across stations.
fn grid_anchors(
    s: &StationSeries,
    lx: usize,
    ly: usize,
    stride: usize,
    reference: i64,
) -> impl Iterator<Item = i64> + '_ {
    let stride_h = stride as i64;
    let origin = reference - 1;
    let lo = s.start_hour + lx as i64 - 1;
    let hi = s.end_hour() - ly as i64 - 1;
    let first = lo + (origin - lo).rem_euclid(stride_h);
    let mut h = first;
    std::iter::from_fn(move || {
        while h <= hi {
            let cur = h;
            h += stride_h;
            let row = (cur - s.start_hour) as usize;
            if window_is_valid(s, row, lx, ly) {
                return Some(cur);
            }
        }
        None
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::StationMeta;

    fn series(id: &str, values: Vec<f64>) -> StationSeries {
        StationSeries::new(
            StationMeta {
                station_id: id.into(),
                elevation: 0.0,
                latitude: 0.5,
                longitude: 0.5,
            },
            1000,
            vec!["v".into()],
            vec![values],
            "v",
        )
        .unwrap()
    }

    #[test]
    fn window_counts() {
        let s = series("A", (0..72).map(f64::from).collect());
        assert_eq!(make_windows(&s, 48, 24, 1).len(), 1);
        let s = series("A", (0..100).map(f64::from).collect());
        let w = make_windows(&s, 48, 24, 1);
        // floor((100 - 48 - 24) / 1) + 1
        assert_eq!(w.len(), 29);
        for stride in [2, 5, 7] {
            assert_eq!(make_windows(&s, 48, 24, stride).len(), (100 - 72) / stride + 1);
        }
        let short = series("A", vec![0.0; 71]);
        assert!(make_windows(&short, 48, 24, 1).is_empty());
    }

    #[test]
    fn window_contents_match_slices() {
        let raw: Vec<f64> = (0..100).map(|v| v as f64 * 0.5).collect();
        let s = series("A", raw.clone());
        for w in make_windows(&s, 48, 24, 3) {
            let a = (w.t - 1000) as usize;
            assert_eq!(w.x, raw[a - 47..=a]);
            assert_eq!(w.y, raw[a + 1..=a + 24]);
        }
    }

    #[test]
    fn stride_ly_windows_reconstruct_series() {
        let raw: Vec<f64> = (0..48 + 24 * 5).map(|v| (v as f64).sin()).collect();
        let s = series("A", raw.clone());
        let ws = make_windows(&s, 48, 24, 24);
        let mut rebuilt = ws[0].x.clone();
        for w in &ws {
            rebuilt.extend_from_slice(&w.y);
        }
        assert_eq!(rebuilt, raw);
    }

    #[test]
    fn windows_skip_dropped_hours() {
        let mut raw: Vec<f64> = (0..120).map(f64::from).collect();
        raw[60] = f64::NAN;
        let s = series("A", raw);
        for w in make_windows(&s, 24, 12, 1) {
            assert!(w.x.iter().chain(&w.y).all(|v| v.is_finite()));
        }
    }

    fn world(n: usize, hours: usize) -> Vec<StationSeries> {
        (0..n)
            .map(|i| series(&format!("S{i:02}"), (0..hours).map(|h| (h + i) as f64).collect()))
            .collect()
    }

    #[test]
    fn zero_shot_split_excludes_target() {
        let stations = world(11, 2000);
        let cfg = SplitConfig {
            test_hours: 720,
            ..SplitConfig::default()
        };
        let split = split_zero_shot(&stations, "S03", &cfg).unwrap();
        let sources: BTreeSet<usize> = split.history().map(|w| w.station).collect();
        assert_eq!(sources.len(), 10);
        assert!(!sources.contains(&3));
        assert!(split.test.iter().all(|w| w.station == 3));
        assert!(split.history().all(|w| w.anchor + 24 < split.test_start));
        assert!(split.val.iter().all(|w| w.anchor >= split.val_start));
        assert!(split.train.iter().all(|w| w.anchor < split.val_start));
        let val_times: BTreeSet<_> = split.val.iter().map(|w| w.anchor).collect();
        let all_times: BTreeSet<_> = split.history().map(|w| w.anchor).collect();
        let share = val_times.len() as f64 / all_times.len() as f64;
        assert!((share - 0.1).abs() < 0.01, "{share}");
        assert_eq!(split.test.len(), 720 - 72 + 1);
        split.assert_no_leakage(&stations).unwrap();
    }

    #[test]
    fn full_data_split_includes_target() {
        let stations = world(4, 1000);
        let ids = vec!["S00".to_string(), "S01".to_string()];
        let cfg = SplitConfig {
            test_hours: 200,
            ..SplitConfig::default()
        };
        let split = split_with(&stations, "S02", &ids, Scenario::FullData, &cfg).unwrap();
        assert!(split.train_stations.contains(&2));
        assert!(split.history().any(|w| w.station == 2));
        assert!(split_with(&stations, "S02", &["S02".to_string()], Scenario::ZeroShot, &cfg).is_err());
    }

    #[test]
    fn split_errors() {
        let stations = world(3, 500);
        let cfg = SplitConfig {
            test_hours: 100,
            ..SplitConfig::default()
        };
        assert!(matches!(
            split_zero_shot(&stations, "nope", &cfg),
            Err(Error::UnknownStation { .. })
        ));
        let too_long = SplitConfig {
            test_hours: 5000,
            ..SplitConfig::default()
        };
        assert!(split_zero_shot(&stations, "S00", &too_long).is_err());
    }

    #[test]
    fn anchors_align_across_stations() {
        let stations = world(3, 900);
        let cfg = SplitConfig {
            train_stride: 7,
            test_hours: 200,
            ..SplitConfig::default()
        };
        let split = split_zero_shot(&stations, "S00", &cfg).unwrap();
        let a: BTreeSet<_> = split.train.iter().filter(|w| w.station == 1).map(|w| w.anchor).collect();
        let b: BTreeSet<_> = split.train.iter().filter(|w| w.station == 2).map(|w| w.anchor).collect();
        assert_eq!(a, b);
    }
}
