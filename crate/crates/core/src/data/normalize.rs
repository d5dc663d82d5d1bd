use serde::{Deserialize, Serialize};

use super::{StationMeta, StationSeries, ZeroShotSplit};
use crate::error::{Error, Result};

/// Location descriptor width: latitude, longitude, elevation.
pub const LOC_DIM: usize = 3;

const STD_FLOOR: f64 = 1e-8;

/// z-score statistics fitted on training history only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub channels: Vec<String>,
    pub target_index: usize,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    pub loc_mean: [f64; LOC_DIM],
    pub loc_std: [f64; LOC_DIM],
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    let std = if n > 0.0 { (m2 / n).sqrt() } else { 0.0 };
    (mean, std.max(STD_FLOOR))
}

pub fn raw_location(meta: &StationMeta) -> [f64; LOC_DIM] {
    [meta.latitude, meta.longitude, meta.elevation]
}

/// Channel statistics come from the rows covered by training windows; location
/// statistics from the training stations' metadata. Nothing about the target
/// is read unless it is itself a training station.
pub fn fit_normalizer(
    stations: &[StationSeries],
    split: &ZeroShotSplit,
    lx: usize,
    ly: usize,
) -> Result<Normalizer> {
    if split.train.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot fit a normaliser on an empty history".into(),
        ));
    }
    let first = &stations[split.train[0].station];
    let n_ch = first.n_features();

    let mut covered: Vec<Vec<bool>> = stations.iter().map(|_| Vec::new()).collect();
    for w in &split.train {
        let s = &stations[w.station];
        let mask = &mut covered[w.station];
        if mask.is_empty() {
            *mask = vec![false; s.len()];
        }
        let row = s.row_of(w.anchor).expect("anchor inside series");
        for r in row + 1 - lx..=row + ly {
            mask[r] = true;
        }
    }

    let mut channel_mean = Vec::with_capacity(n_ch);
    let mut channel_std = Vec::with_capacity(n_ch);
    for c in 0..n_ch {
        let values = covered.iter().enumerate().flat_map(|(si, mask)| {
            mask.iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .map(move |(r, _)| stations[si].values[c][r])
        });
        let (m, s) = mean_std(values);
        channel_mean.push(m);
        channel_std.push(s);
    }

    let mut loc_mean = [0.0; LOC_DIM];
    let mut loc_std = [0.0; LOC_DIM];
    for d in 0..LOC_DIM {
        let (m, s) = mean_std(
            split
                .train_stations
                .iter()
                .map(|&si| raw_location(&stations[si].meta)[d]),
        );
        loc_mean[d] = m;
        loc_std[d] = s;
    }

    Ok(Normalizer {
        channels: first.channels.clone(),
        target_index: first.target_index(),
        channel_mean,
        channel_std,
        loc_mean,
        loc_std,
    })
}

impl Normalizer {
    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.channel_mean[channel]) / self.channel_std[channel]
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.channel_std[channel] + self.channel_mean[channel]
    }

    pub fn normalize_target(&self, v: f64) -> f64 {
        self.normalize(self.target_index, v)
    }

    pub fn denormalize_target(&self, v: f64) -> f64 {
        self.denormalize(self.target_index, v)
    }

    /// Normalises a row-major `rows × channels` block in place.
    pub fn normalize_rows(&self, x: &mut [f64]) {
        let n = self.channels.len();
        for (i, v) in x.iter_mut().enumerate() {
            *v = self.normalize(i % n, *v);
        }
    }

    /// Normalised target-channel values from the last `label_len` rows of a
    /// raw row-major window.
    pub fn decoder_context(&self, x: &[f64], label_len: usize) -> Vec<f64> {
        let n = self.channels.len();
        let rows = x.len() / n;
        (rows - label_len..rows)
            .map(|r| self.normalize_target(x[r * n + self.target_index]))
            .collect()
    }

    pub fn location(&self, meta: &StationMeta) -> [f64; LOC_DIM] {
        let raw = raw_location(meta);
        let mut out = [0.0; LOC_DIM];
        for d in 0..LOC_DIM {
            out[d] = (raw[d] - self.loc_mean[d]) / self.loc_std[d];
        }
        out
    }
}
