//! Station observations: types, CSV ingestion, windowing, zero-shot splits and
//! normalisation.

mod io;
mod normalize;
mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    agweathernet_stations, load_metas, load_stations, write_observations_csv, write_stations_csv,
    write_world_json, LoadReport, DEFAULT_TARGET_CHANNEL,
};
pub use normalize::{fit_normalizer, raw_location, Normalizer, LOC_DIM};
pub use window::{
    make_windows, split_with, split_zero_shot, window_anchors, Scenario, SplitConfig, WindowPair,
    WindowRef, ZeroShotSplit,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    /// Feet above sea level.
    pub elevation: f64,
    pub latitude: f64,
    pub longitude: f64,
}

impl StationMeta {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude) || !(-180.0..=180.0).contains(&self.longitude)
        {
            return Err(Error::InvalidArgument(format!(
                "station {} has out-of-range coordinates ({}, {})",
                self.station_id, self.latitude, self.longitude
            )));
        }
        Ok(())
    }
}

/// Hourly multivariate observations for one station.
///
/// Rows are gap-free at a one-hour stride starting at `start_hour`. Hours that
/// were dropped during ingestion hold `NaN` in every channel; windows never
/// include them.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub meta: StationMeta,
    pub start_hour: i64,
    pub channels: Vec<String>,
    /// `values[channel][row]`
    pub values: Vec<Vec<f64>>,
    pub target_channel: String,
}

impl StationSeries {
    pub fn new(
        meta: StationMeta,
        start_hour: i64,
        channels: Vec<String>,
        values: Vec<Vec<f64>>,
        target_channel: &str,
    ) -> Result<Self> {
        if channels.len() != values.len() || channels.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "station {}: {} channel names for {} value columns",
                meta.station_id,
                channels.len(),
                values.len()
            )));
        }
        let len = values[0].len();
        if values.iter().any(|v| v.len() != len) {
            return Err(Error::InvalidArgument(format!(
                "station {}: channels have unequal lengths",
                meta.station_id
            )));
        }
        if !channels.iter().any(|c| c == target_channel) {
            return Err(Error::InvalidArgument(format!(
                "station {}: target channel `{target_channel}` not among {channels:?}",
                meta.station_id
            )));
        }
        meta.validate()?;
        Ok(Self {
            meta,
            start_hour,
            channels,
            values,
            target_channel: target_channel.to_string(),
        })
    }

    pub fn id(&self) -> &str {
        &self.meta.station_id
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.channels.len()
    }

    /// One past the last hour.
    pub fn end_hour(&self) -> i64 {
        self.start_hour + self.len() as i64
    }

    pub fn target_index(&self) -> usize {
        self.channels
            .iter()
            .position(|c| *c == self.target_channel)
            .expect("validated at construction")
    }

    pub fn row_of(&self, hour: i64) -> Option<usize> {
        let r = hour - self.start_hour;
        (r >= 0 && (r as usize) < self.len()).then_some(r as usize)
    }

    pub fn is_valid_row(&self, row: usize) -> bool {
        self.values.iter().all(|c| c[row].is_finite())
    }

    pub fn target(&self) -> &[f64] {
        &self.values[self.target_index()]
    }
}

/// Looks a station up by id, listing the alternatives on failure.
pub fn find_station<'a>(stations: &'a [StationSeries], id: &str) -> Result<(usize, &'a StationSeries)> {
    stations
        .iter()
        .enumerate()
        .find(|(_, s)| s.id() == id)
        .ok_or_else(|| Error::UnknownStation {
            id: id.to_string(),
            available: stations
                .iter()
                .map(StationSeries::id)
                .collect::<Vec<_>>()
                .join(", "),
        })
}
