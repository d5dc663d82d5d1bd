use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StationMeta, StationSeries};
use crate::error::{Error, Result};
use crate::synth::SyntheticWorld;
use crate::time::{day_start, format_hour, parse_hour};

pub const DEFAULT_TARGET_CHANNEL: &str = "Average 1.5m Air Temperature";

/// Longest run of missing hours that is filled by linear interpolation.
const MAX_INTERPOLATED_GAP: usize = 3;

/// What ingestion had to repair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Hours in which at least one channel was interpolated.
    pub interpolated_rows: usize,
    /// Hours blanked because they sat in a day with an unrepairable gap.
    pub dropped_hours: usize,
}

/// The fourteen AgWeatherNet stations (elevation in feet).
pub fn agweathernet_stations() -> Vec<StationMeta> {
    [
        ("BoydDist", 2000.0, 47.89, -120.07),
        ("Harrington", 2170.0, 47.39, -118.29),
        ("PoulsboS", 121.0, 47.66, -122.65),
        ("Seattle", 30.0, 47.66, -122.29),
        ("Addy", 1707.0, 48.32, -117.83),
        ("Almira", 2650.0, 47.87, -118.89),
        ("Broadview", 1492.0, 46.97, -120.5),
        ("Grayland", 21.0, 46.79, -124.08),
        ("Langley", 166.0, 48.0, -122.43),
        ("Azwell", 810.0, 47.93, -119.88),
        ("Mae", 1220.0, 47.07, -119.49),
        ("McKinley", 1081.0, 46.01, -119.92),
        ("MosesLake", 1115.0, 47.0, -119.24),
        ("SmithCyn", 514.0, 46.28, -118.99),
    ]
    .into_iter()
    .map(|(id, elevation, latitude, longitude)| StationMeta {
        station_id: id.to_string(),
        elevation,
        latitude,
        longitude,
    })
    .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRow {
    station: String,
    elevation: f64,
    latitude: f64,
    longitude: f64,
}

/// Reads station metadata from `stations.csv` or a generator `world.json`.
pub fn load_metas(path: &Path) -> Result<Vec<StationMeta>> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let world: SyntheticWorld = serde_json::from_str(&text)?;
        return Ok(world.metas());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut metas = Vec::new();
    for (i, row) in reader.deserialize::<MetaRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            file: path.display().to_string(),
            row: i + 2,
            message: e.to_string(),
        })?;
        let meta = StationMeta {
            station_id: row.station,
            elevation: row.elevation,
            latitude: row.latitude,
            longitude: row.longitude,
        };
        meta.validate()?;
        metas.push(meta);
    }
    Ok(metas)
}

pub fn write_stations_csv(path: &Path, metas: &[StationMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for m in metas {
        w.serialize(MetaRow {
            station: m.station_id.clone(),
            elevation: m.elevation,
            latitude: m.latitude,
            longitude: m.longitude,
        })
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long-format observations: `timestamp,station_id,<channels...>`. All series
/// must share the same channel list.
pub fn write_observations_csv(path: &Path, series: &[StationSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let Some(first) = series.first() else {
        w.write_record(["timestamp", "station_id"])
            .map_err(|e| Error::csv(path, e))?;
        return w.flush().map_err(|e| Error::io(path, e));
    };
    let mut header = vec!["timestamp".to_string(), "station_id".to_string()];
    header.extend(first.channels.iter().cloned());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for s in series {
        if s.channels != first.channels {
            return Err(Error::InvalidArgument(format!(
                "station {} has channels {:?}, expected {:?}",
                s.id(),
                s.channels,
                first.channels
            )));
        }
        for row in 0..s.len() {
            let mut record = Vec::with_capacity(header.len());
            record.push(format_hour(s.start_hour + row as i64));
            record.push(s.id().to_string());
            for ch in &s.values {
                let v = ch[row];
                record.push(if v.is_finite() { format!("{v:?}") } else { String::new() });
            }
            w.write_record(&record).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_world_json(path: &Path, world: &SyntheticWorld) -> Result<()> {
    let text = serde_json::to_string_pretty(world)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads observations and metadata.
///
/// Gaps of up to three consecutive missing hours are interpolated per channel.
/// A longer gap blanks every UTC day it touches, in all channels. Stations
/// listed in the metadata but absent from the data file are skipped.
pub fn load_stations(
    data_path: &Path,
    meta_path: &Path,
    target_channel: Option<&str>,
) -> Result<(Vec<StationSeries>, LoadReport)> {
    let metas = load_metas(meta_path)?;
    let file = data_path.display().to_string();
    let text = fs::read_to_string(data_path).map_err(|e| Error::io(data_path, e))?;
    if text.trim().is_empty() {
        return Ok((Vec::new(), LoadReport::default()));
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::csv(data_path, e))?
        .clone();
    if headers.len() < 3 || &headers[0] != "timestamp" || &headers[1] != "station_id" {
        return Err(Error::Parse {
            file,
            row: 1,
            message: "header must be `timestamp,station_id,<features...>`".into(),
        });
    }
    let channels: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let target = match target_channel {
        Some(t) => t.to_string(),
        None if channels.iter().any(|c| c == DEFAULT_TARGET_CHANNEL) => {
            DEFAULT_TARGET_CHANNEL.to_string()
        }
        None => channels[0].clone(),
    };

    let meta_index: HashMap<&str, usize> = metas
        .iter()
        .enumerate()
        .map(|(i, m)| (m.station_id.as_str(), i))
        .collect();
    // per station: (hour, values) in file order
    let mut raw: Vec<Vec<(i64, Vec<f64>)>> = vec![Vec::new(); metas.len()];
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::Parse {
            file: file.clone(),
            row,
            message: e.to_string(),
        })?;
        let station = &record[1];
        let &si = meta_index.get(station).ok_or_else(|| Error::Parse {
            file: file.clone(),
            row,
            message: format!("unknown station `{station}`"),
        })?;
        let hour = parse_hour(&record[0]).map_err(|message| Error::Parse {
            file: file.clone(),
            row,
            message,
        })?;
        if let Some((prev, _)) = raw[si].last() {
            if hour <= *prev {
                return Err(Error::Parse {
                    file: file.clone(),
                    row,
                    message: format!(
                        "non-hourly timestamp {}: not after {} for station {station}",
                        format_hour(hour),
                        format_hour(*prev)
                    ),
                });
            }
        }
        let mut values = Vec::with_capacity(channels.len());
        for (c, field) in record.iter().skip(2).enumerate() {
            values.push(parse_value(field).map_err(|_| Error::Parse {
                file: file.clone(),
                row,
                message: format!("unparseable value `{field}` in column `{}`", channels[c]),
            })?);
        }
        raw[si].push((hour, values));
    }

    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for (meta, rows) in metas.into_iter().zip(raw) {
        let Some(&(start, _)) = rows.first() else { continue };
        let end = rows.last().unwrap().0 + 1;
        let len = (end - start) as usize;
        let mut values = vec![vec![f64::NAN; len]; channels.len()];
        for (hour, vals) in rows {
            let r = (hour - start) as usize;
            for (c, v) in vals.into_iter().enumerate() {
                values[c][r] = v;
            }
        }
        repair_gaps(&mut values, start, &mut report);
        out.push(StationSeries::new(meta, start, channels.clone(), values, &target)?);
    }
    Ok((out, report))
}

fn parse_value(field: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("nan") || f.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    f.parse::<f64>()
}

fn repair_gaps(values: &mut [Vec<f64>], start: i64, report: &mut LoadReport) {
    let len = values[0].len();
    let mut interpolated = BTreeSet::new();
    let mut drop_days = BTreeSet::new();
    for ch in values.iter_mut() {
        let mut r = 0;
        while r < len {
            if ch[r].is_finite() {
                r += 1;
                continue;
            }
            let gap_start = r;
            while r < len && !ch[r].is_finite() {
                r += 1;
            }
            let gap_len = r - gap_start;
            let bounded = gap_start > 0 && r < len;
            if bounded && gap_len <= MAX_INTERPOLATED_GAP {
                let (lo, hi) = (ch[gap_start - 1], ch[r]);
                for k in 0..gap_len {
                    let w = (k + 1) as f64 / (gap_len + 1) as f64;
                    ch[gap_start + k] = lo + w * (hi - lo);
                    interpolated.insert(gap_start + k);
                }
            } else {
                for row in gap_start..r {
                    drop_days.insert(day_start(start + row as i64));
                }
            }
        }
    }
    let mut dropped = 0;
    for day in &drop_days {
        for h in *day..*day + 24 {
            let row = h - start;
            if row < 0 || row as usize >= len {
                continue;
            }
            let row = row as usize;
            interpolated.remove(&row);
            for ch in values.iter_mut() {
                ch[row] = f64::NAN;
            }
            dropped += 1;
        }
    }
    report.interpolated_rows += interpolated.len();
    report.dropped_hours += dropped;
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const META: &str = "station,elevation,latitude,longitude\nA,100,47.0,-120.0\nB,50,46.5,-119.0\n";

    #[test]
    fn agweathernet_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stations.csv");
        let table = agweathernet_stations();
        assert_eq!(table.len(), 14);
        write_stations_csv(&p, &table).unwrap();
        let back = load_metas(&p).unwrap();
        assert_eq!(back, table);
        assert_eq!(
            back[0],
            StationMeta {
                station_id: "BoydDist".into(),
                elevation: 2000.0,
                latitude: 47.89,
                longitude: -120.07
            }
        );
    }

    #[test]
    fn empty_data_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "stations.csv", META);
        let d = write(dir.path(), "obs.csv", "");
        let (s, r) = load_stations(&d, &m, None).unwrap();
        assert!(s.is_empty());
        assert_eq!(r, LoadReport::default());
        let d = write(dir.path(), "obs2.csv", "timestamp,station_id,t\n");
        assert!(load_stations(&d, &m, None).unwrap().0.is_empty());
    }

    #[test]
    fn two_hour_gap_is_interpolated() {
        // ten hourly rows with hours 3 and 4 missing (one absent row, one blank value)
        let mut body = String::from("timestamp,station_id,t,rh\n");
        for h in 0..10 {
            if h == 3 {
                continue;
            }
            let t = if h == 4 { String::new() } else { format!("{}", h as f64 * 2.0) };
            body.push_str(&format!("2021-06-01T{h:02}:00:00Z,A,{t},{}\n", 50 + h));
        }
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "stations.csv", META);
        let d = write(dir.path(), "obs.csv", &body);
        let (s, r) = load_stations(&d, &m, Some("t")).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 10);
        assert_eq!(r.interpolated_rows, 2);
        assert_eq!(r.dropped_hours, 0);
        let t = s[0].target();
        assert!((t[3] - 6.0).abs() < 1e-12 && (t[4] - 8.0).abs() < 1e-12);
        assert!((s[0].values[1][3] - 53.0).abs() < 1e-12);
    }

    #[test]
    fn long_gap_drops_the_day() {
        let mut body = String::from("timestamp,station_id,t\n");
        for h in 0..48 {
            if (30..35).contains(&h) {
                continue;
            }
            let (d, hh) = (1 + h / 24, h % 24);
            body.push_str(&format!("2021-06-{d:02}T{hh:02}:00:00Z,B,{h}\n"));
        }
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "stations.csv", META);
        let d = write(dir.path(), "obs.csv", &body);
        let (s, r) = load_stations(&d, &m, None).unwrap();
        assert_eq!(r.dropped_hours, 24);
        let t = s[0].target();
        assert!(t[..24].iter().all(|v| v.is_finite()));
        assert!(t[24..].iter().all(|v| v.is_nan()));
    }

    #[test]
    fn errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "stations.csv", META);
        let cases = [
            ("timestamp,station_id,t\n2021-01-01T00:00:00Z,A,1\n2021-01-01T01:00:00Z,Z,2\n", "row 3", "unknown station"),
            ("timestamp,station_id,t\n2021-01-01T00:00:00Z,A,1\n2021-01-01T00:30:00Z,A,2\n", "row 3", "not on the hour"),
            ("timestamp,station_id,t\n2021-01-01T02:00:00Z,A,1\n2021-01-01T01:00:00Z,A,2\n", "row 3", "non-hourly"),
            ("timestamp,station_id,t\n2021-01-01T00:00:00Z,A,abc\n", "row 2", "unparseable"),
        ];
        for (body, row, what) in cases {
            let d = write(dir.path(), "obs.csv", body);
            let msg = load_stations(&d, &m, None).unwrap_err().to_string();
            assert!(msg.contains(row) && msg.contains(what), "{msg}");
        }
    }
}
