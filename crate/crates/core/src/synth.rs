//! Synthetic multi-station climate series from a mean-reverting (OU) process
//! whose seasonal mean and parameters vary smoothly with location.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{StationMeta, StationSeries};
use crate::error::{Error, Result};
use crate::time::{hour_from_ymd, HOURS_PER_YEAR};

pub const SYNTH_CHANNEL: &str = "temperature";

/// Per-location process parameters. Angular frequencies are in rad/hour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub kappa: f64,
    pub sigma: f64,
    pub a: f64,
    pub b: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl OuParams {
    /// Frequencies fixed for every location: annual, slow random long-term, daily.
    pub fn omegas() -> [f64; 3] {
        [
            2.0 * PI / HOURS_PER_YEAR,
            0.7 * PI / HOURS_PER_YEAR,
            2.0 * PI / 24.0,
        ]
    }

    /// A flat process at level `a` with no trend, seasonality or noise.
    pub fn flat(a: f64) -> Self {
        let [omega1, omega2, omega3] = Self::omegas();
        Self {
            kappa: 0.5,
            sigma: 0.0,
            a,
            b: 0.0,
            omega1,
            omega2,
            omega3,
            theta1: 0.0,
            theta2: 0.0,
            theta3: 0.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 2.0) && self.kappa != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kappa {} outside (0, 2)",
                self.kappa
            )));
        }
        if self.sigma < 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidArgument(
                "noise scale and seasonal amplitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// `a + b t + α sin(ω₁t+θ₁) + β sin(ω₂t+θ₂) + γ sin(ω₃t+θ₃)`
    pub fn seasonal_mean(&self, t: f64) -> f64 {
        self.a
            + self.b * t
            + self.alpha * (self.omega1 * t + self.theta1).sin()
            + self.beta * (self.omega2 * t + self.theta2).sin()
            + self.gamma * (self.omega3 * t + self.theta3).sin()
    }

    /// Analytic time derivative of [`seasonal_mean`](Self::seasonal_mean).
    pub fn seasonal_slope(&self, t: f64) -> f64 {
        self.b
            + self.alpha * self.omega1 * (self.omega1 * t + self.theta1).cos()
            + self.beta * self.omega2 * (self.omega2 * t + self.theta2).cos()
            + self.gamma * self.omega3 * (self.omega3 * t + self.theta3).cos()
    }
}

/// Random linear weights `w` for one location-dependent parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub parameter: String,
    pub weights: [f64; 2],
    pub min: f64,
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub n_hours: usize,
    pub start_hour: i64,
    pub sigma_f: f64,
    pub station_ids: Vec<String>,
    pub locations: Vec<[f64; 2]>,
    pub params: Vec<OuParams>,
    pub projection_weights: Vec<Projection>,
}

impl SyntheticWorld {
    pub fn metas(&self) -> Vec<StationMeta> {
        self.station_ids
            .iter()
            .zip(&self.locations)
            .map(|(id, loc)| StationMeta {
                station_id: id.clone(),
                elevation: 0.0,
                latitude: loc[0],
                longitude: loc[1],
            })
            .collect()
    }
}

/// Size and noise settings of a generated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_stations: usize,
    pub n_hours: usize,
    pub seed: u64,
    pub kappa: f64,
    pub sigma: f64,
    pub sigma_f: f64,
}

impl WorldSpec {
    pub fn years(n_stations: usize, years: f64, seed: u64) -> Self {
        Self {
            n_stations,
            n_hours: (years * HOURS_PER_YEAR).round() as usize,
            seed,
            kappa: 0.5,
            sigma: 5.0,
            sigma_f: 0.1,
        }
    }

    /// 20 locations, four years of hourly data.
    pub fn full_scale(seed: u64) -> Self {
        Self::years(20, 4.0, seed)
    }

    /// 11 locations, two years: ten sources and one held-out target.
    pub fn desk_scale(seed: u64) -> Self {
        Self::years(11, 2.0, seed)
    }
}

/// Draws `N(w·x, sigma_f)` per location, clamps it to `[0, 1]` and maps it
/// affinely onto `[min_f, min_f + range_f]`.
pub fn sample_location_param<R: Rng>(
    locations: &[[f64; 2]],
    weights: [f64; 2],
    range_f: f64,
    min_f: f64,
    sigma_f: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if range_f <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "parameter range must be positive, got {range_f}"
        )));
    }
    let noise = Normal::new(0.0, sigma_f.max(0.0))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(locations
        .iter()
        .map(|x| {
            let centre = weights[0] * x[0] + weights[1] * x[1];
            let raw = centre + noise.sample(rng);
            raw.clamp(0.0, 1.0) * range_f + min_f
        })
        .collect())
}

/// Euler recursion `T_{i+1} = T_i + T̂'_i + κ(T̂_i − T_i) + σ z_i` with
/// `T_0 = T̂_0` and one-hour steps. Noise comes from a stream keyed by
/// `(seed, loc_index)`.
pub fn generate_series(
    world: &SyntheticWorld,
    loc_index: usize,
    n_hours: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = world.params.get(loc_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "location {loc_index} not in world of {}",
            world.params.len()
        ))
    })?;
    if n_hours == 0 {
        return Err(Error::InvalidArgument("n_hours must be at least 1".into()));
    }
    Ok(simulate(p, n_hours, &mut noise_stream(seed, loc_index)))
}

pub(crate) fn noise_stream(seed: u64, loc_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 is reserved for world construction
    rng.set_stream(loc_index as u64 + 1);
    rng
}

pub fn simulate<R: Rng>(p: &OuParams, n_hours: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_hours);
    let mut current = p.seasonal_mean(0.0);
    out.push(current);
    for i in 1..n_hours {
        let t = (i - 1) as f64;
        let z: f64 = StandardNormal.sample(rng);
        current += p.seasonal_slope(t) + p.kappa * (p.seasonal_mean(t) - current) + p.sigma * z;
        out.push(current);
    }
    out
}

/// Parameters that depend on location, with their `(min, range)`.
const LOCATION_PARAMS: [(&str, f64, f64); 8] = [
    ("a", 0.0, 20.0),
    ("b", 0.0, 0.01),
    ("theta1", 0.0, PI),
    ("theta2", 0.0, PI),
    ("theta3", 0.0, PI),
    ("alpha", 0.0, 15.0),
    ("beta", 0.0, 15.0),
    ("gamma", 0.0, 15.0),
];

/// Samples locations and parameters, then simulates every station.
pub fn build_world(spec: &WorldSpec) -> Result<(SyntheticWorld, Vec<StationSeries>)> {
    if spec.n_stations < 2 {
        return Err(Error::InvalidArgument(format!(
            "a world needs at least 2 stations, got {}",
            spec.n_stations
        )));
    }
    if spec.n_hours == 0 {
        return Err(Error::InvalidArgument("n_hours must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let locations: Vec<[f64; 2]> = (0..spec.n_stations)
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();

    let mut projections = Vec::with_capacity(LOCATION_PARAMS.len());
    let mut columns = Vec::with_capacity(LOCATION_PARAMS.len());
    for (name, min, range) in LOCATION_PARAMS {
        let weights = [rng.random::<f64>(), rng.random::<f64>()];
        columns.push(sample_location_param(
            &locations,
            weights,
            range,
            min,
            spec.sigma_f,
            &mut rng,
        )?);
        projections.push(Projection {
            parameter: name.to_string(),
            weights,
            min,
            range,
        });
    }

    let [omega1, omega2, omega3] = OuParams::omegas();
    let params: Vec<OuParams> = (0..spec.n_stations)
        .map(|i| OuParams {
            kappa: spec.kappa,
            sigma: spec.sigma,
            a: columns[0][i],
            b: columns[1][i],
            omega1,
            omega2,
            omega3,
            theta1: columns[2][i],
            theta2: columns[3][i],
            theta3: columns[4][i],
            alpha: columns[5][i],
            beta: columns[6][i],
            gamma: columns[7][i],
        })
        .collect();
    for p in &params {
        p.validate()?;
    }

    let world = SyntheticWorld {
        seed: spec.seed,
        n_hours: spec.n_hours,
        start_hour: hour_from_ymd(2020, 1, 1),
        sigma_f: spec.sigma_f,
        station_ids: (0..spec.n_stations).map(|i| format!("S{i:02}")).collect(),
        locations,
        params,
        projection_weights: projections,
    };

    let metas = world.metas();
    let mut series = Vec::with_capacity(spec.n_stations);
    for (i, meta) in metas.into_iter().enumerate() {
        let values = generate_series(&world, i, spec.n_hours, spec.seed)?;
        series.push(StationSeries::new(
            meta,
            world.start_hour,
            vec![SYNTH_CHANNEL.to_string()],
            vec![values],
            SYNTH_CHANNEL,
        )?);
    }
    Ok((world, series))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world_with(p: OuParams) -> SyntheticWorld {
        SyntheticWorld {
            seed: 0,
            n_hours: 0,
            start_hour: 0,
            sigma_f: 0.1,
            station_ids: vec!["S00".into()],
            locations: vec![[0.5, 0.5]],
            params: vec![p],
            projection_weights: vec![],
        }
    }

    #[test]
    fn seasonal_mean_trivial_cases() {
        let p = OuParams::flat(10.0);
        for t in [0.0, 1.0, 1234.5] {
            assert_eq!(p.seasonal_mean(t), 10.0);
        }
        let mut q = OuParams::flat(0.0);
        q.alpha = 1.0;
        q.theta1 = 0.3;
        let t = (PI / 2.0 - q.theta1) / q.omega1;
        assert!((q.seasonal_mean(t) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seasonal_mean_mid_range_matches_direct_formula() {
        let [w1, w2, w3] = OuParams::omegas();
        let p = OuParams {
            kappa: 0.5,
            sigma: 5.0,
            a: 10.0,
            b: 0.005,
            omega1: w1,
            omega2: w2,
            omega3: w3,
            theta1: PI / 2.0,
            theta2: PI / 2.0,
            theta3: PI / 2.0,
            alpha: 7.5,
            beta: 7.5,
            gamma: 7.5,
        };
        // at t = 0 every sine sits at its peak: 10 + 3 * 7.5
        assert!((p.seasonal_mean(0.0) - 32.5).abs() < 1e-12);
        let t = 100.0;
        let direct = 10.0
            + 0.005 * t
            + 7.5 * (w1 * t + PI / 2.0).sin()
            + 7.5 * (w2 * t + PI / 2.0).sin()
            + 7.5 * (w3 * t + PI / 2.0).sin();
        assert!((p.seasonal_mean(t) - direct).abs() < 1e-12);
    }

    #[test]
    fn slope_matches_central_difference() {
        let mut p = OuParams::flat(3.0);
        p.b = 0.004;
        p.alpha = 5.0;
        p.beta = 2.0;
        p.gamma = 9.0;
        p.theta3 = 1.1;
        for t in [0.0, 17.0, 5000.0] {
            let h = 1e-4;
            let fd = (p.seasonal_mean(t + h) - p.seasonal_mean(t - h)) / (2.0 * h);
            assert!((fd - p.seasonal_slope(t)).abs() < 1e-7);
        }
    }

    #[test]
    fn degenerate_recursion_is_constant() {
        let mut p = OuParams::flat(5.0);
        p.kappa = 0.0;
        let s = generate_series(&world_with(p), 0, 50, 1).unwrap();
        assert!(s.iter().all(|v| *v == 5.0));
    }

    #[test]
    fn noise_free_series_follows_independent_recursion() {
        let mut p = OuParams::flat(4.0);
        p.b = 0.003;
        p.alpha = 6.0;
        p.beta = 3.0;
        p.gamma = 11.0;
        p.theta1 = 0.4;
        p.theta2 = 2.0;
        p.theta3 = 1.0;
        let s = generate_series(&world_with(p), 0, 500, 9).unwrap();

        // standalone re-derivation of the Euler step
        let mean = |t: f64| {
            4.0 + 0.003 * t
                + 6.0 * (p.omega1 * t + 0.4).sin()
                + 3.0 * (p.omega2 * t + 2.0).sin()
                + 11.0 * (p.omega3 * t + 1.0).sin()
        };
        let slope = |t: f64| {
            0.003
                + 6.0 * p.omega1 * (p.omega1 * t + 0.4).cos()
                + 3.0 * p.omega2 * (p.omega2 * t + 2.0).cos()
                + 11.0 * p.omega3 * (p.omega3 * t + 1.0).cos()
        };
        let mut x = mean(0.0);
        let mut expected = vec![x];
        for i in 0..499 {
            let t = i as f64;
            x = x + slope(t) + 0.5 * (mean(t) - x);
            expected.push(x);
        }
        for (a, b) in s.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn location_param_respects_bounds_and_zero_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let locs = vec![[0.2, 0.9], [0.2, 0.9], [1.0, 1.0], [0.0, 0.0]];
        let v = sample_location_param(&locs, [0.7, 0.6], 15.0, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[2], 15.0); // 1.3 clamps to 1
        assert_eq!(v[3], 0.0);
        let w = sample_location_param(&locs, [0.7, 0.6], 2.0, -1.0, 3.0, &mut rng).unwrap();
        assert!(w.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(sample_location_param(&locs, [0.1, 0.1], 0.0, 0.0, 0.1, &mut rng).is_err());
    }

    #[test]
    fn world_needs_two_stations() {
        let spec = WorldSpec::years(1, 0.01, 7);
        assert!(build_world(&spec).is_err());
    }

    #[test]
    fn world_parameters_within_ranges() {
        let (world, series) = build_world(&WorldSpec::years(20, 0.01, 3)).unwrap();
        assert_eq!(series.len(), 20);
        for p in &world.params {
            assert!((0.0..=20.0).contains(&p.a));
            assert!((0.0..=0.01).contains(&p.b));
            for th in [p.theta1, p.theta2, p.theta3] {
                assert!((0.0..=PI).contains(&th));
            }
            for amp in [p.alpha, p.beta, p.gamma] {
                assert!((0.0..=15.0).contains(&amp));
            }
            assert_eq!(p.kappa, 0.5);
            assert_eq!(p.sigma, 5.0);
        }
    }

    #[test]
    fn full_and_desk_presets() {
        let full = WorldSpec::full_scale(1);
        assert_eq!((full.n_stations, full.n_hours), (20, 35_064));
        let desk = WorldSpec::desk_scale(1);
        assert_eq!((desk.n_stations, desk.n_hours), (11, 17_532));
    }
}
