//! Classical forecasters used as reference points: last value, persistence,
//! moving average and an AIC-selected autoregression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn last_value(x: &[f64], ly: usize) -> Result<Vec<f64>> {
    let last = *x
        .last()
        .ok_or_else(|| Error::Contract("last_value needs a non-empty window".into()))?;
    Ok(vec![last; ly])
}

/// Repeats the `ly` values that start `period` hours before the end of the
/// window; with `period == ly == 24` this is yesterday's day.
pub fn persistence(x: &[f64], period: usize, ly: usize) -> Result<Vec<f64>> {
    if period > x.len() {
        return Err(Error::Contract(format!(
            "persistence period {period} exceeds window length {}",
            x.len()
        )));
    }
    if period < ly {
        return Err(Error::Contract(format!(
            "persistence period {period} shorter than horizon {ly}"
        )));
    }
    let start = x.len() - period;
    Ok(x[start..start + ly].to_vec())
}

pub fn moving_average(x: &[f64], k: usize, ly: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Contract("moving average window must be positive".into()));
    }
    if k > x.len() {
        return Err(Error::Contract(format!(
            "moving average window {k} exceeds window length {}",
            x.len()
        )));
    }
    let tail = &x[x.len() - k..];
    Ok(vec![tail.iter().sum::<f64>() / k as f64; ly])
}

/// Autoregression `y_t = c + τ·(t − origin) + Σ φ_i y_{t−i}` chosen by AIC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub lags: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Per-hour slope when the trend term was selected.
    pub trend: Option<f64>,
    pub trend_origin: i64,
    pub aic: f64,
    pub n_obs: usize,
}

impl ArModel {
    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        1 + usize::from(self.trend.is_some()) + self.lags.len()
    }
}

// trend regressor is (t − origin) / TREND_SCALE to keep the Gram matrix tame
const TREND_SCALE: f64 = 1000.0;

/// Sufficient statistics over the common sample used by every candidate.
struct Design {
    n: usize,
    width: usize,
    rows: Vec<Vec<f64>>,
    ys: Vec<f64>,
    gram: Vec<f64>,
    xty: Vec<f64>,
}

impl Design {
    fn build(series: &[f64], max_lag: usize) -> Self {
        let width = 2 + max_lag;
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for t in max_lag..series.len() {
            let window = &series[t - max_lag..=t];
            if window.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let mut row = Vec::with_capacity(width);
            row.push(1.0);
            row.push(t as f64 / TREND_SCALE);
            row.extend((1..=max_lag).map(|l| series[t - l]));
            rows.push(row);
            ys.push(series[t]);
        }
        let mut gram = vec![0.0; width * width];
        let mut xty = vec![0.0; width];
        for (row, y) in rows.iter().zip(&ys) {
            for i in 0..width {
                xty[i] += row[i] * y;
                for j in i..width {
                    gram[i * width + j] += row[i] * row[j];
                }
            }
        }
        for i in 0..width {
            for j in 0..i {
                gram[i * width + j] = gram[j * width + i];
            }
        }
        Self {
            n: ys.len(),
            width,
            rows,
            ys,
            gram,
            xty,
        }
    }

    /// OLS on the selected columns; `None` when the normal equations are
    /// singular.
    fn fit(&self, cols: &[usize]) -> Option<(Vec<f64>, f64)> {
        let k = cols.len();
        let mut a = vec![0.0; k * k];
        let mut b = vec![0.0; k];
        for (i, &ci) in cols.iter().enumerate() {
            b[i] = self.xty[ci];
            for (j, &cj) in cols.iter().enumerate() {
                a[i * k + j] = self.gram[ci * self.width + cj];
            }
        }
        let beta = cholesky_solve(&mut a, &b, k)?;
        let rss = self
            .rows
            .iter()
            .zip(&self.ys)
            .map(|(row, y)| {
                let pred: f64 = cols.iter().zip(&beta).map(|(&c, b)| row[c] * b).sum();
                (y - pred) * (y - pred)
            })
            .sum();
        Some((beta, rss))
    }
}

fn cholesky_solve(a: &mut [f64], b: &[f64], k: usize) -> Option<Vec<f64>> {
    let max_diag = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max);
    let tol = max_diag * 1e-12;
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in j + 1..k {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = s / d;
        }
    }
    let mut z = vec![0.0; k];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= a[i * k + p] * z[p];
        }
        z[i] = s / a[i * k + i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = z[i];
        for p in i + 1..k {
            s -= a[p * k + i] * x[p];
        }
        x[i] = s / a[i * k + i];
    }
    Some(x)
}

/// Every non-singular candidate of the grid: lag counts `1..=max_lag` crossed
/// with trend off (and on, when `try_trend`). All share one estimation sample
/// so their AIC values are comparable.
pub fn ar_candidates(
    series: &[f64],
    start_hour: i64,
    max_lag: usize,
    try_trend: bool,
) -> Result<Vec<ArModel>> {
    if max_lag == 0 {
        return Err(Error::InvalidArgument("max_lag must be at least 1".into()));
    }
    if series.len() <= 2 * max_lag {
        return Err(Error::InvalidArgument(format!(
            "series of length {} too short for max_lag {max_lag}",
            series.len()
        )));
    }
    let design = Design::build(series, max_lag);
    if design.n <= design.width {
        return Err(Error::Fit(format!(
            "only {} complete rows for {} regressors",
            design.n, design.width
        )));
    }
    let n = design.n as f64;
    let mut out = Vec::new();
    for with_trend in [false, true] {
        if with_trend && !try_trend {
            continue;
        }
        for p in 1..=max_lag {
            let mut cols = vec![0];
            if with_trend {
                cols.push(1);
            }
            cols.extend(2..2 + p);
            let Some((beta, rss)) = design.fit(&cols) else { continue };
            let n_params = cols.len();
            let aic = n * (rss / n).ln() + 2.0 * (n_params as f64 + 1.0);
            let offset = usize::from(with_trend);
            out.push(ArModel {
                lags: (1..=p).collect(),
                coefficients: beta[1 + offset..].to_vec(),
                intercept: beta[0],
                trend: with_trend.then(|| beta[1] / TREND_SCALE),
                trend_origin: start_hour,
                aic,
                n_obs: design.n,
            });
        }
    }
    Ok(out)
}

/// The AIC-minimal candidate of [`ar_candidates`].
pub fn fit_ar(series: &[f64], start_hour: i64, max_lag: usize, try_trend: bool) -> Result<ArModel> {
    let candidates = ar_candidates(series, start_hour, max_lag, try_trend)?;
    candidates
        .into_iter()
        .filter(|m| m.aic.is_finite())
        .min_by(|a, b| a.aic.total_cmp(&b.aic))
        .ok_or_else(|| Error::Fit("every AR candidate was singular".into()))
}

/// Recursive multi-step forecast from a window ending at hour `anchor`.
pub fn forecast_ar(m: &ArModel, x: &[f64], anchor: i64, ly: usize) -> Result<Vec<f64>> {
    let p = m.max_lag();
    if x.len() < p {
        return Err(Error::Contract(format!(
            "AR({p}) needs {p} values, window has {}",
            x.len()
        )));
    }
    let mut hist: Vec<f64> = x[x.len() - p..].to_vec();
    let mut out = Vec::with_capacity(ly);
    for h in 1..=ly {
        let mut v = m.intercept;
        if let Some(tr) = m.trend {
            v += tr * (anchor + h as i64 - m.trend_origin) as f64;
        }
        for (lag, c) in m.lags.iter().zip(&m.coefficients) {
            v += c * hist[hist.len() - lag];
        }
        hist.push(v);
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn last_value_and_moving_average() {
        let x = [1.0, 3.0, 7.0];
        assert_eq!(last_value(&x, 24).unwrap(), vec![7.0; 24]);
        assert!(last_value(&[], 3).is_err());
        assert_eq!(moving_average(&x, 1, 4).unwrap(), last_value(&x, 4).unwrap());
        let ramp: Vec<f64> = (1..=48).map(f64::from).collect();
        assert_eq!(moving_average(&ramp, 24, 24).unwrap(), vec![36.5; 24]);
        assert!(moving_average(&x, 0, 2).is_err());
        assert!(moving_average(&x, 4, 2).is_err());
    }

    #[test]
    fn moving_average_cancels_a_full_period() {
        let x: Vec<f64> = (0..48)
            .map(|h| (2.0 * std::f64::consts::PI * h as f64 / 24.0).sin())
            .collect();
        let f = moving_average(&x, 24, 24).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn persistence_cases() {
        let ramp: Vec<f64> = (1..=48).map(f64::from).collect();
        let expected: Vec<f64> = (25..=48).map(f64::from).collect();
        assert_eq!(persistence(&ramp, 24, 24).unwrap(), expected);

        let periodic: Vec<f64> = (0..72).map(|h| ((h % 24) as f64).powi(2)).collect();
        let f = persistence(&periodic[..48], 24, 24).unwrap();
        assert_eq!(f, periodic[48..]);

        assert!(persistence(&ramp, 49, 24).is_err());
        assert!(persistence(&ramp, 12, 24).is_err());
    }

    #[test]
    fn ar1_forecast_by_hand() {
        let m = ArModel {
            lags: vec![1],
            coefficients: vec![0.5],
            intercept: 0.0,
            trend: None,
            trend_origin: 0,
            aic: 0.0,
            n_obs: 0,
        };
        let f = forecast_ar(&m, &[3.0, 8.0], 10, 4).unwrap();
        assert_eq!(f, vec![4.0, 2.0, 1.0, 0.5]);

        let flat = ArModel {
            lags: vec![],
            coefficients: vec![],
            intercept: 2.5,
            ..m.clone()
        };
        assert_eq!(forecast_ar(&flat, &[1.0], 0, 3).unwrap(), vec![2.5; 3]);

        let ar3 = ArModel {
            lags: vec![1, 2, 3],
            coefficients: vec![0.1, 0.1, 0.1],
            ..m
        };
        assert!(forecast_ar(&ar3, &[1.0, 2.0], 0, 2).is_err());
    }

    fn simulate_ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut y = vec![0.0];
        for _ in 1..n {
            let prev = *y.last().unwrap();
            y.push(phi * prev + noise.sample(&mut rng));
        }
        y
    }

    #[test]
    fn recovers_ar1_coefficient_and_minimises_aic() {
        let y = simulate_ar1(0.8, 10_000, 1);
        let m = fit_ar(&y, 0, 8, true).unwrap();
        assert!((m.coefficients[0] - 0.8).abs() < 0.05, "{:?}", m.coefficients);
        let all = ar_candidates(&y, 0, 8, true).unwrap();
        assert_eq!(all.len(), 16);
        assert!(all.iter().all(|c| m.aic <= c.aic));
    }

    #[test]
    fn closed_form_ar1_matches_fit() {
        // single-regressor OLS with intercept, computed from moments
        let y = simulate_ar1(0.8, 2_000, 4);
        let (x, t) = (&y[..y.len() - 1], &y[1..]);
        let n = x.len() as f64;
        let (mx, mt) = (x.iter().sum::<f64>() / n, t.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(t).map(|(a, b)| (a - mx) * (b - mt)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let phi = sxy / sxx;
        let c = mt - phi * mx;
        let m = ar_candidates(&y, 0, 1, false).unwrap().remove(0);
        assert!((m.coefficients[0] - phi).abs() < 1e-10);
        assert!((m.intercept - c).abs() < 1e-10);
    }

    #[test]
    fn white_noise_selects_negligible_lags() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let noise = Normal::new(0.0, 1.0).unwrap();
            let y: Vec<f64> = (0..5000).map(|_| noise.sample(&mut rng)).collect();
            let m = fit_ar(&y, 0, 6, false).unwrap();
            assert!(m.coefficients.iter().all(|c| c.abs() < 0.05), "{:?}", m.coefficients);
        }
    }

    #[test]
    fn trend_is_recovered_in_hours() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut y = vec![0.0];
        for t in 1..4000 {
            let prev = *y.last().unwrap();
            y.push(0.5 * prev + 0.002 * t as f64 + noise.sample(&mut rng));
        }
        let m = fit_ar(&y, 500, 3, true).unwrap();
        let slope = m.trend.expect("trend selected");
        assert!((slope - 0.002).abs() < 2e-4, "{slope}");
        assert_eq!(m.trend_origin, 500);
    }

    #[test]
    fn too_short_or_degenerate_series() {
        assert!(fit_ar(&[1.0; 10], 0, 5, false).is_err());
        // a constant series makes every lag collinear with the intercept
        assert!(matches!(fit_ar(&[2.0; 200], 0, 3, false), Err(Error::Fit(_))));
    }
}
