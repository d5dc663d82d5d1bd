//! Statistical checks on generated series.

use microcast_core::synth::{build_world, simulate, OuParams, WorldSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample_variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

#[test]
fn stationary_variance_of_flat_process() {
    // deviation recursion d' = (1-κ)d + σε has variance σ²/(1-(1-κ)²)
    let (kappa, sigma): (f64, f64) = (0.5, 5.0);
    let expected = sigma * sigma / (1.0 - (1.0 - kappa) * (1.0 - kappa));
    assert!((expected - 33.333).abs() < 1e-2);
    for seed in [1, 2, 3] {
        let p = OuParams {
            kappa,
            sigma,
            ..OuParams::flat(12.0)
        };
        let x = simulate(&p, 100_000, &mut ChaCha8Rng::seed_from_u64(seed));
        let v = sample_variance(&x[1000..]);
        assert!((v / expected - 1.0).abs() < 0.05, "seed {seed}: variance {v}");
    }
}

/// Power at angular frequency `w` of the series with its mean removed.
fn power(x: &[f64], w: f64) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (t, v) in x.iter().enumerate() {
        re += (v - m) * (w * t as f64).cos();
        im += (v - m) * (w * t as f64).sin();
    }
    (re * re + im * im) / x.len() as f64
}

#[test]
fn daily_cycle_dominates_the_periodogram() {
    let p = OuParams {
        sigma: 5.0,
        gamma: 10.0,
        ..OuParams::flat(0.0)
    };
    let x = simulate(&p, 24 * 200, &mut ChaCha8Rng::seed_from_u64(4));
    let daily = power(&x, 2.0 * std::f64::consts::PI / 24.0);
    for period in [5.0, 7.0, 11.0, 17.0, 31.0, 50.0] {
        let other = power(&x, 2.0 * std::f64::consts::PI / period);
        assert!(daily > 20.0 * other, "period {period}: {daily} vs {other}");
    }
}

#[test]
fn worlds_are_reproducible_and_seed_dependent() {
    let spec = WorldSpec::years(3, 0.1, 11);
    let (wa, a) = build_world(&spec).unwrap();
    let (wb, b) = build_world(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(wa.params, wb.params);
    let (_, c) = build_world(&WorldSpec { seed: 12, ..spec }).unwrap();
    assert_ne!(a[0].values, c[0].values);
}

#[test]
fn nearby_stations_share_parameters() {
    // parameters are smooth functions of location plus small noise, so the
    // closest pair should differ less than the farthest pair on average
    let (w, _) = build_world(&WorldSpec::years(20, 0.01, 5)).unwrap();
    let n = w.locations.len();
    let dist = |i: usize, j: usize| {
        let (a, b) = (w.locations[i], w.locations[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|p, q| dist(p.0, p.1).total_cmp(&dist(q.0, q.1)));
    let gap = |ps: &[(usize, usize)]| {
        ps.iter()
            .map(|&(i, j)| (w.params[i].a - w.params[j].a).abs() / 20.0 + (w.params[i].gamma - w.params[j].gamma).abs() / 15.0)
            .sum::<f64>()
            / ps.len() as f64
    };
    let k = pairs.len() / 5;
    assert!(gap(&pairs[..k]) < gap(&pairs[pairs.len() - k..]));
}
