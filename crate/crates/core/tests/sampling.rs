//! Distributional checks of the noise samplers.

use levyap::noise::{stream, IncrementSampler, JumpMeasureSpec, JumpSampler, MagnitudeSampler, NoiseModel};

/// Kolmogorov–Smirnov distance of a sample from a continuous CDF.
fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn magnitudes_follow_the_truncated_power_law() {
    for (alpha, floor, cutoff) in [(1.5, 1e-3, 1.0), (0.7, 1e-2, 2.0), (1.9, 1e-4, 0.5)] {
        let m = JumpMeasureSpec::new(alpha, 1.0, cutoff, floor, 1).unwrap();
        let sampler = MagnitudeSampler::new(&m).unwrap();
        let mut rng = stream(3, 0);
        let n = 40_000;
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
        assert!(xs.iter().all(|x| (floor..cutoff).contains(x)));
        let (lo, hi) = (floor.powf(-alpha), cutoff.powf(-alpha));
        let d = ks_distance(xs, |r| (lo - r.powf(-alpha)) / (lo - hi));
        // 99.9% critical value of the one-sample statistic.
        assert!(d < 1.95 / (n as f64).sqrt(), "alpha = {alpha}: D = {d}");
    }
}

#[test]
fn signs_are_balanced_and_counts_are_poisson() {
    let m = JumpMeasureSpec::new(1.5, 1.0, 1.0, 1e-2, 1).unwrap();
    let dt = 1e-2;
    let sampler = JumpSampler::new(&m, dt).unwrap();
    let mut rng = stream(4, 0);
    let steps = 20_000;
    let mut jumps = Vec::new();
    let (mut count, mut positive, mut sum_sq) = (0usize, 0usize, 0.0);
    for _ in 0..steps {
        sampler.sample_into(&mut jumps, &mut rng);
        assert!(jumps.windows(2).all(|w| w[0].offset <= w[1].offset));
        count += jumps.len();
        positive += jumps.iter().filter(|j| j.size > 0.0).count();
        sum_sq += jumps.iter().map(|j| j.size * j.size).sum::<f64>();
    }
    let mean = m.intensity() * dt * steps as f64;
    assert!((count as f64 - mean).abs() < 4.0 * mean.sqrt(), "{count} vs {mean}");
    let p = positive as f64 / count as f64;
    assert!((p - 0.5).abs() < 4.0 * (0.25 / count as f64).sqrt(), "{p}");
    // Second moment per unit time matches the measure.
    let rate = sum_sq / (steps as f64 * dt);
    assert!((rate / m.second_moment() - 1.0).abs() < 0.05, "{rate} vs {}", m.second_moment());
}

#[test]
fn mark_sums_have_the_measure_variance() {
    let m = JumpMeasureSpec::new(1.2, 0.8, 1.0, 1e-2, 1).unwrap();
    let dt = 1e-2;
    let sampler = JumpSampler::new(&m, dt).unwrap();
    let mut rng = stream(5, 0);
    let n = 50_000;
    let sums: Vec<f64> = (0..n).map(|_| sampler.sample_sum(&mut rng)).collect();
    let mean = sums.iter().sum::<f64>() / n as f64;
    let var = sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    let want = m.second_moment() * dt;
    assert!(mean.abs() < 5.0 * (want / n as f64).sqrt());
    assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
}

#[test]
fn gaussian_increments_have_rate_q() {
    let m = JumpMeasureSpec::new(1.5, 1.0, 1.0, 1e-2, 1).unwrap().with_small_jump_gaussian(true);
    let noise = NoiseModel::levy(m);
    let dt = 1e-3;
    let sampler = IncrementSampler::new(&noise, 1, dt).unwrap();
    let mut rng = stream(6, 0);
    let n = 100_000;
    let mut db = [0.0];
    let var = (0..n)
        .map(|_| {
            sampler.sample_gaussian(&mut db, &mut rng);
            db[0] * db[0]
        })
        .sum::<f64>()
        / n as f64;
    let want = noise.gaussian_rate() * dt;
    assert!(noise.gaussian_rate() > 1.0);
    assert!((var / want - 1.0).abs() < 0.02, "{var} vs {want}");
}

#[test]
fn zero_floor_cannot_be_sampled() {
    let m = JumpMeasureSpec::new(1.5, 1.0, 1.0, 0.0, 1).unwrap();
    assert!(MagnitudeSampler::new(&m).is_err());
}
