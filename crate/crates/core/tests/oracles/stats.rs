//! Independent brute-force oracles for the paired-evaluation statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shiftlab::evalstats::{
    bootstrap_differences, iqm, p_improve, paired_bootstrap, percentile_delta, reuse_delta, PairedSample,
};

fn random_sample(rng: &mut ChaCha8Rng, n: usize) -> PairedSample {
    // Coarse grid values so ties and exact zeros occur.
    let grid = |rng: &mut ChaCha8Rng| (rng.random_range(-20..=20) as f64) * 0.25;
    let baseline: Vec<f64> = (0..n).map(|_| grid(rng)).collect();
    let method: Vec<f64> = baseline.iter().map(|b| b + grid(rng) * 0.5).collect();
    PairedSample { env: "e".into(), block: "first".into(), seeds: (0..n as u64).collect(), method, baseline }
}

/// Quantile by explicit order statistics: `x[i] + f (x[i+1] - x[i])` at
/// position `h = (n - 1) q`.
fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    // Insertion sort keeps the oracle independent of the library's sort.
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let h = (v.len() - 1) as f64 * q;
    let i = h as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (h - i as f64) * (v[i + 1] - v[i])
}

fn oracle_iqm(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    // Repeatedly strike the current minimum and maximum.
    for _ in 0..values.len() / 4 {
        let (imin, _) = v.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &x)| if x < b.1 { (i, x) } else { b });
        v.remove(imin);
        let (imax, _) = v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
        v.remove(imax);
    }
    v.iter().sum::<f64>() / v.len() as f64
}

struct OracleBoot {
    delta: f64,
    ci: (f64, f64),
    p: f64,
    le: usize,
    ge: usize,
}

/// Replays the documented resampling scheme (sequential `random_range(0..n)`
/// draws from `ChaCha8Rng::seed_from_u64(seed)`) with naive aggregation.
fn oracle_bootstrap(d: &[f64], b: usize, seed: u64) -> OracleBoot {
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::new();
    let (mut le, mut ge) = (0usize, 0usize);
    for _ in 0..b {
        let mut s = 0.0;
        for _ in 0..n {
            s += d[rng.random_range(0..n)];
        }
        let m = s / n as f64;
        if m <= 0.0 {
            le += 1;
        }
        if m >= 0.0 {
            ge += 1;
        }
        means.push(m);
    }
    let tail = le.min(ge) as f64 / b as f64;
    let p = (2.0 * tail).max(1.0 / b as f64).min(1.0);
    OracleBoot {
        delta: d.iter().sum::<f64>() / n as f64,
        ci: (oracle_quantile(&means, 0.025), oracle_quantile(&means, 0.975)),
        p,
        le,
        ge,
    }
}

pub fn paired_bootstrap_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for case in 0..100 {
        let n = rng.random_range(2..=12);
        let s = random_sample(&mut rng, n);
        let b = 500;
        let got = paired_bootstrap(&s, b, 42 + case).unwrap();
        let want = oracle_bootstrap(&s.deltas(), b, 42 + case);
        assert!((got.delta - want.delta).abs() < 1e-9, "case {case}: delta");
        assert!((got.ci_low - want.ci.0).abs() < 1e-9, "case {case}: ci_low");
        assert!((got.ci_high - want.ci.1).abs() < 1e-9, "case {case}: ci_high");
        // p is a count ratio: exact.
        assert_eq!(got.p_two_sided, want.p, "case {case}: p (le {}, ge {})", want.le, want.ge);
    }
}

pub fn iqm_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    for case in 0..100 {
        let n = rng.random_range(4..=40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        assert!((iqm(&v).unwrap() - oracle_iqm(&v)).abs() < 1e-9, "case {case}");
    }
}

pub fn p_improve_matches_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    for case in 0..100 {
        let n = rng.random_range(1..=30);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-2..=2) as f64).collect();
        let mut twice = 0usize;
        for x in &d {
            twice += if *x > 0.0 { 2 } else if *x == 0.0 { 1 } else { 0 };
        }
        assert_eq!(p_improve(&d).unwrap(), twice as f64 / (2 * n) as f64, "case {case}");
    }
}

pub fn percentile_delta_matches_order_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let ps = [0.0, 10.0, 25.0, 50.0, 75.0, 90.0, 100.0];
    for case in 0..100 {
        let n = rng.random_range(1..=25);
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        for (p, d) in percentile_delta(&m, &b, &ps).unwrap() {
            let want = oracle_quantile(&m, p / 100.0) - oracle_quantile(&b, p / 100.0);
            assert!((d - want).abs() < 1e-9, "case {case} p {p}");
        }
    }
}

pub fn percentile_of_one_to_thirty_at_ten() {
    let b: Vec<f64> = vec![0.0; 30];
    let m: Vec<f64> = (1..=30).map(f64::from).collect();
    let d = percentile_delta(&m, &b, &[10.0]).unwrap();
    assert!((d[0].1 - 3.9).abs() < 1e-12);
}

pub fn reuse_delta_is_bootstrap_of_block_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    for case in 0..20 {
        let first = random_sample(&mut rng, 10);
        let second = random_sample(&mut rng, 10);
        let got = reuse_delta(&first, &second, 400, case).unwrap();
        let d: Vec<f64> = second.method.iter().zip(&first.method).map(|(s, f)| s - f).collect();
        assert_eq!(got, bootstrap_differences(&d, 400, case).unwrap());
    }
    let first = random_sample(&mut rng, 8);
    let mut second = first.clone();
    second.method.iter_mut().for_each(|m| *m += 2.5);
    let s = reuse_delta(&first, &second, 1000, 42).unwrap();
    assert_eq!((s.delta, s.ci_low, s.ci_high, s.p_two_sided), (2.5, 2.5, 2.5, 1.0 / 1000.0));
    let same = reuse_delta(&first, &first, 1000, 42).unwrap();
    assert_eq!((same.delta, same.p_two_sided), (0.0, 1.0));
}

pub fn constant_deltas_hit_the_p_bounds_exactly() {
    for b in [10, 1000, 10_000] {
        let plus = bootstrap_differences(&[1.0; 30], b, 42).unwrap();
        assert_eq!((plus.delta, plus.ci_low, plus.ci_high), (1.0, 1.0, 1.0));
        assert_eq!(plus.p_two_sided, 1.0 / b as f64);
        let minus = bootstrap_differences(&[-0.5; 30], b, 42).unwrap();
        assert_eq!(minus.p_two_sided, 1.0 / b as f64);
        let zero = bootstrap_differences(&[0.0; 30], b, 42).unwrap();
        assert_eq!((zero.delta, zero.ci_low, zero.ci_high, zero.p_two_sided), (0.0, 0.0, 0.0, 1.0));
    }
}

pub fn ci_coverage_is_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let normal = Normal::new(1.5, 2.0).unwrap();
    let trials = 200;
    let mut covered = 0;
    for trial in 0..trials {
        let d: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
        let s = bootstrap_differences(&d, 2000, trial).unwrap();
        if s.ci_low <= 1.5 && 1.5 <= s.ci_high {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    assert!((0.88..=0.99).contains(&rate), "coverage {rate}");
}

pub fn golden_summary_for_a_fixed_sample() {
    let method: Vec<f64> = (0..30).map(|i| 100.0 + ((i * 37) % 11) as f64).collect();
    let baseline: Vec<f64> = (0..30).map(|i| 98.0 + ((i * 17) % 7) as f64).collect();
    let s = PairedSample { env: "e".into(), block: "first".into(), seeds: (0..30).collect(), method, baseline };
    let a = paired_bootstrap(&s, 10_000, 42).unwrap();
    assert_eq!(a, paired_bootstrap(&s, 10_000, 42).unwrap());
    let text = format!("{:?} {:?} {:?} {:?} {:?}", a.delta, a.ci_low, a.ci_high, a.p_two_sided, a.iqm_delta);
    assert_eq!(text, include_str!("../golden/bootstrap_summary.txt").trim());
}
