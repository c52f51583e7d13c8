//! Numerical kernels checked against independent oracles: finite
//! differences, EM monotonicity, a second eigensolver, pair counting and CDF
//! enumeration.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shiftlab::encoder::{column_means, covariance, fit_pca};
use shiftlab::expert::{pref_loss, pref_loss_grad, ExpertParams, PreferencePair};
use shiftlab::geomdiag::ks_statistic;
use shiftlab::ooddet::{fit_gmm, roc_auc};
use shiftlab::rng::{self, Purpose};

fn random_expert(rng: &mut ChaCha8Rng, input_dim: usize, hidden: usize) -> ExpertParams {
    let mut init = rng::stream(rng.random::<u64>(), Purpose::Training);
    let mut e = ExpertParams::init("c", input_dim, hidden, rng.random_range(0.2..1.0), &mut init);
    // Spread the weights so tanh saturation is exercised.
    let p: Vec<f64> = e.flat().iter().map(|w| w * rng.random_range(0.5..3.0)).collect();
    e.set_flat(&p);
    e
}

pub fn pref_loss_grad_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2001);
    let step = 1e-5;
    let mut checked = 0;
    while checked < 50 {
        let input_dim = rng.random_range(2..=6);
        let hidden = rng.random_range(1..=8);
        let expert = random_expert(&mut rng, input_dim, hidden);
        let context: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pair = PreferencePair {
            context,
            a_plus: rng.random_range(-1.5..1.5),
            a_minus: rng.random_range(-1.5..1.5),
            contrast: 1.0,
        };
        let m = rng.random_range(0.1..1.0);
        let (loss, grad) = pref_loss_grad(&expert, &pair, m).unwrap();
        assert!((loss - pref_loss(&expert, &pair, m).unwrap()).abs() < 1e-12);
        // Keep configurations whose finite-difference stencil stays clear of
        // the hinge and |·| kinks.
        let a = pair.context[input_dim - 1] + expert.delta(&pair.context).unwrap();
        if loss < 1e-3 || (a - pair.a_plus).abs() < 1e-3 || (a - pair.a_minus).abs() < 1e-3 {
            continue;
        }
        let theta = expert.flat();
        let mut probe = expert.clone();
        for (i, g) in grad.iter().enumerate() {
            let mut tp = theta.clone();
            tp[i] += step;
            probe.set_flat(&tp);
            let up = pref_loss(&probe, &pair, m).unwrap();
            tp[i] -= 2.0 * step;
            probe.set_flat(&tp);
            let down = pref_loss(&probe, &pair, m).unwrap();
            let fd = (up - down) / (2.0 * step);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-4, "config {checked}, coordinate {i}: analytic {g}, fd {fd}");
        }
        checked += 1;
    }
}

pub fn gradient_flips_sign_when_preferences_swap() {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    for _ in 0..10 {
        let expert = random_expert(&mut rng, 3, 4);
        let context = vec![0.2, -0.4, 0.1];
        let a = context[2] + expert.delta(&context).unwrap();
        let pair = PreferencePair { context: context.clone(), a_plus: a + 0.3, a_minus: a - 0.3, contrast: 1.0 };
        let swapped = PreferencePair { a_plus: pair.a_minus, a_minus: pair.a_plus, ..pair.clone() };
        let (l1, g1) = pref_loss_grad(&expert, &pair, 0.5).unwrap();
        let (l2, g2) = pref_loss_grad(&expert, &swapped, 0.5).unwrap();
        assert!((l1 - 0.5).abs() < 1e-12 && (l2 - 0.5).abs() < 1e-12);
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x + y).abs() < 1e-12);
        }
    }
}

fn blobs(rng: &mut ChaCha8Rng, k: usize, d: usize, per: usize) -> Vec<Vec<f64>> {
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    for _ in 0..k {
        let center: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        let scale = rng.random_range(0.3..1.5);
        for _ in 0..per {
            rows.push(center.iter().map(|c| c + scale * n01.sample(rng)).collect());
        }
    }
    rows
}

pub fn em_log_likelihood_never_decreases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2003);
    for fit in 0..20 {
        let d = rng.random_range(1..=4);
        let true_k = rng.random_range(1..=3);
        let rows = blobs(&mut rng, true_k, d, 80);
        let k = rng.random_range(1..=4);
        let mut fit_rng = rng::stream(fit, Purpose::Detector);
        let model = fit_gmm(&rows, k, &mut fit_rng).unwrap();
        for w in model.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "fit {fit}: log-likelihood fell from {} to {}", w[0], w[1]);
        }
    }
}

pub fn single_component_gmm_is_the_sample_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2004);
    let rows = blobs(&mut rng, 1, 3, 200);
    let model = fit_gmm(&rows, 1, &mut rng::stream(0, Purpose::Detector)).unwrap();
    let mean = column_means(&rows);
    let cov = covariance(&rows, &mean);
    let c = &model.components[0];
    for j in 0..3 {
        assert!((c.mean[j] - mean[j]).abs() < 1e-9);
    }
    // Sample covariance here is the maximum-likelihood (1/n) estimate plus
    // the fixed ridge; compare against the unbiased one rescaled.
    let n = rows.len() as f64;
    for i in 0..3 {
        for j in 0..3 {
            let ml = cov[i * 3 + j] * (n - 1.0) / n + if i == j { shiftlab::ooddet::GMM_RIDGE } else { 0.0 };
            assert!((c.cov[(i, j)] - ml).abs() < 1e-9, "({i},{j}) {} vs {ml}", c.cov[(i, j)]);
        }
    }
}

pub fn pca_matches_an_independent_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(2005);
    for case in 0..10 {
        let p = rng.random_range(3..=12);
        let d = rng.random_range(1..=p);
        let n = rng.random_range(p + 5..=80);
        // Correlated data through a random mixing matrix.
        let mix: Vec<f64> = (0..p * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                (0..p).map(|i| (0..p).map(|j| mix[i * p + j] * z[j]).sum()).collect()
            })
            .collect();
        let pca = fit_pca(&rows, d).unwrap();
        for a in 0..d {
            for b in 0..d {
                let dot: f64 = pca.component(a).iter().zip(pca.component(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "case {case}: <{a},{b}> = {dot}");
            }
        }
        // Oracle: covariance assembled here, eigenvalues from nalgebra.
        let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut c = DMatrix::<f64>::zeros(p, p);
        for r in &rows {
            for i in 0..p {
                for j in 0..p {
                    c[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n as f64 - 1.0);
                }
            }
        }
        let mut ev: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for i in 0..d {
            assert!((pca.eigenvalues[i] - ev[i].max(0.0)).abs() < 1e-8, "case {case}: eigenvalue {i}");
        }
    }
}

pub fn isotropic_data_has_unit_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(2006);
    let n01 = Normal::new(0.0, 1.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..20_000).map(|_| vec![n01.sample(&mut rng), n01.sample(&mut rng)]).collect();
    let pca = fit_pca(&rows, 2).unwrap();
    for ev in &pca.eigenvalues {
        assert!((ev - 1.0).abs() < 0.05, "{ev}");
    }
}

pub fn full_rank_pca_reconstructs_the_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(2007);
    let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let pca = fit_pca(&rows, 5).unwrap();
    for r in &rows {
        let h = pca.embed(&shiftlab::encoder::RawFeature(r.clone())).unwrap();
        let back = pca.reconstruct(&h);
        for (a, b) in back.iter().zip(r) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

pub fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2008);
    for case in 0..50 {
        let n = rng.random_range(1..=60);
        let m = rng.random_range(1..=60);
        // Integer-valued scores so ties are common.
        let id: Vec<f64> = (0..n).map(|_| rng.random_range(0..15) as f64).collect();
        let ood: Vec<f64> = (0..m).map(|_| rng.random_range(3..20) as f64).collect();
        let mut twice = 0u64;
        for o in &ood {
            for i in &id {
                twice += if o > i { 2 } else if o == i { 1 } else { 0 };
            }
        }
        assert_eq!(roc_auc(&id, &ood).unwrap(), twice as f64 / (2 * n * m) as f64, "case {case}");
    }
}

pub fn ks_matches_cdf_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2009);
    for case in 0..50 {
        let n = rng.random_range(1..=30);
        let m = rng.random_range(1..=30);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 * 0.5).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(0..12) as f64 * 0.5).collect();
        // Enumerate every jump point and compare the two step CDFs exactly in
        // integer arithmetic.
        let mut best = 0i64;
        for x in a.iter().chain(&b) {
            let ca = a.iter().filter(|v| *v <= x).count() as i64;
            let cb = b.iter().filter(|v| *v <= x).count() as i64;
            best = best.max((ca * m as i64 - cb * n as i64).abs());
        }
        assert_eq!(ks_statistic(&a, &b).unwrap(), best as f64 / (n * m) as f64, "case {case}");
    }
}
