use proptest::prelude::*;
use shiftlab::config::ExperimentConfig;
use shiftlab::env::{apply_shift, EnvParams, ShiftFamily, ShiftSpec};
use shiftlab::evalstats::{bootstrap_differences, iqm, p_improve};
use shiftlab::expert::ExpertParams;
use shiftlab::geomdiag::ks_statistic;
use shiftlab::ooddet::{calibrate_threshold, roc_auc};
use shiftlab::rng::{self, Purpose};

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-50i32..50).prop_map(|v| v as f64 * 0.5), 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bootstrap_summary_is_well_formed(d in prop::collection::vec(-10.0f64..10.0, 4..40), seed in any::<u64>()) {
        let b = 200;
        let s = bootstrap_differences(&d, b, seed).unwrap();
        prop_assert!(s.p_two_sided >= 1.0 / b as f64 && s.p_two_sided <= 1.0);
        prop_assert!(s.ci_low <= s.ci_high);
        prop_assert!(s.iqm_ci_low <= s.iqm_ci_high);
        prop_assert!((0.0..=1.0).contains(&s.p_improve));
    }

    #[test]
    fn iqm_lies_within_the_range(v in prop::collection::vec(-100.0f64..100.0, 4..60)) {
        let m = iqm(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-9 && m <= hi + 1e-9);
        prop_assert!((0.0..=1.0).contains(&p_improve(&v).unwrap()));
    }

    #[test]
    fn auc_is_complementary(a in scores(40), b in scores(40)) {
        let sum = roc_auc(&a, &b).unwrap() + roc_auc(&b, &a).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ks_is_symmetric_and_bounded(a in scores(40), b in scores(40)) {
        let ab = ks_statistic(&a, &b).unwrap();
        prop_assert_eq!(ab, ks_statistic(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn calibration_never_exceeds_the_target(s in scores(200), fpr in 0.01f64..0.5) {
        let cal = calibrate_threshold(&s, fpr).unwrap();
        prop_assert!(cal.achieved_fpr <= fpr);
    }

    #[test]
    fn expert_correction_is_bounded(
        seed in any::<u64>(),
        dmax in 0.05f64..2.0,
        scale in 0.1f64..20.0,
        ctx in prop::collection::vec(-5.0f64..5.0, 5),
    ) {
        let mut e = ExpertParams::init("c", 5, 8, dmax, &mut rng::stream(seed, Purpose::Training));
        let p: Vec<f64> = e.flat().iter().map(|w| w * scale).collect();
        e.set_flat(&p);
        prop_assert!(e.delta(&ctx).unwrap().abs() <= dmax);
    }

    #[test]
    fn shift_scales_exactly_one_field(family in 1usize..6, factor in 0.1f64..10.0) {
        let families = [
            ShiftFamily::Id, ShiftFamily::TorsoMass, ShiftFamily::Gravity,
            ShiftFamily::Gear, ShiftFamily::Friction, ShiftFamily::Damping,
        ];
        let base = EnvParams::default();
        let out = apply_shift(&base, &ShiftSpec::new(families[family], factor).unwrap()).unwrap();
        let fields = |p: &EnvParams| [p.mass, p.gravity, p.gear, p.friction, p.damping];
        let (b, o) = (fields(&base), fields(&out));
        for j in 0..5 {
            if j + 1 == family {
                prop_assert_eq!(o[j], b[j] * factor);
            } else {
                prop_assert_eq!(o[j], b[j]);
            }
        }
        prop_assert_eq!((out.dt, out.horizon, out.obs_dim, out.obs_noise_std), (base.dt, base.horizon, base.obs_dim, base.obs_noise_std));
    }

    #[test]
    fn config_survives_a_toml_round_trip(
        seed_a in 0u64..1_000_000,
        resamples in 10usize..20_000,
        q in 0.0f64..0.99,
        horizon in 10usize..400,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.obs_map.seed = seed_a;
        cfg.bootstrap.resamples = resamples;
        cfg.mining.contrast_quantile = q;
        cfg.env.horizon = horizon;
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
}

#[test]
fn partial_tables_fill_defaults_and_typos_are_rejected() {
    let cfg = ExperimentConfig::from_toml("[env]\nmass = 2.0\n[planner]\nn_candidates = 16\n").unwrap();
    assert_eq!(cfg.env, EnvParams { mass: 2.0, ..EnvParams::default() });
    assert_eq!(cfg.planner.n_candidates, 16);
    assert!(ExperimentConfig::from_toml("[env]\nmas = 2.0\n").is_err());
    assert!(ExperimentConfig::from_toml("[expert]\nepoch = 2\n").is_err());
}
