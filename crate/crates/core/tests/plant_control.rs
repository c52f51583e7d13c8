mod common;

use common::{check_golden, check_golden_hash, default_env, render};
use rayon::prelude::*;
use shiftlab::config::ExperimentConfig;
use shiftlab::controller::{
    best_candidate, finetune_nominal_model, fit_nominal_model, one_step_mse, plan_action, MpcController, NominalModel,
    PlannerConfig, RandomController,
};
use shiftlab::encoder::{fit_pca, Featurizer, ObsWindow};
use shiftlab::env::{observe, Decision, Env, EnvParams, EnvState, InitSpec, ObsMap, ShiftSpec, TargetProfile, Trajectory};
use shiftlab::rng::{self, Purpose};

fn reference_controller(cfg: &ExperimentConfig) -> MpcController {
    MpcController::new(NominalModel::from_params(&cfg.env), cfg.planner)
}

#[test]
fn nominal_episode_return_is_frozen() {
    let cfg = ExperimentConfig::default();
    let env = default_env(&cfg, ShiftSpec::ID);
    let a = env.run_episode(&mut reference_controller(&cfg), 0).unwrap();
    let b = env.run_episode(&mut reference_controller(&cfg), 0).unwrap();
    assert_eq!(a, b);
    check_golden("nominal_episode_return.txt", &format!("{:?}\n", a.episode_return));
}

#[test]
fn heavy_plant_degrades_the_baseline_on_the_same_seed() {
    let cfg = ExperimentConfig::default();
    for seed in [0, 1, 2] {
        let id = default_env(&cfg, ShiftSpec::ID).run_episode(&mut reference_controller(&cfg), seed).unwrap();
        let heavy = default_env(&cfg, ShiftSpec::mass(5.0)).run_episode(&mut reference_controller(&cfg), seed).unwrap();
        assert!(heavy.episode_return < id.episode_return, "seed {seed}");
    }
}

#[test]
fn zero_action_return_has_a_closed_form() {
    let params = EnvParams { gravity: 0.0, obs_noise_std: 0.0, ..EnvParams::default() };
    let profile = TargetProfile { segment_len: 50, targets: vec![0.3] };
    let init = InitSpec { x_center: 0.7, x_spread: 0.0, v0: 0.3 };
    let env = Env::new(&params, ShiftSpec::ID, profile, ObsMap::zeros(params.obs_dim), init).unwrap();
    let mut zero = |_: &mut shiftlab::env::StepContext<'_>| Ok(Decision::plain(0.0));
    let traj = env.run_episode(&mut zero, 5).unwrap();
    let r = 1.0 - params.dt * (params.friction + params.damping) / params.mass;
    let want: f64 = (1..=params.horizon as i32).map(|t| (1.0 - (0.3 * r.powi(t) - 0.3).abs()).clamp(0.0, 1.0)).sum();
    assert!((traj.episode_return - want).abs() < 1e-10, "{} vs {want}", traj.episode_return);
}

#[test]
fn observations_are_identical_across_threads() {
    let cfg = ExperimentConfig::default();
    let m = cfg.obs_map;
    let map = ObsMap::generate(m.seed, cfg.env.obs_dim, m.x_scale, m.v_scale);
    let state = EnvState::new(0.8, 0.45);
    let once = |_: usize| {
        let mut r = rng::stream(17, Purpose::ObsNoise);
        render(observe(&state, &cfg.env, &map, &mut r).values())
    };
    let serial = once(0);
    let parallel: Vec<String> = (0..16).into_par_iter().map(once).collect();
    assert!(parallel.iter().all(|p| *p == serial));
    check_golden_hash("observation.sha256", &serial);
}

fn random_data(env: &Env, seeds: std::ops::Range<u64>) -> Vec<Trajectory> {
    seeds.map(|s| env.run_episode(&mut RandomController, s).unwrap()).collect()
}

fn noiseless_env(shift: ShiftSpec) -> Env {
    let params = EnvParams { obs_noise_std: 0.0, ..EnvParams::default() };
    let init = InitSpec { x_center: 0.0, x_spread: 1.5, v0: 0.0 };
    Env::new(&params, shift, TargetProfile::default(), ObsMap::zeros(params.obs_dim), init).unwrap()
}

/// Independent least squares: 3×3 normal equations solved by Cramer's rule.
fn normal_equations(trajs: &[Trajectory], dt: f64) -> [f64; 3] {
    let mut xtx = [[0.0; 3]; 3];
    let mut xty = [0.0; 3];
    for tr in trajs {
        for t in 0..tr.actions.len() {
            let (s, n) = (tr.states[t], tr.states[t + 1]);
            let row = [tr.actions[t], -s.v, -s.x.sin()];
            let y = (n.v - s.v) / dt;
            for i in 0..3 {
                xty[i] += row[i] * y;
                for j in 0..3 {
                    xtx[i][j] += row[i] * row[j];
                }
            }
        }
    }
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(xtx);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut m = xtx;
        for i in 0..3 {
            m[i][k] = xty[i];
        }
        *o = det(m) / d;
    }
    out
}

#[test]
fn heavy_plant_identification_matches_normal_equations() {
    let env = noiseless_env(ShiftSpec::mass(5.0));
    let data = random_data(&env, 0..4);
    let reference = NominalModel::from_params(&EnvParams::default());
    let fitted = fit_nominal_model(&data, &reference).unwrap();
    let oracle = normal_equations(&data, reference.dt);
    for (a, b) in fitted.coefficients().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-3), "{a} vs {b}");
    }
    assert!((fitted.mass_hat - 5.0).abs() < 1e-6, "mass_hat {}", fitted.mass_hat);
}

#[test]
fn long_finetuning_converges_to_the_heavy_fit_and_forgets_id() {
    let heavy = random_data(&noiseless_env(ShiftSpec::mass(5.0)), 0..4);
    let nominal = NominalModel::from_params(&EnvParams::default());
    let tuned = finetune_nominal_model(&nominal, &heavy, 100_000, 0.5).unwrap();
    let fit = fit_nominal_model(&heavy, &nominal).unwrap();
    for (a, b) in tuned.coefficients().iter().zip(fit.coefficients()) {
        assert!((a - b).abs() < 1e-6 * b.abs().max(1.0), "{a} vs {b}");
    }
    let held_out = random_data(&noiseless_env(ShiftSpec::ID), 100..104);
    let short = finetune_nominal_model(&nominal, &heavy, 500, 0.5).unwrap();
    assert!(one_step_mse(&short, &held_out) > one_step_mse(&nominal, &held_out));
}

#[test]
fn zero_action_dominates_when_already_tracking() {
    let model = NominalModel { mass_hat: 1.0, gravity_hat: 0.0, gear_hat: 1.0, friction_hat: 0.0, damping_hat: 0.0, dt: 0.05 };
    let profile = TargetProfile { segment_len: 50, targets: vec![0.4] };
    let cfg = PlannerConfig { n_candidates: 32, ..PlannerConfig::default() };
    let mut r = rng::stream(3, Purpose::Planner);
    let mut candidates: Vec<Vec<f64>> = (0..cfg.n_candidates).map(|_| shiftlab::controller::sample_candidate(&cfg, &mut r)).collect();
    candidates.push(vec![0.0; cfg.plan_horizon]);
    let state = EnvState::new(0.2, 0.4);
    let zero_value = shiftlab::controller::rollout_value(&model, &state, &candidates[cfg.n_candidates], &profile);
    for c in &candidates {
        assert!(shiftlab::controller::rollout_value(&model, &state, c, &profile) <= zero_value);
    }
    let (_, best) = best_candidate(&model, &state, &candidates, &profile);
    assert!(best >= zero_value);
}

#[test]
fn planner_action_is_frozen() {
    let cfg = ExperimentConfig::default();
    let model = NominalModel::from_params(&cfg.env);
    let state = EnvState::new(0.3, 0.2);
    let act = |_: usize| plan_action(&model, &state, &cfg.planner, &cfg.profile, &mut rng::stream(0, Purpose::Planner));
    let a = act(0);
    assert!((0..8).into_par_iter().map(act).all(|b| b == a));
    check_golden("planner_action.txt", &format!("{a:?}\n"));
}

fn default_featurizer(cfg: &ExperimentConfig) -> Featurizer {
    let e = &cfg.encoder;
    Featurizer::generate(e.featurizer_seed, e.window, cfg.env.obs_dim, e.feature_dim, e.gain)
}

#[test]
fn featurizer_constants_are_frozen() {
    let f = default_featurizer(&ExperimentConfig::default());
    check_golden_hash("featurizer.sha256", &serde_json::to_string(&f).unwrap());
}

#[test]
fn golden_window_feature_and_embedding() {
    let cfg = ExperimentConfig::default();
    let traj = default_env(&cfg, ShiftSpec::ID).run_episode(&mut reference_controller(&cfg), 0).unwrap();
    let f = default_featurizer(&cfg);
    let window = ObsWindow::ending_at(&traj.observations, 10, f.window).unwrap();
    let raw = f.featurize_window(&window).unwrap();
    assert_eq!(raw, f.featurize_window(&window).unwrap());
    check_golden_hash("window_feature.sha256", &render(&raw.0));
    let feats: Vec<Vec<f64>> = f.featurize_history(&traj.observations).unwrap().into_iter().map(|r| r.0).collect();
    let pca = fit_pca(&feats, cfg.encoder.pca_dim).unwrap();
    check_golden_hash("window_embedding.sha256", &render(&pca.embed(&raw).unwrap().0));
}
