//! Random-shooting MPC over a nominal internal model, and the least-squares
//! machinery that identifies and fine-tunes that model.
//!
//! The plant's one-step velocity update is linear in three reparameterized
//! coefficients:
//!
//! ```text
//! (v' - v) / dt = k_gear * a - k_drag * v - k_grav * sin(x)
//! k_gear = gear / mass,  k_drag = (friction + damping) / mass,  k_grav = gravity
//! ```
//!
//! Friction and damping both multiply `v`, so only their sum is identifiable;
//! the fitted drag is split back using a reference ratio. Likewise only ratios
//! to mass are observable, so mass is recovered relative to a reference gear.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Controller, Decision, EnvParams, EnvState, StepContext, TargetProfile, Trajectory};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const COEFFICIENT_NAMES: [&str; 3] = ["gear/mass", "drag/mass", "gravity"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NominalModel {
    pub mass_hat: f64,
    pub gravity_hat: f64,
    pub gear_hat: f64,
    pub friction_hat: f64,
    pub damping_hat: f64,
    pub dt: f64,
}

impl NominalModel {
    /// The model that exactly matches `params`.
    pub fn from_params(params: &EnvParams) -> Self {
        Self {
            mass_hat: params.mass,
            gravity_hat: params.gravity,
            gear_hat: params.gear,
            friction_hat: params.friction,
            damping_hat: params.damping,
            dt: params.dt,
        }
    }

    /// `[gear/mass, drag/mass, gravity]`.
    pub fn coefficients(&self) -> [f64; 3] {
        [
            self.gear_hat / self.mass_hat,
            (self.friction_hat + self.damping_hat) / self.mass_hat,
            self.gravity_hat,
        ]
    }

    /// Rebuilds physical estimates from coefficients, anchoring the gear and
    /// the friction share of the drag at `reference`.
    pub fn from_coefficients(coef: [f64; 3], reference: &NominalModel) -> Result<Self> {
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("model coefficients {coef:?}")));
        }
        if coef[0] <= 0.0 {
            return Err(Error::invalid(format!("actuator coefficient must be positive, got {}", coef[0])));
        }
        let gear_hat = reference.gear_hat;
        let mass_hat = gear_hat / coef[0];
        let drag = coef[1] * mass_hat;
        let share = reference.friction_hat / (reference.friction_hat + reference.damping_hat);
        Ok(Self {
            mass_hat,
            gravity_hat: coef[2],
            gear_hat,
            friction_hat: drag * share,
            damping_hat: drag * (1.0 - share),
            dt: reference.dt,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.mass_hat, self.gravity_hat, self.gear_hat, self.friction_hat, self.damping_hat, self.dt];
        if fields.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("nominal model fields must be finite and positive: {self:?}")))
        }
    }

    /// Model-predicted next state and tracking reward.
    pub fn predict(&self, state: &EnvState, action: Action, profile: &TargetProfile) -> (EnvState, f64) {
        let [kg, kd, kw] = self.coefficients();
        let a = action.clamp(-1.0, 1.0);
        let v = state.v + self.dt * (kg * a - kd * state.v - kw * state.x.sin());
        let x = state.x + self.dt * v;
        let reward = (1.0 - (v - profile.at(state.t)).abs()).clamp(0.0, 1.0);
        (EnvState { x, v, t: state.t + 1 }, reward)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# nominal model v1\n");
        for (k, v) in [
            ("mass_hat", self.mass_hat),
            ("gravity_hat", self.gravity_hat),
            ("gear_hat", self.gear_hat),
            ("friction_hat", self.friction_hat),
            ("damping_hat", self.damping_hat),
            ("dt", self.dt),
        ] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| Error::Parse(format!("nominal model is missing `{k}`")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("`{k}`: {e}")))
        };
        let model = Self {
            mass_hat: get("mass_hat")?,
            gravity_hat: get("gravity_hat")?,
            gear_hat: get("gear_hat")?,
            friction_hat: get("friction_hat")?,
            damping_hat: get("damping_hat")?,
            dt: get("dt")?,
        };
        model.validate()?;
        Ok(model)
    }
}

pub(crate) fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// One-step regression rows: features `[a, -v, -sin x]`, target `dv/dt`.
pub(crate) fn regression_rows(trajs: &[Trajectory], dt: f64) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for traj in trajs {
        for (t, &a) in traj.actions.iter().enumerate() {
            let (s, s_next) = (traj.states[t], traj.states[t + 1]);
            rows.push([a, -s.v, -s.x.sin()]);
            targets.push((s_next.v - s.v) / dt);
        }
    }
    (rows, targets)
}

/// Least-squares identification of the nominal model from ID trajectories.
///
/// Solved by modified Gram-Schmidt QR over the coefficient columns in the
/// order of [`COEFFICIENT_NAMES`]; a column whose residual norm collapses
/// relative to its own norm is reported as the deficient coefficient.
pub fn fit_nominal_model(trajs: &[Trajectory], reference: &NominalModel) -> Result<NominalModel> {
    let usable: Vec<&Trajectory> = trajs.iter().filter(|t| t.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid("need at least one trajectory with two or more steps"));
    }
    let owned: Vec<Trajectory> = usable.into_iter().cloned().collect();
    let (rows, y) = regression_rows(&owned, reference.dt);
    let coef = least_squares_qr(&rows, &y)?;
    NominalModel::from_coefficients(coef, reference)
}

fn least_squares_qr(rows: &[[f64; 3]], y: &[f64]) -> Result<[f64; 3]> {
    const REL_TOL: f64 = 1e-9;
    let n = rows.len();
    let mut q: Vec<Vec<f64>> = (0..3).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let mut r = [[0.0f64; 3]; 3];
    for j in 0..3 {
        let original_norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..j {
            let dot: f64 = (0..n).map(|k| q[i][k] * q[j][k]).sum();
            r[i][j] = dot;
            for k in 0..n {
                q[j][k] -= dot * q[i][k];
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if original_norm == 0.0 || norm <= REL_TOL * original_norm {
            return Err(Error::RankDeficient { coefficient: COEFFICIENT_NAMES[j] });
        }
        r[j][j] = norm;
        for v in q[j].iter_mut() {
            *v /= norm;
        }
    }
    let qty: Vec<f64> = (0..3).map(|j| (0..n).map(|k| q[j][k] * y[k]).sum()).collect();
    let mut coef = [0.0; 3];
    for j in (0..3).rev() {
        let mut acc = qty[j];
        for i in j + 1..3 {
            acc -= r[j][i] * coef[i];
        }
        coef[j] = acc / r[j][j];
    }
    Ok(coef)
}

/// Mean squared one-step velocity-rate error of `model` on `trajs`.
pub fn one_step_mse(model: &NominalModel, trajs: &[Trajectory]) -> f64 {
    let (rows, y) = regression_rows(trajs, model.dt);
    let c = model.coefficients();
    let n = rows.len().max(1) as f64;
    rows.iter()
        .zip(&y)
        .map(|(r, t)| {
            let e = t - (c[0] * r[0] + c[1] * r[1] + c[2] * r[2]);
            e * e
        })
        .sum::<f64>()
        / n
}

/// Plain gradient descent on the one-step loss using only `shifted_trajs`.
pub fn finetune_nominal_model(
    model: &NominalModel,
    shifted_trajs: &[Trajectory],
    steps: usize,
    lr: f64,
) -> Result<NominalModel> {
    if steps == 0 {
        return Err(Error::invalid("fine-tuning needs steps >= 1"));
    }
    let (rows, y) = regression_rows(shifted_trajs, model.dt);
    if rows.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one transition"));
    }
    let n = rows.len() as f64;
    let mut c = model.coefficients();
    for it in 0..steps {
        let mut grad = [0.0; 3];
        let mut loss = 0.0;
        for (r, t) in rows.iter().zip(&y) {
            let e = t - (c[0] * r[0] + c[1] * r[1] + c[2] * r[2]);
            loss += e * e;
            for j in 0..3 {
                grad[j] -= 2.0 * e * r[j];
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss diverged at step {it} (lr {lr})")));
        }
        for j in 0..3 {
            c[j] -= lr * grad[j] / n;
        }
    }
    NominalModel::from_coefficients(c, model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub n_candidates: usize,
    pub plan_horizon: usize,
    pub action_smoothing: f64,
    pub seed_offset: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { n_candidates: 128, plan_horizon: 12, action_smoothing: 0.5, seed_offset: 0 }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 || self.plan_horizon == 0 {
            return Err(Error::config("planner needs n_candidates >= 1 and plan_horizon >= 1"));
        }
        if !(0.0..1.0).contains(&self.action_smoothing) {
            return Err(Error::config("action_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Draws one candidate sequence: i.i.d. `U(-1, 1)` passed through a
/// zero-initialized exponential filter.
pub fn sample_candidate(cfg: &PlannerConfig, rng: &mut RngStream) -> Vec<Action> {
    let s = cfg.action_smoothing;
    let mut prev = 0.0;
    (0..cfg.plan_horizon)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            prev = s * prev + (1.0 - s) * u;
            prev
        })
        .collect()
}

/// Predicted cumulative reward of an action sequence under `model`.
pub fn rollout_value(model: &NominalModel, state: &EnvState, seq: &[Action], profile: &TargetProfile) -> f64 {
    let mut s = *state;
    let mut total = 0.0;
    for &a in seq {
        let (next, r) = model.predict(&s, a, profile);
        total += r;
        s = next;
    }
    total
}

/// Index of the highest-value candidate; the earliest wins ties.
pub fn best_candidate(model: &NominalModel, state: &EnvState, candidates: &[Vec<Action>], profile: &TargetProfile) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, seq) in candidates.iter().enumerate() {
        let value = rollout_value(model, state, seq, profile);
        if value > best.1 {
            best = (i, value);
        }
    }
    best
}

pub fn plan_action(
    model: &NominalModel,
    state: &EnvState,
    cfg: &PlannerConfig,
    profile: &TargetProfile,
    rng: &mut RngStream,
) -> Action {
    let candidates: Vec<Vec<Action>> = (0..cfg.n_candidates).map(|_| sample_candidate(cfg, rng)).collect();
    let (idx, _) = best_candidate(model, state, &candidates, profile);
    candidates[idx][0].clamp(-1.0, 1.0)
}

/// The baseline controller: plan from the true state every step.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub model: NominalModel,
    pub cfg: PlannerConfig,
}

impl MpcController {
    pub fn new(model: NominalModel, cfg: PlannerConfig) -> Self {
        Self { model, cfg }
    }

    pub fn base_action(&self, ctx: &mut StepContext<'_>) -> Action {
        plan_action(&self.model, ctx.state, &self.cfg, ctx.profile, &mut ctx.rngs.planner)
    }
}

impl Controller for MpcController {
    fn act(&mut self, ctx: &mut StepContext<'_>) -> Result<Decision> {
        Ok(Decision::plain(self.base_action(ctx)))
    }
}

/// Uniform random excitation, used to collect identification data.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomController;

impl Controller for RandomController {
    fn act(&mut self, ctx: &mut StepContext<'_>) -> Result<Decision> {
        Ok(Decision::plain(ctx.rngs.explore.random_range(-1.0..=1.0)))
    }
}

/// Baseline plus a block-constant exploration offset. The recorded base
/// action is the planner's; the applied action carries the offset.
#[derive(Debug, Clone)]
pub struct ExploringController {
    pub inner: MpcController,
    pub offset_scale: f64,
    pub block_len: usize,
    offset: f64,
}

impl ExploringController {
    pub fn new(inner: MpcController, offset_scale: f64, block_len: usize) -> Self {
        Self { inner, offset_scale, block_len: block_len.max(1), offset: 0.0 }
    }
}

impl Controller for ExploringController {
    fn act(&mut self, ctx: &mut StepContext<'_>) -> Result<Decision> {
        if ctx.state.t % self.block_len == 0 {
            self.offset = if self.offset_scale > 0.0 {
                ctx.rngs.explore.random_range(-self.offset_scale..=self.offset_scale)
            } else {
                0.0
            };
        }
        let base = self.inner.base_action(ctx);
        Ok(Decision { action: (base + self.offset).clamp(-1.0, 1.0), base_action: base, route: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, InitSpec, ObsMap, ShiftSpec};
    use crate::rng::{self, Purpose};

    fn env_with(shift: ShiftSpec, noise: f64) -> Env {
        let base = EnvParams { obs_noise_std: noise.max(1e-12), ..EnvParams::default() };
        let map = ObsMap::generate(0, base.obs_dim, 1.0, 1.0);
        Env::new(&base, shift, TargetProfile::default(), map, InitSpec::default()).unwrap()
    }

    #[test]
    fn exact_identification_on_noiseless_data() {
        let env = env_with(ShiftSpec::ID, 0.0);
        let trajs: Vec<_> = (0..3).map(|s| env.run_episode(&mut RandomController, s).unwrap()).collect();
        let truth = NominalModel::from_params(&env.params);
        let fit = fit_nominal_model(&trajs, &truth).unwrap();
        for (a, b) in fit.coefficients().iter().zip(truth.coefficients()) {
            assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((fit.mass_hat - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_velocity_is_rank_deficient() {
        let mut traj = env_with(ShiftSpec::ID, 0.0).run_episode(&mut RandomController, 0).unwrap();
        for (i, s) in traj.states.iter_mut().enumerate() {
            *s = EnvState { x: 0.1 * i as f64, v: 2.0, t: i };
        }
        for a in traj.actions.iter_mut() {
            *a = 0.3;
        }
        let err = fit_nominal_model(&[traj], &NominalModel::from_params(&EnvParams::default())).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { coefficient: "drag/mass" }), "{err}");
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let env = env_with(ShiftSpec::mass(5.0), 0.0);
        let trajs = vec![env.run_episode(&mut RandomController, 1).unwrap()];
        let model = NominalModel::from_params(&EnvParams::default());
        let tuned = finetune_nominal_model(&model, &trajs, 10, 0.0).unwrap();
        for (a, b) in tuned.coefficients().iter().zip(model.coefficients()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn single_candidate_is_returned() {
        let cfg = PlannerConfig { n_candidates: 1, ..PlannerConfig::default() };
        let model = NominalModel::from_params(&EnvParams::default());
        let state = EnvState::new(0.0, 0.0);
        let profile = TargetProfile::default();
        let mut a = rng::stream(9, Purpose::Planner);
        let mut b = rng::stream(9, Purpose::Planner);
        let expected = sample_candidate(&cfg, &mut b)[0];
        assert_eq!(plan_action(&model, &state, &cfg, &profile, &mut a), expected);
    }

    #[test]
    fn model_text_roundtrip() {
        let m = NominalModel::from_params(&EnvParams::default());
        let back = NominalModel::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
    }
}
