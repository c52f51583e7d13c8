//! Seedable 1-D cart plant with periodic terrain and multiplicative shift
//! families.
//!
//! The plant integrates
//! `v' = v + dt (gear a - friction v - mass gravity sin(x) - damping v) / mass`,
//! `x' = x + dt v'` and rewards tracking of a piecewise-constant velocity
//! profile. The terrain load is the body's weight, so a heavier body both
//! responds more slowly to the actuator and needs more thrust on a slope.
//! Observations are a fixed random sinusoidal lift of `(x, v)` plus Gaussian
//! noise, standing in for rendered frames.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, EpisodeRngs, Purpose, RngStream};

/// Scalar actuator command in `[-1, 1]`.
pub type Action = f64;

/// Physical parameters of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub mass: f64,
    pub gravity: f64,
    pub gear: f64,
    pub friction: f64,
    pub damping: f64,
    pub dt: f64,
    pub horizon: usize,
    pub obs_dim: usize,
    pub obs_noise_std: f64,
}

impl Default for EnvParams {
    /// Tuned nominal plant. Gear and gravity were chosen so that the capped
    /// planner tracks the profile in-distribution while heavy variants lag
    /// through whole segments and a weak actuator stalls on the terrain.
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 0.25,
            gear: 1.4,
            friction: 0.1,
            damping: 0.05,
            dt: 0.05,
            horizon: 200,
            obs_dim: 32,
            obs_noise_std: 0.01,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("mass", self.mass), ("gear", self.gear)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!("{name} must be finite and > 0, got {value}")));
            }
        }
        let non_negative = [
            ("gravity", self.gravity),
            ("friction", self.friction),
            ("damping", self.damping),
            ("obs_noise_std", self.obs_noise_std),
        ];
        for (name, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {value}")));
            }
        }
        if !(self.dt > 0.0 && self.dt < 1.0) {
            return Err(Error::config(format!("dt must lie in (0, 1), got {}", self.dt)));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        if self.obs_dim == 0 {
            return Err(Error::config("obs_dim must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftFamily {
    Id,
    #[serde(alias = "mass")]
    TorsoMass,
    Gravity,
    Gear,
    Friction,
    Damping,
}

impl ShiftFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftFamily::Id => "id",
            ShiftFamily::TorsoMass => "torso_mass",
            ShiftFamily::Gravity => "gravity",
            ShiftFamily::Gear => "gear",
            ShiftFamily::Friction => "friction",
            ShiftFamily::Damping => "damping",
        }
    }

    fn short(&self) -> &'static str {
        match self {
            ShiftFamily::Id => "id",
            ShiftFamily::TorsoMass => "mass",
            ShiftFamily::Gravity => "gravity",
            ShiftFamily::Gear => "gear",
            ShiftFamily::Friction => "friction",
            ShiftFamily::Damping => "damping",
        }
    }
}

impl std::str::FromStr for ShiftFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(ShiftFamily::Id),
            "torso_mass" | "mass" => Ok(ShiftFamily::TorsoMass),
            "gravity" => Ok(ShiftFamily::Gravity),
            "gear" => Ok(ShiftFamily::Gear),
            "friction" => Ok(ShiftFamily::Friction),
            "damping" => Ok(ShiftFamily::Damping),
            other => Err(Error::config(format!("unknown shift family `{other}`"))),
        }
    }
}

/// A multiplicative perturbation of one plant parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub family: ShiftFamily,
    pub factor: f64,
}

impl ShiftSpec {
    pub const ID: ShiftSpec = ShiftSpec { family: ShiftFamily::Id, factor: 1.0 };

    pub fn new(family: ShiftFamily, factor: f64) -> Result<Self> {
        let spec = Self { family, factor };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mass(factor: f64) -> Self {
        Self { family: ShiftFamily::TorsoMass, factor }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor.is_finite() && self.factor > 0.0) {
            return Err(Error::config(format!("shift factor must be > 0, got {}", self.factor)));
        }
        if self.family == ShiftFamily::Id && self.factor != 1.0 {
            return Err(Error::config("the id shift must have factor 1"));
        }
        Ok(())
    }

    /// Stable label used for cluster ids and file names, e.g. `mass_x5`,
    /// `gear_x0.3`.
    pub fn label(&self) -> String {
        match self.family {
            ShiftFamily::Id => "ID".to_string(),
            fam => format!("{}_x{}", fam.short(), self.factor),
        }
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

pub fn apply_shift(base: &EnvParams, spec: &ShiftSpec) -> Result<EnvParams> {
    base.validate()?;
    spec.validate()?;
    let mut out = *base;
    match spec.family {
        ShiftFamily::Id => {}
        ShiftFamily::TorsoMass => out.mass *= spec.factor,
        ShiftFamily::Gravity => out.gravity *= spec.factor,
        ShiftFamily::Gear => out.gear *= spec.factor,
        ShiftFamily::Friction => out.friction *= spec.factor,
        ShiftFamily::Damping => out.damping *= spec.factor,
    }
    Ok(out)
}

/// Piecewise-constant velocity reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetProfile {
    pub segment_len: usize,
    pub targets: Vec<f64>,
}

impl Default for TargetProfile {
    fn default() -> Self {
        Self { segment_len: 50, targets: vec![0.3, 0.6, 0.3, 0.5] }
    }
}

impl TargetProfile {
    /// Target at step `t`; steps past the last segment hold its value.
    pub fn at(&self, t: usize) -> f64 {
        let idx = (t / self.segment_len.max(1)).min(self.targets.len().saturating_sub(1));
        self.targets.get(idx).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 || self.targets.is_empty() {
            return Err(Error::config("target profile needs segment_len >= 1 and at least one target"));
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("target profile values must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub x: f64,
    pub v: f64,
    pub t: usize,
}

impl EnvState {
    pub fn new(x: f64, v: f64) -> Self {
        Self { x, v, t: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    /// The commanded action was outside `[-1, 1]` and has been clamped.
    pub clamped: bool,
}

/// Advances the plant by one step. Out-of-range actions are clamped and
/// flagged, never rejected.
pub fn step(state: &EnvState, action: Action, params: &EnvParams, profile: &TargetProfile) -> StepOutcome {
    let a = action.clamp(-1.0, 1.0);
    let clamped = a != action;
    let (x, v) = (state.x, state.v);
    let force = params.gear * a - params.friction * v - params.mass * params.gravity * x.sin() - params.damping * v;
    let v_next = v + params.dt * force / params.mass;
    let x_next = x + params.dt * v_next;
    let reward = (1.0 - (v_next - profile.at(state.t)).abs()).clamp(0.0, 1.0);
    StepOutcome { state: EnvState { x: x_next, v: v_next, t: state.t + 1 }, reward, clamped }
}

/// Fixed lift `sin(W [x, v, 1] + b)` from plant state to observation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsMap {
    /// Row-major `obs_dim x 3`.
    pub weights: Vec<[f64; 3]>,
    pub bias: Vec<f64>,
}

impl ObsMap {
    /// Draws the constants from `seed`. Position and velocity columns use
    /// separate scales; the constant column is folded into `bias`.
    pub fn generate(seed: u64, obs_dim: usize, x_scale: f64, v_scale: f64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Constants);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut weights = Vec::with_capacity(obs_dim);
        let mut bias = Vec::with_capacity(obs_dim);
        for _ in 0..obs_dim {
            let wx = x_scale * normal.sample(&mut rng);
            let wv = v_scale * normal.sample(&mut rng);
            weights.push([wx, wv, 0.0]);
            bias.push(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        }
        Self { weights, bias }
    }

    pub fn zeros(obs_dim: usize) -> Self {
        Self { weights: vec![[0.0; 3]; obs_dim], bias: vec![0.0; obs_dim] }
    }

    pub fn obs_dim(&self) -> usize {
        self.bias.len()
    }
}

/// Noisy observation of `state`. `rng` is the episode's observation-noise
/// stream; with zero noise it is left untouched.
pub fn observe(state: &EnvState, params: &EnvParams, map: &ObsMap, rng: &mut RngStream) -> Observation {
    let noise = if params.obs_noise_std > 0.0 {
        Some(Normal::new(0.0, params.obs_noise_std).expect("positive std"))
    } else {
        None
    };
    let values = map
        .weights
        .iter()
        .zip(&map.bias)
        .map(|(w, b)| {
            let clean = (w[0] * state.x + w[1] * state.v + w[2] + b).sin();
            match &noise {
                Some(n) => clean + n.sample(rng),
                None => clean,
            }
        })
        .collect();
    Observation(values)
}

/// What a controller sees before acting.
pub struct StepContext<'a> {
    pub state: &'a EnvState,
    /// Observations recorded so far, the current one last.
    pub history: &'a [Observation],
    pub profile: &'a TargetProfile,
    pub rngs: &'a mut EpisodeRngs,
}

/// A controller's output for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// Action sent to the plant.
    pub action: Action,
    /// Action the baseline planner proposed before any correction.
    pub base_action: Action,
    /// Routing label when a router was consulted.
    pub route: Option<String>,
}

impl Decision {
    pub fn plain(action: Action) -> Self {
        Self { action, base_action: action, route: None }
    }
}

pub trait Controller {
    fn act(&mut self, ctx: &mut StepContext<'_>) -> Result<Decision>;
}

impl<F> Controller for F
where
    F: FnMut(&mut StepContext<'_>) -> Result<Decision>,
{
    fn act(&mut self, ctx: &mut StepContext<'_>) -> Result<Decision> {
        self(ctx)
    }
}

/// Initial-state distribution: `x0 ~ U(center - spread, center + spread)`,
/// fixed `v0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub x_center: f64,
    pub x_spread: f64,
    /// Initial velocity. Starting moving, away from the origin, keeps the
    /// in-distribution start-up transient from resembling a heavy body.
    #[serde(default)]
    pub v0: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { x_center: 1.0, x_spread: 0.05, v0: 0.3 }
    }
}

/// Plant parameters plus everything else needed to run an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub params: EnvParams,
    pub shift: ShiftSpec,
    pub profile: TargetProfile,
    pub obs_map: ObsMap,
    pub init: InitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub shift: ShiftSpec,
    /// Plant state before each action, plus the terminal state.
    pub states: Vec<EnvState>,
    /// One observation per action, recorded before it.
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub base_actions: Vec<Action>,
    pub rewards: Vec<f64>,
    /// Per-step routing label; empty when no router was used.
    pub routes: Vec<String>,
    pub clamped_steps: usize,
    pub episode_return: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks the record's structural invariants.
    pub fn check(&self) -> Result<()> {
        let n = self.actions.len();
        if self.observations.len() != n
            || self.base_actions.len() != n
            || self.rewards.len() != n
            || self.states.len() != n + 1
            || !(self.routes.is_empty() || self.routes.len() == n)
        {
            return Err(Error::invalid("trajectory arrays have inconsistent lengths"));
        }
        if self.rewards.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("reward outside [0, 1]"));
        }
        let sum: f64 = self.rewards.iter().sum();
        if (sum - self.episode_return).abs() > 1e-9 {
            return Err(Error::invalid("episode_return does not equal the reward sum"));
        }
        Ok(())
    }
}

impl Env {
    pub fn new(base: &EnvParams, shift: ShiftSpec, profile: TargetProfile, obs_map: ObsMap, init: InitSpec) -> Result<Self> {
        let params = apply_shift(base, &shift)?;
        profile.validate()?;
        if obs_map.obs_dim() != params.obs_dim {
            return Err(Error::config(format!(
                "observation map has {} rows but obs_dim is {}",
                obs_map.obs_dim(),
                params.obs_dim
            )));
        }
        Ok(Self { params, shift, profile, obs_map, init })
    }

    pub fn initial_state(&self, rng: &mut RngStream) -> EnvState {
        let x = if self.init.x_spread > 0.0 {
            self.init.x_center + rng.random_range(-self.init.x_spread..=self.init.x_spread)
        } else {
            self.init.x_center
        };
        EnvState::new(x, self.init.v0)
    }

    /// Runs one full episode. All randomness comes from streams derived from
    /// `seed`, so the result depends only on `(self, controller, seed)`.
    pub fn run_episode(&self, controller: &mut dyn Controller, seed: u64) -> Result<Trajectory> {
        let mut rngs = EpisodeRngs::new(seed);
        let horizon = self.params.horizon;
        let mut state = self.initial_state(&mut rngs.init_state);
        let mut states = Vec::with_capacity(horizon + 1);
        let mut observations = Vec::with_capacity(horizon);
        let mut actions = Vec::with_capacity(horizon);
        let mut base_actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut routes = Vec::new();
        let mut clamped_steps = 0;

        for t in 0..horizon {
            states.push(state);
            observations.push(observe(&state, &self.params, &self.obs_map, &mut rngs.obs_noise));
            let decision = {
                let mut ctx = StepContext {
                    state: &state,
                    history: &observations,
                    profile: &self.profile,
                    rngs: &mut rngs,
                };
                controller.act(&mut ctx)?
            };
            if !decision.action.is_finite() || !decision.base_action.is_finite() {
                return Err(Error::NonFinite(format!(
                    "controller returned a non-finite action at step {t} (seed {seed}, shift {})",
                    self.shift
                )));
            }
            if let Some(route) = decision.route {
                routes.push(route);
            }
            let out = step(&state, decision.action, &self.params, &self.profile);
            if out.clamped {
                clamped_steps += 1;
            }
            actions.push(decision.action.clamp(-1.0, 1.0));
            base_actions.push(decision.base_action);
            rewards.push(out.reward);
            state = out.state;
        }
        states.push(state);
        if !routes.is_empty() && routes.len() != horizon {
            return Err(Error::Routing("controller reported routes for only some steps".into()));
        }
        let episode_return = rewards.iter().sum();
        Ok(Trajectory {
            seed,
            shift: self.shift,
            states,
            observations,
            actions,
            base_actions,
            rewards,
            routes,
            clamped_steps,
            episode_return,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    record: String,
    seed: u64,
    shift: ShiftSpec,
    steps: usize,
    episode_return: f64,
    clamped_steps: usize,
    final_state: EnvState,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: usize,
    x: f64,
    v: f64,
    obs: Vec<f64>,
    action: f64,
    base_action: f64,
    reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    route: Option<String>,
}

/// Writes an episode as one header line followed by one JSON object per step.
pub fn write_trajectory<W: Write>(w: &mut W, traj: &Trajectory) -> Result<()> {
    let header = EpisodeHeader {
        record: "episode".into(),
        seed: traj.seed,
        shift: traj.shift,
        steps: traj.len(),
        episode_return: traj.episode_return,
        clamped_steps: traj.clamped_steps,
        final_state: *traj.states.last().ok_or_else(|| Error::invalid("trajectory without states"))?,
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for t in 0..traj.len() {
        let rec = StepRecord {
            t,
            x: traj.states[t].x,
            v: traj.states[t].v,
            obs: traj.observations[t].0.clone(),
            action: traj.actions[t],
            base_action: traj.base_actions[t],
            reward: traj.rewards[t],
            route: traj.routes.get(t).cloned(),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads every episode from a stream produced by [`write_trajectory`].
pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    let mut lines = r.lines();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let header: EpisodeHeader = serde_json::from_str(&line)?;
        if header.record != "episode" {
            return Err(Error::Parse(format!("expected episode header, got `{}`", header.record)));
        }
        let mut traj = Trajectory {
            seed: header.seed,
            shift: header.shift,
            states: Vec::with_capacity(header.steps + 1),
            observations: Vec::with_capacity(header.steps),
            actions: Vec::with_capacity(header.steps),
            base_actions: Vec::with_capacity(header.steps),
            rewards: Vec::with_capacity(header.steps),
            routes: Vec::new(),
            clamped_steps: header.clamped_steps,
            episode_return: header.episode_return,
        };
        for t in 0..header.steps {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("episode {} truncated at step {t}", header.seed)))??;
            let rec: StepRecord = serde_json::from_str(&line)?;
            traj.states.push(EnvState { x: rec.x, v: rec.v, t: rec.t });
            traj.observations.push(Observation(rec.obs));
            traj.actions.push(rec.action);
            traj.base_actions.push(rec.base_action);
            traj.rewards.push(rec.reward);
            if let Some(route) = rec.route {
                traj.routes.push(route);
            }
        }
        traj.states.push(header.final_state);
        traj.check()?;
        out.push(traj);
    }
    Ok(out)
}
