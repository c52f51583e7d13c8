//! Local residual experts.
//!
//! Each shift cluster gets a small perceptron that proposes a bounded
//! correction `Δa = delta_max · tanh(mlp(h, a_base))` on top of the baseline
//! action. Experts are trained from preference pairs `(a⁺, a⁻)` with the hinge
//! objective `max(0, m + |ã − a⁺| − |ã − a⁻|)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{parse_key_values, MpcController};
use crate::encoder::{Embedding, Featurizer, ObsWindow, PcaModel};
use crate::env::{Action, Controller, Decision, StepContext};
use crate::error::{Error, Result};
use crate::evalstats::quantile_sorted;
use crate::indexer::{route, ClusterSet, RoutingDecision, ID_LABEL};
use crate::rng::{self, Purpose, RngStream};

/// The per-step data mining needs from one collected episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningEpisode {
    pub embeddings: Vec<Vec<f64>>,
    pub base_actions: Vec<Action>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
}

impl MiningEpisode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn check(&self) -> Result<()> {
        let n = self.actions.len();
        if self.embeddings.len() != n || self.base_actions.len() != n || self.rewards.len() != n {
            return Err(Error::invalid("mining episode arrays differ in length"));
        }
        Ok(())
    }

    fn context(&self, t: usize) -> Vec<f64> {
        let mut c = self.embeddings[t].clone();
        c.push(self.base_actions[t]);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    /// Embedding of the low-return state followed by its baseline action.
    pub context: Vec<f64>,
    pub a_plus: Action,
    pub a_minus: Action,
    pub contrast: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairs every step of the `low` episodes (restricted to `range`) with its
/// nearest-embedding step among the `high` episodes over the same range.
/// `score` gives the return used for the contrast of each episode.
fn match_low_to_high(
    episodes: &[MiningEpisode],
    low: &[usize],
    high: &[usize],
    range: std::ops::Range<usize>,
    score: &dyn Fn(usize) -> f64,
    out: &mut Vec<PreferencePair>,
) {
    for &li in low {
        let lo = &episodes[li];
        for t in range.clone() {
            let mut best: Option<(f64, usize, usize)> = None;
            for &hi in high {
                let he = &episodes[hi];
                for s in range.clone() {
                    let d = sq_dist(&lo.embeddings[t], &he.embeddings[s]);
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, hi, s));
                    }
                }
            }
            let Some((_, hi, s)) = best else { continue };
            let a_plus = episodes[hi].actions[s];
            let a_minus = lo.actions[t];
            let contrast = score(hi) - score(li);
            if a_plus != a_minus && contrast > 0.0 {
                out.push(PreferencePair { context: lo.context(t), a_plus, a_minus, contrast });
            }
        }
    }
}

fn split_at_median(scores: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let m = median(scores);
    let low = (0..scores.len()).filter(|&i| scores[i] < m).collect();
    let high = (0..scores.len()).filter(|&i| scores[i] > m).collect();
    (low, high)
}

/// Episode-level mining: below-median episodes are matched against
/// above-median ones; the contrast is the episode-return gap.
pub fn mine_pairs_naive(episodes: &[MiningEpisode]) -> Result<Vec<PreferencePair>> {
    if episodes.len() < 2 {
        return Err(Error::invalid("pair mining needs at least two episodes"));
    }
    for e in episodes {
        e.check()?;
    }
    let returns: Vec<f64> = episodes.iter().map(MiningEpisode::episode_return).collect();
    let (low, high) = split_at_median(&returns);
    let mut out = Vec::new();
    for &li in &low {
        // Steps of one low episode are matched across all high episodes, each
        // of which may be of a different length.
        let lo = &episodes[li];
        for t in 0..lo.len() {
            let mut best: Option<(f64, usize, usize)> = None;
            for &hi in &high {
                for (s, h) in episodes[hi].embeddings.iter().enumerate() {
                    let d = sq_dist(&lo.embeddings[t], h);
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, hi, s));
                    }
                }
            }
            let Some((_, hi, s)) = best else { continue };
            let a_plus = episodes[hi].actions[s];
            let a_minus = lo.actions[t];
            if a_plus != a_minus {
                out.push(PreferencePair { context: lo.context(t), a_plus, a_minus, contrast: returns[hi] - returns[li] });
            }
        }
    }
    Ok(out)
}

/// Segment-level candidates: episodes are cut into `segment_len`-step
/// segments and, for each segment index, the below-median segments are
/// matched against the above-median ones. Trailing partial segments are
/// dropped.
pub fn mine_pairs_segments(episodes: &[MiningEpisode], segment_len: usize) -> Result<Vec<PreferencePair>> {
    if episodes.len() < 2 {
        return Err(Error::invalid("pair mining needs at least two episodes"));
    }
    if segment_len == 0 {
        return Err(Error::invalid("segment length must be >= 1"));
    }
    for e in episodes {
        e.check()?;
    }
    let min_len = episodes.iter().map(MiningEpisode::len).min().unwrap_or(0);
    let mut out = Vec::new();
    for j in 0..min_len / segment_len {
        let range = j * segment_len..(j + 1) * segment_len;
        let seg: Vec<f64> = episodes.iter().map(|e| e.rewards[range.clone()].iter().sum()).collect();
        let (low, high) = split_at_median(&seg);
        match_low_to_high(episodes, &low, &high, range, &|i| seg[i], &mut out);
    }
    Ok(out)
}

/// Keeps the segment-level pairs whose contrast is at least the `q`-th
/// quantile (linear interpolation) of all candidate contrasts.
pub fn filter_by_contrast(candidates: Vec<PreferencePair>, q: f64) -> Result<Vec<PreferencePair>> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::invalid(format!("contrast quantile must lie in [0, 1), got {q}")));
    }
    if candidates.is_empty() {
        return Ok(candidates);
    }
    let mut gaps: Vec<f64> = candidates.iter().map(|p| p.contrast).collect();
    gaps.sort_by(f64::total_cmp);
    let threshold = quantile_sorted(&gaps, q);
    Ok(candidates.into_iter().filter(|p| p.contrast >= threshold).collect())
}

pub fn mine_pairs_harder(episodes: &[MiningEpisode], q: f64, segment_len: usize) -> Result<Vec<PreferencePair>> {
    let kept = filter_by_contrast(mine_pairs_segments(episodes, segment_len)?, q)?;
    if kept.is_empty() {
        warn!("harder mining produced no pairs (q = {q}, segment_len = {segment_len})");
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub hidden: usize,
    pub delta_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { margin: 0.2, lr: 1e-2, momentum: 0.9, epochs: 200, batch: 64, seed: 0, hidden: 32, delta_max: 0.5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.lr > 0.0 && self.delta_max > 0.0) {
            return Err(Error::config("margin, lr and delta_max must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch == 0 || self.hidden == 0 {
            return Err(Error::config("batch and hidden must be >= 1"));
        }
        Ok(())
    }
}

/// Two-layer tanh perceptron with a bounded scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub cluster_id: String,
    pub input_dim: usize,
    pub hidden: usize,
    /// Row-major `hidden × input_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub delta_max: f64,
}

impl ExpertParams {
    /// Uniform init in `±1/sqrt(fan_in)` per layer.
    pub fn init(cluster_id: &str, input_dim: usize, hidden: usize, delta_max: f64, rng: &mut RngStream) -> Self {
        let s1 = 1.0 / (input_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = (0..hidden * input_dim).map(|_| rng.random_range(-s1..=s1)).collect();
        let b1 = (0..hidden).map(|_| rng.random_range(-s1..=s1)).collect();
        let w2 = (0..hidden).map(|_| rng.random_range(-s2..=s2)).collect();
        let b2 = rng.random_range(-s2..=s2);
        Self { cluster_id: cluster_id.to_string(), input_dim, hidden, w1, b1, w2, b2, delta_max }
    }

    pub fn n_params(&self) -> usize {
        self.hidden * self.input_dim + 2 * self.hidden + 1
    }

    /// Parameters in the order `w1, b1, w2, b2`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "flat parameter length");
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.hidden);
        let (c, rest) = rest.split_at(self.hidden);
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = rest[0];
    }

    pub fn validate(&self) -> Result<()> {
        if self.w1.len() != self.hidden * self.input_dim || self.b1.len() != self.hidden || self.w2.len() != self.hidden {
            return Err(Error::invalid(format!("expert `{}` has inconsistent shapes", self.cluster_id)));
        }
        if !(self.delta_max.is_finite() && self.delta_max > 0.0) {
            return Err(Error::invalid("delta_max must be > 0"));
        }
        if self.flat().iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("expert `{}` weights", self.cluster_id)));
        }
        Ok(())
    }

    fn hidden_act(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j]).tanh()
            })
            .collect()
    }

    /// Pre-squash output `z`.
    pub fn raw_output(&self, x: &[f64]) -> f64 {
        let h = self.hidden_act(x);
        self.w2.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + self.b2
    }

    /// Bounded correction `delta_max · tanh(z)`.
    pub fn delta(&self, context: &[f64]) -> Result<f64> {
        if context.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "expert `{}` expects {} inputs, got {}",
                self.cluster_id,
                self.input_dim,
                context.len()
            )));
        }
        Ok(self.delta_max * self.raw_output(context).tanh())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# residual expert v1\n");
        let _ = writeln!(s, "cluster_id = {}", self.cluster_id);
        let _ = writeln!(s, "input_dim = {}", self.input_dim);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "delta_max = {:?}", self.delta_max);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "w1 = {}", join(&self.w1));
        let _ = writeln!(s, "b1 = {}", join(&self.b1));
        let _ = writeln!(s, "w2 = {}", join(&self.w2));
        let _ = writeln!(s, "b2 = {:?}", self.b2);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Parse(format!("expert file is missing `{k}`")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|e| Error::Parse(format!("`{k}`: {e}"))) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|e| Error::Parse(format!("`{k}`: {e}"))) };
        let vec = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| Error::Parse(format!("`{k}`: {e}"))))
                .collect()
        };
        let p = Self {
            cluster_id: get("cluster_id")?.clone(),
            input_dim: int("input_dim")?,
            hidden: int("hidden")?,
            w1: vec("w1")?,
            b1: vec("b1")?,
            w2: vec("w2")?,
            b2: num("b2")?,
            delta_max: num("delta_max")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// `ã = a_base + Δa` for a pair context (the last context entry is `a_base`).
pub fn corrected_action(expert: &ExpertParams, context: &[f64]) -> Result<f64> {
    let a_base = *context.last().ok_or_else(|| Error::invalid("empty pair context"))?;
    Ok(a_base + expert.delta(context)?)
}

pub fn pref_loss(expert: &ExpertParams, pair: &PreferencePair, m: f64) -> Result<f64> {
    let a = corrected_action(expert, &pair.context)?;
    Ok((m + (a - pair.a_plus).abs() - (a - pair.a_minus).abs()).max(0.0))
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Analytic gradient of [`pref_loss`] in [`ExpertParams::flat`] order. The
/// subgradient at the hinge kink and at `|·|` kinks is 0.
pub fn pref_loss_grad(expert: &ExpertParams, pair: &PreferencePair, m: f64) -> Result<(f64, Vec<f64>)> {
    let x = &pair.context;
    if x.len() != expert.input_dim {
        return Err(Error::invalid("pair context does not match expert input size"));
    }
    let h = expert.hidden_act(x);
    let z = expert.w2.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + expert.b2;
    let tz = z.tanh();
    let a = x[x.len() - 1] + expert.delta_max * tz;
    let margin_term = m + (a - pair.a_plus).abs() - (a - pair.a_minus).abs();
    let mut grad = vec![0.0; expert.n_params()];
    if margin_term <= 0.0 {
        return Ok((0.0, grad));
    }
    let dl_da = sign0(a - pair.a_plus) - sign0(a - pair.a_minus);
    let dl_dz = dl_da * expert.delta_max * (1.0 - tz * tz);
    let n1 = expert.w1.len();
    let hd = expert.hidden;
    for j in 0..hd {
        let dl_dpre = dl_dz * expert.w2[j] * (1.0 - h[j] * h[j]);
        for (i, xi) in x.iter().enumerate() {
            grad[j * expert.input_dim + i] = dl_dpre * xi;
        }
        grad[n1 + j] = dl_dpre;
        grad[n1 + hd + j] = dl_dz * h[j];
    }
    grad[n1 + 2 * hd] = dl_dz;
    Ok((margin_term, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub expert: ExpertParams,
    /// Mean pair loss of each epoch, measured while iterating.
    pub loss_curve: Vec<f64>,
}

/// Minibatch gradient descent with heavy-ball momentum; deterministic in
/// `(pairs, cfg)`.
pub fn train_expert(pairs: &[PreferencePair], cluster_id: &str, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let first = pairs.first().ok_or_else(|| Error::invalid(format!("no preference pairs for `{cluster_id}`")))?;
    let input_dim = first.context.len();
    if pairs.iter().any(|p| p.context.len() != input_dim) {
        return Err(Error::invalid("preference pair contexts differ in length"));
    }
    let mut rng = rng::stream(cfg.seed, Purpose::Training);
    let mut expert = ExpertParams::init(cluster_id, input_dim, cfg.hidden, cfg.delta_max, &mut rng);
    let mut theta = expert.flat();
    let mut velocity = vec![0.0; theta.len()];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut g = vec![0.0; theta.len()];
            for &i in batch {
                let (loss, gi) = pref_loss_grad(&expert, &pairs[i], cfg.margin)?;
                total += loss;
                for (a, b) in g.iter_mut().zip(&gi) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((t, v), gk) in theta.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                *v = cfg.momentum * *v - cfg.lr * gk * scale;
                *t += *v;
            }
            expert.set_flat(&theta);
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("expert `{cluster_id}` training diverged at epoch {epoch}")));
        }
        curve.push(mean);
    }
    Ok(TrainResult { expert, loss_curve: curve })
}

/// Fraction of pairs where the corrected action is strictly closer to `a⁺`.
pub fn preference_accuracy(expert: &ExpertParams, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("preference accuracy needs at least one pair"));
    }
    let mut hits = 0usize;
    for p in pairs {
        let a = corrected_action(expert, &p.context)?;
        if (a - p.a_plus).abs() < (a - p.a_minus).abs() {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn pairs_to_csv(pairs: &[PreferencePair]) -> String {
    let mut s = String::from("a_plus,a_minus,contrast,context\n");
    for p in pairs {
        let ctx = p.context.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "{:?},{:?},{:?},{}", p.a_plus, p.a_minus, p.contrast, ctx);
    }
    s
}

pub fn pairs_from_csv(text: &str) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(4, ',').collect();
        if f.len() != 4 {
            return Err(Error::Parse(format!("pairs line {}: expected 4 fields", i + 1)));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("pairs line {}: {e}", i + 1)));
        let context = f[3].split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
        out.push(PreferencePair { a_plus: num(f[0])?, a_minus: num(f[1])?, contrast: num(f[2])?, context });
    }
    Ok(out)
}

/// `a_base` when routed to ID, otherwise `a_base + Δa` clamped to `[-1, 1]`.
pub fn compose_action(
    a_base: Action,
    decision: &RoutingDecision,
    experts: &BTreeMap<String, ExpertParams>,
    context: &[f64],
) -> Result<Action> {
    if decision.is_id() {
        return Ok(a_base);
    }
    let expert = experts
        .get(&decision.assigned)
        .ok_or_else(|| Error::Routing(format!("routed to `{}` but no expert is loaded for it", decision.assigned)))?;
    Ok((a_base + expert.delta(context)?).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingMode {
    /// Nearest-centroid routing over the frozen embedding.
    #[serde(alias = "jepa")]
    Indexed,
    None,
    Global,
    Coarse,
    Random,
}

impl std::str::FromStr for GatingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indexed" | "jepa" => Ok(GatingMode::Indexed),
            "none" => Ok(GatingMode::None),
            "global" => Ok(GatingMode::Global),
            "coarse" => Ok(GatingMode::Coarse),
            "random" => Ok(GatingMode::Random),
            other => Err(Error::config(format!("unknown gating mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub mode: GatingMode,
    pub clusters: ClusterSet,
    /// Expert used by the global and coarse modes.
    pub designated: Option<String>,
    /// Candidates for random gating.
    pub expert_labels: Vec<String>,
}

impl Gate {
    pub fn new(mode: GatingMode, clusters: ClusterSet, designated: Option<String>, expert_labels: Vec<String>) -> Result<Self> {
        if matches!(mode, GatingMode::Global | GatingMode::Coarse) && designated.is_none() {
            return Err(Error::config(format!("{mode:?} gating needs a designated expert")));
        }
        if mode == GatingMode::Random && expert_labels.is_empty() {
            return Err(Error::config("random gating needs at least one expert"));
        }
        Ok(Self { mode, clusters, designated, expert_labels })
    }

    pub fn gate(&self, h: &Embedding, rng: &mut RngStream) -> Result<RoutingDecision> {
        let designated = || self.designated.clone().expect("checked in Gate::new");
        Ok(match self.mode {
            GatingMode::Indexed => route(h, &self.clusters)?,
            GatingMode::None => RoutingDecision::to_label(ID_LABEL),
            GatingMode::Global => RoutingDecision::to_label(&designated()),
            GatingMode::Coarse => {
                let r = route(h, &self.clusters)?;
                if r.is_id() {
                    r
                } else {
                    RoutingDecision { assigned: designated(), distances: r.distances }
                }
            }
            GatingMode::Random => {
                let i = rng.random_range(0..self.expert_labels.len());
                RoutingDecision::to_label(&self.expert_labels[i])
            }
        })
    }
}

/// Baseline planner plus gated residual experts.
#[derive(Debug, Clone)]
pub struct ExpertController<'a> {
    pub base: MpcController,
    pub featurizer: &'a Featurizer,
    pub pca: &'a PcaModel,
    pub gate: &'a Gate,
    pub experts: &'a BTreeMap<String, ExpertParams>,
}

impl Controller for ExpertController<'_> {
    fn act(&mut self, ctx: &mut StepContext<'_>) -> Result<Decision> {
        let a_base = self.base.base_action(ctx);
        let t = ctx.history.len() - 1;
        let window = ObsWindow::ending_at(ctx.history, t, self.featurizer.window)?;
        let h = self.pca.embed(&self.featurizer.featurize_window(&window)?)?;
        let decision = self.gate.gate(&h, &mut ctx.rngs.gating)?;
        let mut context = h.0;
        context.push(a_base);
        let action = compose_action(a_base, &decision, self.experts, &context)?;
        Ok(Decision { action, base_action: a_base, route: Some(decision.assigned) })
    }
}
