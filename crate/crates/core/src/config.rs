//! Experiment configuration, loaded from TOML. Every field has a default, so
//! an empty file describes the reference experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::PlannerConfig;
use crate::env::{EnvParams, InitSpec, ShiftFamily, ShiftSpec, TargetProfile};
use crate::error::{Error, Result};
use crate::expert::{GatingMode, TrainConfig};

/// Seed offset between consecutive labels of a collection set.
pub const LABEL_SEED_STRIDE: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub env: EnvParams,
    pub profile: TargetProfile,
    pub init: InitSpec,
    pub obs_map: ObsMapConfig,
    pub planner: PlannerConfig,
    pub baseline: BaselineConfig,
    pub shifts: ShiftsConfig,
    pub collect: CollectConfig,
    pub encoder: EncoderConfig,
    pub routing: RoutingConfig,
    pub mining: MiningConfig,
    pub expert: TrainConfig,
    pub finetune: FinetuneConfig,
    pub evaluation: EvaluationConfig,
    pub bootstrap: BootstrapConfig,
    pub detect: DetectConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            env: EnvParams::default(),
            profile: TargetProfile::default(),
            init: InitSpec::default(),
            obs_map: ObsMapConfig::default(),
            planner: PlannerConfig::default(),
            baseline: BaselineConfig::default(),
            shifts: ShiftsConfig::default(),
            collect: CollectConfig::default(),
            encoder: EncoderConfig::default(),
            routing: RoutingConfig::default(),
            mining: MiningConfig::default(),
            expert: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            evaluation: EvaluationConfig::default(),
            bootstrap: BootstrapConfig::default(),
            detect: DetectConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObsMapConfig {
    pub seed: u64,
    pub x_scale: f64,
    pub v_scale: f64,
}

impl Default for ObsMapConfig {
    fn default() -> Self {
        Self { seed: 0, x_scale: 0.1, v_scale: 3.0 }
    }
}

/// Identification of the nominal model from random-excitation ID episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub id_episodes: usize,
    pub seed_base: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { id_episodes: 8, seed_base: 1_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftsConfig {
    /// Shift families that get a cluster and an expert.
    pub known: Vec<ShiftSpec>,
    /// Shifts evaluated with a dedicated expert under ID-vs-shift routing,
    /// for the suitability study.
    pub suitability: Vec<ShiftSpec>,
    /// Shifts never used for fitting; only for detection and geometry.
    pub novel: Vec<ShiftSpec>,
}

impl Default for ShiftsConfig {
    fn default() -> Self {
        Self {
            known: vec![ShiftSpec::mass(3.0), ShiftSpec::mass(5.0)],
            suitability: vec![ShiftSpec { family: ShiftFamily::Gear, factor: 0.3 }],
            novel: vec![ShiftSpec::mass(4.0), ShiftSpec::mass(6.0), ShiftSpec::mass(8.0)],
        }
    }
}

impl ShiftsConfig {
    pub fn all(&self) -> impl Iterator<Item = &ShiftSpec> {
        self.known.iter().chain(&self.suitability).chain(&self.novel)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Episodes per cluster used for the encoder, centroids and mining.
    pub episodes: usize,
    /// Plain baseline episodes per label held out for detection and geometry.
    pub probe_episodes: usize,
    pub explore_scale: f64,
    pub explore_block: usize,
    pub seed_base: u64,
    pub probe_seed_base: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            episodes: 30,
            probe_episodes: 20,
            explore_scale: 0.5,
            explore_block: 25,
            seed_base: 300_000,
            probe_seed_base: 400_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub window: usize,
    pub feature_dim: usize,
    pub pca_dim: usize,
    pub featurizer_seed: u64,
    pub gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { window: 3, feature_dim: 128, pca_dim: 16, featurizer_seed: 0, gain: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub id_bias: f64,
    pub gating: GatingMode,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self { id_bias: 1.0, gating: GatingMode::Indexed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub contrast_quantile: f64,
    pub segment_len: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { contrast_quantile: 0.7, segment_len: 25 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBlock {
    pub base: u64,
    pub count: usize,
}

impl SeedBlock {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.count as u64).map(|i| self.base + i).collect()
    }

    fn overlaps(&self, other: &SeedBlock) -> bool {
        if self.count == 0 || other.count == 0 {
            return false;
        }
        let (a0, a1) = (self.base, self.base + self.count as u64);
        let (b0, b1) = (other.base, other.base + other.count as u64);
        a0 < b1 && b0 < a1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub first: SeedBlock,
    /// A count of zero disables the second-encounter evaluation.
    pub second: SeedBlock,
    /// Run the necessity ablations (fine-tuning, global, coarse, random, 5x-only).
    pub ablations: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            first: SeedBlock { base: 109_000, count: 30 },
            second: SeedBlock { base: 200_000, count: 30 },
            ablations: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 10_000, seed: 42 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub target_fpr: f64,
    /// Cap on reference points per detector fit (deterministic stride).
    pub max_fit_points: usize,
    /// Cap on scored points per subset (deterministic stride).
    pub max_eval_points: usize,
    pub seed: u64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { target_fpr: 0.05, max_fit_points: 2000, max_eval_points: 2000, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Suitability requires the baseline mean below this fraction of ID.
    pub degradation_frac: f64,
    pub top_ks_dims: usize,
    pub pca2d_points_per_label: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { degradation_frac: 0.75, top_ks_dims: 3, pca2d_points_per_label: 400 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Hash of the canonical TOML serialization, excluding the output
    /// directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    /// Labels of the collection sets, in seed-offset order: ID, then known
    /// and suitability shifts.
    pub fn train_shifts(&self) -> Vec<ShiftSpec> {
        std::iter::once(ShiftSpec::ID).chain(self.shifts.known.iter().chain(&self.shifts.suitability).copied()).collect()
    }

    /// Labels of the held-out probe sets: every label, novel ones last.
    pub fn probe_shifts(&self) -> Vec<ShiftSpec> {
        std::iter::once(ShiftSpec::ID).chain(self.shifts.all().copied()).collect()
    }

    /// Reserved seed ranges `(purpose, first, last)`. Collection and probe
    /// sets give each label its own stride of [`LABEL_SEED_STRIDE`] seeds.
    pub fn seed_ranges(&self) -> Vec<(String, u64, u64)> {
        let span = |base: u64, n: usize| (base, base + n.max(1) as u64 - 1);
        let per_label = |base: u64, labels: usize, n: usize| {
            (base, base + (labels.max(1) as u64 - 1) * LABEL_SEED_STRIDE + n.max(1) as u64 - 1)
        };
        let mut out = vec![
            ("baseline_identification".to_string(), span(self.baseline.seed_base, self.baseline.id_episodes)),
            ("collect".to_string(), per_label(self.collect.seed_base, self.train_shifts().len(), self.collect.episodes)),
            ("probe".to_string(), per_label(self.collect.probe_seed_base, self.probe_shifts().len(), self.collect.probe_episodes)),
            ("evaluation_first".to_string(), span(self.evaluation.first.base, self.evaluation.first.count)),
        ];
        if self.evaluation.second.count > 0 {
            out.push(("evaluation_second".to_string(), span(self.evaluation.second.base, self.evaluation.second.count)));
        }
        out.into_iter().map(|(k, (a, b))| (k, a, b)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.profile.validate()?;
        self.planner.validate()?;
        self.expert.validate()?;
        for s in self.shifts.all() {
            s.validate()?;
            if s.family == ShiftFamily::Id {
                return Err(Error::config("shift lists must not contain the id shift"));
            }
        }
        let mut labels: Vec<String> = self.shifts.all().map(ShiftSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("shift labels must be unique across known, suitability and novel lists"));
        }
        if self.evaluation.first.count < 2 || self.evaluation.second.count == 1 {
            return Err(Error::config("the first seed block needs at least two seeds; the second needs zero or at least two"));
        }
        if self.evaluation.first.overlaps(&self.evaluation.second) {
            return Err(Error::config("evaluation seed blocks overlap"));
        }
        if self.collect.episodes < 2 || self.collect.probe_episodes < 2 {
            return Err(Error::config("collection needs at least two episodes per label"));
        }
        if self.baseline.id_episodes == 0 {
            return Err(Error::config("baseline identification needs at least one episode"));
        }
        if self.encoder.window == 0 || self.encoder.pca_dim == 0 || self.encoder.pca_dim > self.encoder.feature_dim {
            return Err(Error::config("encoder needs window >= 1 and 1 <= pca_dim <= feature_dim"));
        }
        if !(self.mining.contrast_quantile >= 0.0 && self.mining.contrast_quantile < 1.0) || self.mining.segment_len == 0 {
            return Err(Error::config("mining needs contrast_quantile in [0, 1) and segment_len >= 1"));
        }
        if !(self.detect.target_fpr > 0.0 && self.detect.target_fpr < 1.0) {
            return Err(Error::config("target_fpr must lie in (0, 1)"));
        }
        if !(self.routing.id_bias.is_finite() && self.routing.id_bias > 0.0) {
            return Err(Error::config("id_bias must be > 0"));
        }
        if self.bootstrap.resamples == 0 {
            return Err(Error::config("bootstrap needs at least one resample"));
        }
        Ok(())
    }
}
