//! Stage orchestration. Every stage reads its inputs from the run directory
//! and writes text artifacts under its own subdirectory, so each stage can be
//! run on its own once its upstream stages are complete.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SeedBlock, LABEL_SEED_STRIDE};
use crate::controller::{
    finetune_nominal_model, fit_nominal_model, one_step_mse, ExploringController, MpcController, NominalModel,
    RandomController, COEFFICIENT_NAMES,
};
use crate::encoder::{fit_pca, project2d, Embedding, Featurizer, PcaModel};
use crate::env::{read_trajectories, write_trajectory, Controller, Env, ObsMap, ShiftSpec, Trajectory};
use crate::error::{Error, Result};
use crate::expert::{
    mine_pairs_harder, mine_pairs_naive, pairs_from_csv, pairs_to_csv, preference_accuracy, train_expert,
    ExpertController, ExpertParams, Gate, GatingMode, MiningEpisode, PreferencePair,
};
use crate::geomdiag::{centroid_cosine_matrix, rank_dims, shift_suitability, spread_ratios, spread_rows_csv};
use crate::indexer::{
    centroid_distance_table, compute_centroid, routing_stats, routing_stats_csv, ClusterEntry, ClusterSet, ID_LABEL,
};
use crate::manifest::{read_artifact, sha256_hex, ArtifactWriter, RunManifest, StageRecord, TOOL_VERSION};
use crate::ooddet::{
    calibrate_threshold, detector_rows_csv, fit_detector, roc_auc, roc_points, tpr_at_threshold, DetectorKind,
    DetectorResult, DetectorRow,
};
use crate::report;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    TrainBaseline,
    Collect,
    FitEncoder,
    BuildCentroids,
    MinePairs,
    TrainExperts,
    Evaluate,
    Detect,
    Diagnose,
    Report,
}

pub const ALL_STAGES: [Stage; 10] = [
    Stage::TrainBaseline,
    Stage::Collect,
    Stage::FitEncoder,
    Stage::BuildCentroids,
    Stage::MinePairs,
    Stage::TrainExperts,
    Stage::Evaluate,
    Stage::Detect,
    Stage::Diagnose,
    Stage::Report,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainBaseline => "train-baseline",
            Stage::Collect => "collect",
            Stage::FitEncoder => "fit-encoder",
            Stage::BuildCentroids => "build-centroids",
            Stage::MinePairs => "mine-pairs",
            Stage::TrainExperts => "train-experts",
            Stage::Evaluate => "evaluate",
            Stage::Detect => "detect",
            Stage::Diagnose => "diagnose",
            Stage::Report => "report",
        }
    }

    /// Artifact subdirectory of the run directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::TrainBaseline => "baseline",
            Stage::Collect => "collect",
            Stage::FitEncoder => "encoder",
            Stage::BuildCentroids => "centroids",
            Stage::MinePairs => "pairs",
            Stage::TrainExperts => "experts",
            Stage::Evaluate => "evaluate",
            Stage::Detect => "detect",
            Stage::Diagnose => "diagnose",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            TrainBaseline => &[],
            Collect => &[TrainBaseline],
            FitEncoder => &[Collect],
            BuildCentroids => &[Collect, FitEncoder],
            MinePairs => &[Collect, FitEncoder],
            TrainExperts => &[TrainBaseline, Collect, MinePairs],
            Evaluate => &[TrainBaseline, FitEncoder, BuildCentroids, TrainExperts],
            Detect => &[Collect, FitEncoder],
            Diagnose => &[Collect, FitEncoder, BuildCentroids, Evaluate],
            Report => &[BuildCentroids, MinePairs, TrainExperts, Evaluate, Detect, Diagnose],
        }
    }
}

impl Stage {
    /// Every stage this one depends on, directly or transitively, in
    /// pipeline order.
    pub fn upstream(self) -> Vec<Stage> {
        let mut need = vec![false; ALL_STAGES.len()];
        let mut stack = self.deps().to_vec();
        while let Some(s) = stack.pop() {
            let i = ALL_STAGES.iter().position(|&x| x == s).expect("stage listed");
            if !need[i] {
                need[i] = true;
                stack.extend_from_slice(s.deps());
            }
        }
        ALL_STAGES.iter().zip(need).filter(|(_, n)| *n).map(|(s, _)| *s).collect()
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_STAGES
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for per-seed episodes; `None` uses rayon's default.
    pub jobs: Option<usize>,
    /// Stages to re-run even when their hashes match.
    pub force: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTiming {
    pub stage: Stage,
    pub elapsed: Duration,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub timings: Vec<StageTiming>,
}

pub fn run_pipeline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    run_stages(cfg, &ALL_STAGES, opts)
}

/// Runs `stages` in order. Each must have its upstream stages complete and
/// current, either from an earlier run or earlier in `stages`.
pub fn run_stages(cfg: &ExperimentConfig, stages: &[Stage], opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = opts.jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_stages_inner(cfg, stages, opts))
}

fn run_stages_inner(cfg: &ExperimentConfig, stages: &[Stage], opts: &RunOptions) -> Result<RunOutcome> {
    let root = cfg.out_dir.as_path();
    fs::create_dir_all(root)?;
    let config_hash = cfg.hash()?;
    let mut manifest = RunManifest::load(root)?.unwrap_or_default();
    if manifest.config_hash != config_hash {
        manifest.stages.clear();
    }
    manifest.tool_version = TOOL_VERSION.to_string();
    manifest.config_hash = config_hash.clone();
    manifest.seed_ranges = cfg
        .seed_ranges()
        .into_iter()
        .map(|(k, a, b)| (k, format!("{a}..={b}")))
        .chain([("expert_training".to_string(), cfg.expert.seed.to_string()), ("detector".to_string(), cfg.detect.seed.to_string())])
        .collect();
    fs::write(root.join("config.toml"), cfg.to_toml()?)?;
    manifest.save(root)?;

    let mut timings = Vec::new();
    for &stage in stages {
        let start = Instant::now();
        let stage_err = |e: Error| Error::Stage { stage: stage.name().into(), path: root.join(stage.dir()), source: Box::new(e) };
        let mut missing = Vec::new();
        for dep in stage.upstream() {
            missing.extend(manifest.stale_artifacts(root, dep.name()));
        }
        if !missing.is_empty() {
            return Err(stage_err(Error::MissingArtifacts(missing)));
        }
        let input_hash = stage_input_hash(&manifest, &config_hash, stage);
        if !opts.force.contains(&stage) && manifest.is_current(root, stage.name(), &input_hash) {
            info!("{}: up to date, skipping", stage.name());
            timings.push(StageTiming { stage, elapsed: start.elapsed(), skipped: true });
            continue;
        }
        info!("{}: running", stage.name());
        manifest.stages.remove(stage.name());
        let dir = root.join(stage.dir());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let mut w = ArtifactWriter::new(root);
        run_stage(stage, &Ctx { cfg, root }, &mut w).map_err(stage_err)?;
        manifest.stages.insert(stage.name().to_string(), StageRecord { input_hash, artifacts: w.finish() });
        manifest.save(root)?;
        let elapsed = start.elapsed();
        info!("{}: done in {:.1}s", stage.name(), elapsed.as_secs_f64());
        timings.push(StageTiming { stage, elapsed, skipped: false });
    }
    Ok(RunOutcome { manifest, timings })
}

fn stage_input_hash(manifest: &RunManifest, config_hash: &str, stage: Stage) -> String {
    let mut s = format!("{TOOL_VERSION}\n{config_hash}\n{}\n", stage.name());
    for dep in stage.deps() {
        if let Some(rec) = manifest.stages.get(dep.name()) {
            for (path, h) in &rec.artifacts {
                let _ = writeln!(s, "{path} {h}");
            }
        }
    }
    sha256_hex(s.as_bytes())
}

fn run_stage(stage: Stage, ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    match stage {
        Stage::TrainBaseline => train_baseline(ctx, w),
        Stage::Collect => collect(ctx, w),
        Stage::FitEncoder => fit_encoder(ctx, w),
        Stage::BuildCentroids => build_centroids(ctx, w),
        Stage::MinePairs => mine_pairs(ctx, w),
        Stage::TrainExperts => train_experts(ctx, w),
        Stage::Evaluate => evaluate(ctx, w),
        Stage::Detect => detect(ctx, w),
        Stage::Diagnose => diagnose(ctx, w),
        Stage::Report => report::write_report(ctx.root, ctx.cfg, w),
    }
}

// ---------------------------------------------------------------------------
// Artifact paths and loaders

pub const NOMINAL_MODEL: &str = "baseline/nominal_model.txt";
pub const FEATURIZER: &str = "encoder/featurizer.json";
pub const PCA: &str = "encoder/pca.txt";
pub const CLUSTERS: &str = "centroids/clusters.json";
pub const FINETUNED_MODEL: &str = "experts/finetuned_model.txt";
pub const GLOBAL_EXPERT_LABEL: &str = "global";

pub fn train_set_path(label: &str) -> String {
    format!("collect/train/{label}.jsonl")
}

pub fn probe_set_path(label: &str) -> String {
    format!("collect/probe/{label}.jsonl")
}

pub fn pairs_path(label: &str, kind: &str) -> String {
    format!("pairs/{label}_{kind}.csv")
}

pub fn expert_path(kind: &str, label: &str) -> String {
    format!("experts/{kind}/{label}.txt")
}

pub fn returns_path(method: &str) -> String {
    format!("evaluate/returns/{method}.csv")
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    root: &'a Path,
}

impl Ctx<'_> {
    fn read(&self, rel: &str) -> Result<String> {
        read_artifact(self.root, rel)
    }

    fn exists(&self, rel: &str) -> bool {
        self.root.join(rel).exists()
    }

    fn model(&self) -> Result<NominalModel> {
        NominalModel::from_text(&self.read(NOMINAL_MODEL)?)
    }

    fn obs_map(&self) -> ObsMap {
        let m = &self.cfg.obs_map;
        ObsMap::generate(m.seed, self.cfg.env.obs_dim, m.x_scale, m.v_scale)
    }

    fn env(&self, shift: ShiftSpec) -> Result<Env> {
        Env::new(&self.cfg.env, shift, self.cfg.profile.clone(), self.obs_map(), self.cfg.init)
    }

    fn trajs(&self, rel: &str) -> Result<Vec<Trajectory>> {
        let f = fs::File::open(self.root.join(rel)).map_err(|_| Error::MissingArtifacts(vec![rel.to_string()]))?;
        read_trajectories(BufReader::new(f))
    }

    fn featurizer(&self) -> Result<Featurizer> {
        Ok(serde_json::from_str(&self.read(FEATURIZER)?)?)
    }

    fn pca(&self) -> Result<PcaModel> {
        PcaModel::from_text(&self.read(PCA)?)
    }

    fn encoder(&self) -> Result<Encoder> {
        Ok(Encoder { featurizer: self.featurizer()?, pca: self.pca()? })
    }

    /// Every fitted centroid (ID, known and suitability shifts).
    fn clusters(&self) -> Result<ClusterSet> {
        let set: ClusterSet = serde_json::from_str(&self.read(CLUSTERS)?)?;
        ClusterSet::new(set.entries().to_vec(), set.id_bias)
    }

    fn pairs(&self, label: &str, kind: &str) -> Result<Vec<PreferencePair>> {
        pairs_from_csv(&self.read(&pairs_path(label, kind))?)
    }

    fn expert(&self, kind: &str, label: &str) -> Result<Option<ExpertParams>> {
        let rel = expert_path(kind, label);
        if !self.exists(&rel) {
            return Ok(None);
        }
        Ok(Some(ExpertParams::from_text(&self.read(&rel)?)?))
    }
}

struct Encoder {
    featurizer: Featurizer,
    pca: PcaModel,
}

impl Encoder {
    /// Embedding of every step of every episode.
    fn embed(&self, trajs: &[Trajectory]) -> Result<Vec<Vec<Vec<f64>>>> {
        trajs
            .par_iter()
            .map(|t| {
                self.featurizer
                    .featurize_history(&t.observations)?
                    .iter()
                    .map(|r| self.pca.embed(r).map(|h| h.0))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    fn embed_flat(&self, trajs: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
        Ok(self.embed(trajs)?.into_iter().flatten().collect())
    }
}

fn run_episodes<C, F>(env: &Env, seeds: &[u64], make: F) -> Result<Vec<Trajectory>>
where
    C: Controller,
    F: Fn() -> C + Sync,
{
    seeds.par_iter().map(|&s| env.run_episode(&mut make(), s)).collect()
}

fn to_jsonl(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for t in trajs {
        write_trajectory(&mut buf, t)?;
    }
    Ok(buf)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Every `stride`-th row so that at most `cap` remain.
fn strided(rows: &[Vec<f64>], cap: usize) -> Vec<Vec<f64>> {
    let stride = rows.len().div_ceil(cap.max(1)).max(1);
    rows.iter().step_by(stride).cloned().collect()
}

fn label_seeds(base: u64, index: usize, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base + index as u64 * LABEL_SEED_STRIDE + i).collect()
}

// ---------------------------------------------------------------------------
// Stages

fn train_baseline(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let env = ctx.env(ShiftSpec::ID)?;
    let seeds: Vec<u64> = (0..cfg.baseline.id_episodes as u64).map(|i| cfg.baseline.seed_base + i).collect();
    let trajs = run_episodes(&env, &seeds, || RandomController)?;
    let reference = NominalModel::from_params(&cfg.env);
    let model = fit_nominal_model(&trajs, &reference)?;
    w.write(NOMINAL_MODEL, model.to_text())?;
    w.write("baseline/identification.jsonl", to_jsonl(&trajs)?)?;
    let mut s = String::from("coefficient,fitted,reference\n");
    for (i, name) in COEFFICIENT_NAMES.iter().enumerate() {
        let _ = writeln!(s, "{name},{:?},{:?}", model.coefficients()[i], reference.coefficients()[i]);
    }
    let _ = writeln!(s, "one_step_mse,{:?},{:?}", one_step_mse(&model, &trajs), one_step_mse(&reference, &trajs));
    w.write("baseline/fit.csv", s)?;
    Ok(())
}

fn collect(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let mpc = MpcController::new(ctx.model()?, cfg.planner);
    let mut summary = String::from("set,label,episodes,mean_return,std_return\n");
    for (i, shift) in cfg.train_shifts().into_iter().enumerate() {
        let env = ctx.env(shift)?;
        let seeds = label_seeds(cfg.collect.seed_base, i, cfg.collect.episodes);
        let trajs = if shift == ShiftSpec::ID {
            run_episodes(&env, &seeds, || mpc.clone())?
        } else {
            run_episodes(&env, &seeds, || {
                ExploringController::new(mpc.clone(), cfg.collect.explore_scale, cfg.collect.explore_block)
            })?
        };
        let (m, s) = mean_std(&trajs.iter().map(|t| t.episode_return).collect::<Vec<_>>());
        let _ = writeln!(summary, "train,{},{},{m:?},{s:?}", shift.label(), trajs.len());
        w.write(&train_set_path(&shift.label()), to_jsonl(&trajs)?)?;
    }
    for (i, shift) in cfg.probe_shifts().into_iter().enumerate() {
        let env = ctx.env(shift)?;
        let seeds = label_seeds(cfg.collect.probe_seed_base, i, cfg.collect.probe_episodes);
        let trajs = run_episodes(&env, &seeds, || mpc.clone())?;
        let (m, s) = mean_std(&trajs.iter().map(|t| t.episode_return).collect::<Vec<_>>());
        let _ = writeln!(summary, "probe,{},{},{m:?},{s:?}", shift.label(), trajs.len());
        w.write(&probe_set_path(&shift.label()), to_jsonl(&trajs)?)?;
    }
    w.write("collect/obs_map.json", serde_json::to_string(&ctx.obs_map())?)?;
    w.write("collect/summary.csv", summary)?;
    Ok(())
}

fn fit_encoder(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let e = &cfg.encoder;
    let featurizer = Featurizer::generate(e.featurizer_seed, e.window, cfg.env.obs_dim, e.feature_dim, e.gain);
    let mut rows = Vec::new();
    for shift in cfg.train_shifts() {
        for t in ctx.trajs(&train_set_path(&shift.label()))? {
            rows.extend(featurizer.featurize_history(&t.observations)?.into_iter().map(|r| r.0));
        }
    }
    let pca = fit_pca(&rows, e.pca_dim)?;
    let total: f64 = {
        let mean = crate::encoder::column_means(&rows);
        let cov = crate::encoder::covariance(&rows, &mean);
        (0..e.feature_dim).map(|i| cov[i * e.feature_dim + i]).sum()
    };
    let mut ev = String::from("component,eigenvalue,explained_fraction\n");
    for (i, l) in pca.eigenvalues.iter().enumerate() {
        let _ = writeln!(ev, "{i},{l:?},{:?}", l / total);
    }
    w.write(FEATURIZER, serde_json::to_string(&featurizer)?)?;
    w.write(PCA, pca.to_text())?;
    w.write("encoder/eigenvalues.csv", ev)?;
    Ok(())
}

fn centroid_of(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    compute_centroid(&points.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

fn build_centroids(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let enc = ctx.encoder()?;
    let mut entries = Vec::new();
    for shift in cfg.train_shifts() {
        let pts = enc.embed_flat(&ctx.trajs(&train_set_path(&shift.label()))?)?;
        entries.push(ClusterEntry { label: shift.label(), centroid: centroid_of(&pts)? });
    }
    let all = ClusterSet::new(entries, cfg.routing.id_bias)?;
    let gating = gating_clusters(cfg, &all)?;
    let mut labelled = Vec::new();
    let mut by_label = BTreeMap::new();
    for shift in cfg.probe_shifts() {
        let pts = enc.embed_flat(&ctx.trajs(&probe_set_path(&shift.label()))?)?;
        labelled.extend(pts.iter().map(|h| (shift.label(), Embedding(h.clone()))));
        by_label.insert(shift.label(), pts.into_iter().map(Embedding).collect::<Vec<_>>());
    }
    let stats = routing_stats(&labelled, &gating)?;
    w.write(CLUSTERS, serde_json::to_string_pretty(&all)?)?;
    w.write("centroids/routing_probe.csv", routing_stats_csv(&stats, &gating))?;
    let dist = centroid_distance_table(&all, &by_label)?;
    let mut s = String::from("label");
    for l in all.labels() {
        let _ = write!(s, ",dist_{l}");
    }
    s.push_str(",nearest\n");
    for r in &dist {
        s.push_str(&r.label);
        for v in r.mean_distance.values() {
            let _ = write!(s, ",{v:?}");
        }
        let _ = writeln!(s, ",{}", r.nearest);
    }
    w.write("centroids/distances.csv", s)?;
    Ok(())
}

/// The routing set used by indexed gating: ID plus the known shifts.
fn gating_clusters(cfg: &ExperimentConfig, all: &ClusterSet) -> Result<ClusterSet> {
    let mut keep = vec![ID_LABEL.to_string()];
    keep.extend(cfg.shifts.known.iter().map(ShiftSpec::label));
    all.subset(&keep.iter().map(String::as_str).collect::<Vec<_>>())
}

fn mining_episodes(enc: &Encoder, trajs: &[Trajectory]) -> Result<Vec<MiningEpisode>> {
    Ok(enc
        .embed(trajs)?
        .into_iter()
        .zip(trajs)
        .map(|(embeddings, t)| MiningEpisode {
            embeddings,
            base_actions: t.base_actions.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
        })
        .collect())
}

fn expert_labels(cfg: &ExperimentConfig) -> Vec<String> {
    cfg.shifts.known.iter().chain(&cfg.shifts.suitability).map(ShiftSpec::label).collect()
}

fn mine_pairs(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let enc = ctx.encoder()?;
    let mut summary = String::from("label,naive_pairs,harder_pairs\n");
    for label in expert_labels(cfg) {
        let episodes = mining_episodes(&enc, &ctx.trajs(&train_set_path(&label))?)?;
        let naive = mine_pairs_naive(&episodes)?;
        let harder = mine_pairs_harder(&episodes, cfg.mining.contrast_quantile, cfg.mining.segment_len)?;
        let _ = writeln!(summary, "{label},{},{}", naive.len(), harder.len());
        w.write(&pairs_path(&label, "naive"), pairs_to_csv(&naive))?;
        w.write(&pairs_path(&label, "harder"), pairs_to_csv(&harder))?;
    }
    w.write("pairs/summary.csv", summary)?;
    Ok(())
}

fn train_experts(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let mut jobs: Vec<(String, String, Vec<PreferencePair>)> = Vec::new();
    for label in expert_labels(cfg) {
        for kind in ["harder", "naive"] {
            jobs.push((kind.to_string(), label.clone(), ctx.pairs(&label, kind)?));
        }
    }
    let mut pooled = Vec::new();
    for s in &cfg.shifts.known {
        pooled.extend(ctx.pairs(&s.label(), "harder")?);
    }
    if !pooled.is_empty() {
        jobs.push(("pooled".to_string(), GLOBAL_EXPERT_LABEL.to_string(), pooled));
    }
    let results: Vec<Option<(ExpertParams, Vec<f64>, f64)>> = jobs
        .par_iter()
        .map(|(kind, label, pairs)| {
            if pairs.is_empty() {
                warn!("no {kind} pairs for `{label}`; its expert is not trained");
                return Ok(None);
            }
            let r = train_expert(pairs, label, &cfg.expert)?;
            let acc = preference_accuracy(&r.expert, pairs)?;
            Ok(Some((r.expert, r.loss_curve, acc)))
        })
        .collect::<Result<_>>()?;
    let mut table = String::from("kind,label,pairs,final_loss,preference_accuracy\n");
    let mut curves = String::from("kind,label,epoch,loss\n");
    for ((kind, label, pairs), res) in jobs.iter().zip(results) {
        let Some((expert, curve, acc)) = res else {
            let _ = writeln!(table, "{kind},{label},0,,");
            continue;
        };
        let last = curve.last().copied().map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(table, "{kind},{label},{},{last},{acc:?}", pairs.len());
        for (e, l) in curve.iter().enumerate() {
            let _ = writeln!(curves, "{kind},{label},{e},{l:?}");
        }
        w.write(&expert_path(kind, label), expert.to_text())?;
    }
    w.write("experts/training.csv", table)?;
    w.write("experts/loss_curves.csv", curves)?;

    let known_trajs: Vec<Trajectory> = cfg
        .shifts
        .known
        .iter()
        .map(|s| ctx.trajs(&train_set_path(&s.label())))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if !known_trajs.is_empty() {
        let base = ctx.model()?;
        let tuned = finetune_nominal_model(&base, &known_trajs, cfg.finetune.steps, cfg.finetune.lr)?;
        w.write(FINETUNED_MODEL, tuned.to_text())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

enum MethodKind {
    Experts { gate: Gate, experts: BTreeMap<String, ExpertParams> },
    Model(NominalModel),
}

struct Method {
    name: String,
    envs: Vec<ShiftSpec>,
    blocks: Vec<(&'static str, SeedBlock)>,
    kind: MethodKind,
}

pub const BLOCK_FIRST: &str = "first";
pub const BLOCK_SECOND: &str = "second";

fn build_methods(ctx: &Ctx<'_>) -> Result<Vec<Method>> {
    let cfg = ctx.cfg;
    let all = ctx.clusters()?;
    let gating = gating_clusters(cfg, &all)?;
    let first = vec![(BLOCK_FIRST, cfg.evaluation.first)];
    let mut both = first.clone();
    if cfg.evaluation.second.count > 0 {
        both.push((BLOCK_SECOND, cfg.evaluation.second));
    }
    let mut main_envs = vec![ShiftSpec::ID];
    main_envs.extend(cfg.shifts.known.iter().copied());

    let load_set = |kind: &str, labels: &[String]| -> Result<Option<BTreeMap<String, ExpertParams>>> {
        let mut m = BTreeMap::new();
        for l in labels {
            match ctx.expert(kind, l)? {
                Some(e) => {
                    m.insert(l.clone(), e);
                }
                None => return Ok(None),
            }
        }
        Ok(Some(m))
    };
    let known: Vec<String> = cfg.shifts.known.iter().map(ShiftSpec::label).collect();
    let mut methods = Vec::new();
    if known.is_empty() {
        return Ok(methods);
    }
    let mut push_experts = |name: &str, envs: &[ShiftSpec], blocks: &[(&'static str, SeedBlock)], gate: Gate, experts| {
        methods.push(Method {
            name: name.to_string(),
            envs: envs.to_vec(),
            blocks: blocks.to_vec(),
            kind: MethodKind::Experts { gate, experts },
        });
    };
    let mode = cfg.routing.gating;
    if let Some(harder) = load_set("harder", &known)? {
        push_experts("harder", &main_envs, &both, Gate::new(mode, gating.clone(), None, known.clone())?, harder.clone());
        if cfg.evaluation.ablations {
            push_experts(
                "random",
                &main_envs,
                &first,
                Gate::new(GatingMode::Random, gating.clone(), None, known.clone())?,
                harder.clone(),
            );
            let last = known.last().expect("non-empty");
            let only = gating.subset(&[ID_LABEL, last])?;
            let subset: BTreeMap<_, _> = harder.iter().filter(|(k, _)| *k == last).map(|(k, v)| (k.clone(), v.clone())).collect();
            push_experts(&format!("only_{last}"), &main_envs, &first, Gate::new(mode, only, None, known.clone())?, subset);
        }
    } else {
        warn!("harder experts incomplete; harder-pairs methods are not evaluated");
    }
    if let Some(naive) = load_set("naive", &known)? {
        push_experts("naive", &main_envs, &both, Gate::new(mode, gating.clone(), None, known.clone())?, naive);
    }
    if cfg.evaluation.ablations {
        if let Some(global) = ctx.expert("pooled", GLOBAL_EXPERT_LABEL)? {
            let experts = BTreeMap::from([(GLOBAL_EXPERT_LABEL.to_string(), global)]);
            let designated = Some(GLOBAL_EXPERT_LABEL.to_string());
            push_experts(
                "global",
                &main_envs,
                &first,
                Gate::new(GatingMode::Global, gating.clone(), designated.clone(), vec![])?,
                experts.clone(),
            );
            push_experts("coarse", &main_envs, &first, Gate::new(GatingMode::Coarse, gating.clone(), designated, vec![])?, experts);
        }
        if ctx.exists(FINETUNED_MODEL) {
            methods.push(Method {
                name: "finetune".into(),
                envs: main_envs.clone(),
                blocks: first.clone(),
                kind: MethodKind::Model(NominalModel::from_text(&ctx.read(FINETUNED_MODEL)?)?),
            });
        }
    }
    for s in &cfg.shifts.suitability {
        let label = s.label();
        let Some(e) = ctx.expert("harder", &label)? else { continue };
        let dual = all.subset(&[ID_LABEL, &label])?;
        methods.push(Method {
            name: format!("dual_{label}"),
            envs: vec![ShiftSpec::ID, *s],
            blocks: first.clone(),
            kind: MethodKind::Experts {
                gate: Gate::new(mode, dual, None, vec![label.clone()])?,
                experts: BTreeMap::from([(label, e)]),
            },
        });
    }
    Ok(methods)
}

fn same_behaviour(a: &Trajectory, b: &Trajectory) -> bool {
    a.states == b.states
        && a.observations == b.observations
        && a.actions == b.actions
        && a.rewards == b.rewards
        && a.episode_return.to_bits() == b.episode_return.to_bits()
}

fn route_counts(t: &Trajectory) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for r in &t.routes {
        *m.entry(r.as_str()).or_insert(0) += 1;
    }
    m
}

fn cumulative_means(trajs: &[Trajectory]) -> Vec<f64> {
    let h = trajs.iter().map(Trajectory::len).min().unwrap_or(0);
    let mut acc = vec![0.0; h];
    for t in trajs {
        let mut c = 0.0;
        for (i, r) in t.rewards[..h].iter().enumerate() {
            c += r;
            acc[i] += c;
        }
    }
    acc.iter().map(|v| v / trajs.len() as f64).collect()
}

fn evaluate(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let base_model = ctx.model()?;
    let base = MpcController::new(base_model, cfg.planner);
    let enc = ctx.encoder()?;
    let methods = build_methods(ctx)?;

    // Baseline runs, once per (env, block).
    let mut needed: Vec<(ShiftSpec, &'static str, SeedBlock)> = vec![(ShiftSpec::ID, BLOCK_FIRST, cfg.evaluation.first)];
    for m in &methods {
        for e in &m.envs {
            for &(b, sb) in &m.blocks {
                if !needed.iter().any(|(e2, b2, _)| e2 == e && *b2 == b) {
                    needed.push((*e, b, sb));
                }
            }
        }
    }
    for s in cfg.shifts.known.iter().chain(&cfg.shifts.suitability) {
        if !needed.iter().any(|(e2, b2, _)| e2 == s && *b2 == BLOCK_FIRST) {
            needed.push((*s, BLOCK_FIRST, cfg.evaluation.first));
        }
    }
    let mut baselines: BTreeMap<(String, &'static str), Vec<Trajectory>> = BTreeMap::new();
    let mut baseline_csv = String::from("env,block,seed,return\n");
    for (shift, block, sb) in &needed {
        let trajs = run_episodes(&ctx.env(*shift)?, &sb.seeds(), || base.clone())?;
        baselines.insert((shift.label(), block), trajs);
    }
    for ((env, block), trajs) in &baselines {
        for t in trajs {
            let _ = writeln!(baseline_csv, "{env},{block},{},{:?}", t.seed, t.episode_return);
        }
    }
    w.write("evaluate/baseline.csv", baseline_csv)?;

    let mut routing = String::from("method,env,block,seed,steps,id_steps,routes,identical_to_baseline\n");
    let mut cumulative = String::from("method,env,block,step,mean_cumulative_return\n");
    for ((env, block), trajs) in &baselines {
        if *block == BLOCK_FIRST {
            for (i, c) in cumulative_means(trajs).iter().enumerate() {
                let _ = writeln!(cumulative, "baseline,{env},{block},{},{c:?}", i + 1);
            }
        }
    }
    let mut method_list = String::from("method,envs,blocks\n");
    for m in &methods {
        let mut csv = String::from("env,block,seed,baseline_return,method_return\n");
        for env_spec in &m.envs {
            let env = ctx.env(*env_spec)?;
            for &(block, sb) in &m.blocks {
                let seeds = sb.seeds();
                let trajs = match &m.kind {
                    MethodKind::Model(model) => run_episodes(&env, &seeds, || MpcController::new(*model, cfg.planner))?,
                    MethodKind::Experts { gate, experts } => run_episodes(&env, &seeds, || ExpertController {
                        base: base.clone(),
                        featurizer: &enc.featurizer,
                        pca: &enc.pca,
                        gate,
                        experts,
                    })?,
                };
                let base_trajs = &baselines[&(env_spec.label(), block)];
                for (t, b) in trajs.iter().zip(base_trajs) {
                    let _ = writeln!(csv, "{},{block},{},{:?},{:?}", env_spec.label(), t.seed, b.episode_return, t.episode_return);
                    let counts = route_counts(t);
                    let id_steps = counts.get(ID_LABEL).copied().unwrap_or(0);
                    let routes: Vec<String> = counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
                    let identical = if t.routes.is_empty() {
                        "na".to_string()
                    } else {
                        same_behaviour(t, b).to_string()
                    };
                    let _ = writeln!(
                        routing,
                        "{},{},{block},{},{},{id_steps},{},{identical}",
                        m.name,
                        env_spec.label(),
                        t.seed,
                        t.len(),
                        routes.join(";")
                    );
                }
                if block == BLOCK_FIRST {
                    for (i, c) in cumulative_means(&trajs).iter().enumerate() {
                        let _ = writeln!(cumulative, "{},{},{block},{},{c:?}", m.name, env_spec.label(), i + 1);
                    }
                }
            }
        }
        let envs: Vec<String> = m.envs.iter().map(ShiftSpec::label).collect();
        let blocks: Vec<&str> = m.blocks.iter().map(|b| b.0).collect();
        let _ = writeln!(method_list, "{},{},{}", m.name, envs.join(";"), blocks.join(";"));
        w.write(&returns_path(&m.name), csv)?;
    }
    w.write("evaluate/methods.csv", method_list)?;
    w.write("evaluate/routing.csv", routing)?;
    w.write("evaluate/cumulative.csv", cumulative)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Detection

pub const NOVEL_MERGED: &str = "novel_merged";
pub const TASK_ID_REJECTION: &str = "id_rejection";
pub const TASK_KNOWN_VS_NOVEL: &str = "known_vs_novel";

/// Detectors for rejecting shifted data with a model of ID data only.
pub fn id_rejection_detectors() -> Vec<DetectorKind> {
    vec![
        DetectorKind::Mahalanobis,
        DetectorKind::Gmm { k: 16 },
        DetectorKind::Knn { k: 10 },
        DetectorKind::Knn { k: 50 },
        DetectorKind::IsoForest,
    ]
}

fn detector_result(id_scores: &[f64], ood_scores: &[f64], target_fpr: f64) -> Result<DetectorResult> {
    let cal = calibrate_threshold(id_scores, target_fpr)?;
    Ok(DetectorResult {
        auc: roc_auc(id_scores, ood_scores)?,
        tpr_at_tau: tpr_at_threshold(ood_scores, cal.threshold)?,
        tau: cal.threshold,
        achieved_fpr: cal.achieved_fpr,
    })
}

fn detect(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let dc = &cfg.detect;
    let enc = ctx.encoder()?;
    let id_fit = strided(&enc.embed_flat(&ctx.trajs(&train_set_path(ID_LABEL))?)?, dc.max_fit_points);
    let id_test = strided(&enc.embed_flat(&ctx.trajs(&probe_set_path(ID_LABEL))?)?, dc.max_eval_points);
    let mut subsets: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let mut probe_episodes: BTreeMap<String, Vec<Vec<Vec<f64>>>> = BTreeMap::new();
    for s in cfg.shifts.all() {
        let per_episode = enc.embed(&ctx.trajs(&probe_set_path(&s.label()))?)?;
        let flat: Vec<Vec<f64>> = per_episode.iter().flatten().cloned().collect();
        subsets.push((s.label(), strided(&flat, dc.max_eval_points)));
        probe_episodes.insert(s.label(), per_episode);
    }
    let novel_flat: Vec<Vec<f64>> =
        cfg.shifts.novel.iter().flat_map(|s| probe_episodes[&s.label()].iter().flatten().cloned()).collect();
    if !novel_flat.is_empty() {
        subsets.push((NOVEL_MERGED.to_string(), strided(&novel_flat, dc.max_eval_points)));
    }

    let mut rows = Vec::new();
    let mut roc = String::from("task,detector,ood_subset,fpr,tpr\n");
    for kind in id_rejection_detectors() {
        let mut r = rng::stream(dc.seed, Purpose::Detector);
        let Some(det) = fit_detector(kind, std::slice::from_ref(&id_fit), &mut r)? else { continue };
        let id_scores = det.score_all(&id_test);
        for (label, pts) in &subsets {
            let ood_scores = det.score_all(pts);
            rows.push(DetectorRow {
                task: TASK_ID_REJECTION.into(),
                detector: kind.name(),
                ood_subset: label.clone(),
                result: Some(detector_result(&id_scores, &ood_scores, dc.target_fpr)?),
            });
            if kind == DetectorKind::Mahalanobis {
                for (f, t) in roc_points(&id_scores, &ood_scores) {
                    let _ = writeln!(roc, "{TASK_ID_REJECTION},{},{label},{f:?},{t:?}", kind.name());
                }
            }
        }
    }

    // Known-family data as the reference; held-out known episodes versus
    // novel shifts.
    if !cfg.shifts.known.is_empty() && !novel_flat.is_empty() {
        let mut groups = Vec::new();
        let mut held = Vec::new();
        for s in &cfg.shifts.known {
            let eps = &probe_episodes[&s.label()];
            let half = eps.len() / 2;
            let fit: Vec<Vec<f64>> = eps[..half].iter().flatten().cloned().collect();
            groups.push(strided(&fit, dc.max_fit_points / cfg.shifts.known.len()));
            held.extend(eps[half..].iter().flatten().cloned());
        }
        let held = strided(&held, dc.max_eval_points);
        let novel = strided(&novel_flat, dc.max_eval_points);
        for kind in DetectorKind::comparison_set() {
            let mut r = rng::stream(dc.seed, Purpose::Detector);
            let result = match fit_detector(kind, &groups, &mut r)? {
                Some(det) => Some(detector_result(&det.score_all(&held), &det.score_all(&novel), dc.target_fpr)?),
                None => None,
            };
            rows.push(DetectorRow {
                task: TASK_KNOWN_VS_NOVEL.into(),
                detector: kind.name(),
                ood_subset: NOVEL_MERGED.into(),
                result,
            });
        }
    }
    w.write("detect/detectors.csv", detector_rows_csv(&rows))?;
    w.write("detect/roc_points.csv", roc)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Geometry and suitability

fn diagnose(ctx: &Ctx<'_>, w: &mut ArtifactWriter) -> Result<()> {
    let cfg = ctx.cfg;
    let enc = ctx.encoder()?;
    let mut points: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let geometry_shifts: Vec<ShiftSpec> =
        std::iter::once(ShiftSpec::ID).chain(cfg.shifts.known.iter().chain(&cfg.shifts.novel).copied()).collect();
    for s in &geometry_shifts {
        points.insert(s.label(), enc.embed_flat(&ctx.trajs(&probe_set_path(&s.label()))?)?);
    }
    let entries = points
        .iter()
        .map(|(l, p)| Ok(ClusterEntry { label: l.clone(), centroid: centroid_of(p)? }))
        .collect::<Result<Vec<_>>>()?;
    let clusters = ClusterSet::new(entries, 1.0)?;
    w.write("diagnose/cosine.csv", centroid_cosine_matrix(&clusters)?.to_csv())?;
    w.write("diagnose/spread.csv", spread_rows_csv(&spread_ratios(&points, &clusters)?))?;

    let known: Vec<Vec<f64>> = cfg.shifts.known.iter().flat_map(|s| points[&s.label()].iter().cloned()).collect();
    let novel: Vec<Vec<f64>> = cfg.shifts.novel.iter().flat_map(|s| points[&s.label()].iter().cloned()).collect();
    let mut ks = String::from("rank,dim,ks\n");
    if !known.is_empty() && !novel.is_empty() {
        for (rank, (dim, v)) in rank_dims(&known, &novel, cfg.encoder.pca_dim)?.iter().enumerate() {
            let _ = writeln!(ks, "{},{dim},{v:?}", rank + 1);
        }
    }
    w.write("diagnose/ks_dims.csv", ks)?;

    let mut scatter = Vec::new();
    for (label, pts) in &points {
        for p in strided(pts, cfg.diagnose.pca2d_points_per_label) {
            scatter.push((label.clone(), Embedding(p)));
        }
    }
    let mut s = String::from("label,pc1,pc2\n");
    for p in project2d(&scatter)? {
        let _ = writeln!(s, "{},{:?},{:?}", p.label, p.x, p.y);
    }
    w.write("diagnose/pca2d.csv", s)?;

    // Suitability from first-block baseline returns.
    let baseline = read_artifact(ctx.root, "evaluate/baseline.csv")?;
    let mut by_env: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in baseline.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 4 && f[1] == BLOCK_FIRST {
            let v: f64 = f[3].parse().map_err(|e| Error::Parse(format!("evaluate/baseline.csv: {e}")))?;
            by_env.entry(f[0].to_string()).or_default().push(v);
        }
    }
    let id_mean = by_env.get(ID_LABEL).map(|r| mean_std(r).0).ok_or_else(|| Error::MissingArtifacts(vec!["ID baseline returns".into()]))?;
    let mut suit = String::from("shift,mean,std,std_over_mean,id_mean,degradation_frac,degraded,suitable\n");
    for s in cfg.shifts.known.iter().chain(&cfg.shifts.suitability) {
        let Some(r) = by_env.get(&s.label()) else { continue };
        let v = shift_suitability(r, id_mean, cfg.diagnose.degradation_frac)?;
        let ratio = v.std_over_mean.map(|x| format!("{x:?}")).unwrap_or_else(|| "undefined".into());
        let _ = writeln!(
            suit,
            "{},{:?},{:?},{ratio},{id_mean:?},{:?},{},{}",
            s.label(),
            v.mean,
            v.std,
            cfg.diagnose.degradation_frac,
            v.degraded,
            v.suitable
        );
    }
    w.write("diagnose/suitability.csv", suit)?;
    Ok(())
}
