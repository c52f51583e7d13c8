//! Density- and distance-based ID rejection: Mahalanobis, Gaussian mixtures
//! (EM with k-means++ init, BIC selection), k-NN distance and Isolation
//! Forest, plus ROC/AUC and FPR-calibrated thresholds.
//!
//! Every detector scores so that higher means more out-of-distribution.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{column_means, covariance};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const MAHALANOBIS_RIDGE: f64 = 1e-3;
pub const GMM_RIDGE: f64 = 1e-6;
pub const GMM_TOL: f64 = 1e-6;
pub const GMM_MAX_ITER: usize = 200;
const COLLAPSE_WEIGHT: f64 = 1e-8;

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::invalid("empty data"))?;
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("rows must share a non-zero dimension"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("detector input".into()));
    }
    Ok(d)
}

/// Lower-triangular Cholesky factor with an explicit inverse, for repeated
/// quadratic forms.
#[derive(Debug, Clone, PartialEq)]
struct Factor {
    l_inv: DMatrix<f64>,
    log_det: f64,
}

impl Factor {
    fn new(cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov.cholesky().ok_or_else(|| Error::NonFinite("covariance is not positive-definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let n = l.nrows();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::NonFinite("singular Cholesky factor".into()))?;
        Ok(Self { l_inv, log_det })
    }

    fn quad(&self, diff: &[f64]) -> f64 {
        let y = &self.l_inv * DVector::from_column_slice(diff);
        y.norm_squared()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisModel {
    pub mean: Vec<f64>,
    pub lambda: f64,
    factor: Factor,
}

impl MahalanobisModel {
    /// Lower-triangular factor `L` with `L Lᵀ = Σ + λI`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.factor.l_inv.clone().try_inverse().expect("inverse of a triangular factor")
    }

    pub fn score(&self, h: &[f64]) -> f64 {
        let diff: Vec<f64> = h.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.factor.quad(&diff)
    }
}

pub fn fit_mahalanobis(rows: &[Vec<f64>], lambda: f64) -> Result<MahalanobisModel> {
    let d = check_rows(rows)?;
    if rows.len() <= d {
        return Err(Error::invalid(format!(
            "Mahalanobis needs more samples than dimensions ({} <= {d}); use a larger ridge or fewer PCA components",
            rows.len()
        )));
    }
    let mean = column_means(rows);
    let mut cov = DMatrix::from_row_slice(d, d, &covariance(rows, &mean));
    for i in 0..d {
        cov[(i, i)] += lambda;
    }
    Ok(MahalanobisModel { mean, lambda, factor: Factor::new(cov)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
    factor: Factor,
}

impl GmmComponent {
    fn new(weight: f64, mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let factor = Factor::new(cov.clone())?;
        Ok(Self { weight, mean, cov, factor })
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        -0.5 * (d * (2.0 * PI).ln() + self.factor.log_det + self.factor.quad(&diff))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub components: Vec<GmmComponent>,
    /// Total data log-likelihood before each M-step, then the final value.
    pub log_likelihoods: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self.components.iter().map(|c| c.weight.ln() + c.log_density(x)).collect();
        log_sum_exp(&terms)
    }

    pub fn log_likelihood(&self, rows: &[Vec<f64>]) -> f64 {
        rows.iter().map(|x| self.log_density(x)).sum()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihoods.last().expect("a fitted model records its likelihood")
    }

    /// Negative log-density.
    pub fn score(&self, x: &[f64]) -> f64 {
        -self.log_density(x)
    }
}

/// Free parameters of a full-covariance mixture.
pub fn gmm_param_count(k: usize, d: usize) -> usize {
    k - 1 + k * d + k * d * (d + 1) / 2
}

/// `-2 log L + p ln n`.
pub fn gmm_bic(model: &GmmModel, rows: &[Vec<f64>]) -> f64 {
    let p = gmm_param_count(model.k(), model.dim()) as f64;
    -2.0 * model.log_likelihood(rows) + p * (rows.len() as f64).ln()
}

fn kmeans_pp(rows: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers = vec![rows[rng.random_range(0..rows.len())].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = rows.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..rows.len())
        };
        centers.push(rows[idx].clone());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq(r, &rows[idx]));
        }
    }
    centers
}

fn ridge(mut m: DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        m[(i, i)] += eps;
    }
    m
}

/// EM for a full-covariance mixture. Initial means come from k-means++,
/// initial covariances are the pooled sample covariance. A component whose
/// weight collapses is re-seeded once at a random point; a second collapse is
/// an error.
pub fn fit_gmm(rows: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Result<GmmModel> {
    let d = check_rows(rows)?;
    if k == 0 {
        return Err(Error::invalid("a mixture needs at least one component"));
    }
    let n = rows.len();
    if n < k * (d + 1) {
        return Err(Error::invalid(format!("GMM with K={k} in {d} dims needs at least {} points, got {n}", k * (d + 1))));
    }
    let mean = column_means(rows);
    let pooled = ridge(DMatrix::from_row_slice(d, d, &covariance(rows, &mean)), GMM_RIDGE);
    let mut comps = kmeans_pp(rows, k, rng)
        .into_iter()
        .map(|c| GmmComponent::new(1.0 / k as f64, c, pooled.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut reseeded = vec![false; k];
    let mut lls = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut terms = vec![0.0; k];
    let mut converged = false;
    for _ in 0..GMM_MAX_ITER {
        // E-step.
        let mut ll = 0.0;
        for (i, x) in rows.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                terms[j] = c.weight.ln() + c.log_density(x);
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (terms[j] - lse).exp();
            }
        }
        if !ll.is_finite() {
            return Err(Error::NonFinite("GMM log-likelihood".into()));
        }
        converged = lls.last().is_some_and(|prev: &f64| ll - prev < GMM_TOL);
        lls.push(ll);
        if converged {
            break;
        }
        // M-step.
        let mut next = Vec::with_capacity(k);
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            let w = nk / n as f64;
            if w < COLLAPSE_WEIGHT {
                if reseeded[j] {
                    return Err(Error::NonFinite(format!("GMM component {j} collapsed twice")));
                }
                reseeded[j] = true;
                let at = rows[rng.random_range(0..n)].clone();
                next.push(GmmComponent::new(1.0 / k as f64, at, pooled.clone())?);
                continue;
            }
            let mut mu = vec![0.0; d];
            for (i, x) in rows.iter().enumerate() {
                let r = resp[i * k + j];
                for (m, v) in mu.iter_mut().zip(x) {
                    *m += r * v;
                }
            }
            mu.iter_mut().for_each(|m| *m /= nk);
            let mut cov = DMatrix::zeros(d, d);
            for (i, x) in rows.iter().enumerate() {
                let r = resp[i * k + j];
                let diff = DVector::from_iterator(d, x.iter().zip(&mu).map(|(a, b)| a - b));
                cov.ger(r, &diff, &diff, 1.0);
            }
            cov /= nk;
            next.push(GmmComponent::new(w, mu, ridge(cov, GMM_RIDGE))?);
        }
        let total: f64 = next.iter().map(|c| c.weight).sum();
        next.iter_mut().for_each(|c| c.weight /= total);
        comps = next;
    }
    let mut model = GmmModel { components: comps, log_likelihoods: lls };
    if !converged {
        let ll = model.log_likelihood(rows);
        model.log_likelihoods.push(ll);
    }
    Ok(model)
}

/// Fits `K = 1..=max_k` and keeps the lowest-BIC model.
pub fn fit_gmm_bic(rows: &[Vec<f64>], max_k: usize, rng: &mut RngStream) -> Result<(GmmModel, Vec<(usize, f64)>)> {
    let d = check_rows(rows)?;
    let mut best: Option<(f64, GmmModel)> = None;
    let mut table = Vec::new();
    for k in 1..=max_k {
        if rows.len() < k * (d + 1) {
            break;
        }
        let m = fit_gmm(rows, k, rng)?;
        let bic = gmm_bic(&m, rows);
        table.push((k, bic));
        if best.as_ref().is_none_or(|b| bic < b.0) {
            best = Some((bic, m));
        }
    }
    best.map(|b| (b.1, table)).ok_or_else(|| Error::invalid("too few points for any mixture size"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub reference: Vec<Vec<f64>>,
    pub k: usize,
}

impl KnnModel {
    /// Exact distance to the k-th nearest reference point.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut d: Vec<f64> = self
            .reference
            .iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let (_, kth, _) = d.select_nth_unstable_by(self.k - 1, f64::total_cmp);
        kth.sqrt()
    }
}

pub fn fit_knn(rows: &[Vec<f64>], k: usize) -> Result<KnnModel> {
    check_rows(rows)?;
    if k == 0 || k > rows.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", rows.len())));
    }
    Ok(KnnModel { reference: rows.to_vec(), k })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IsoNode {
    Split { dim: usize, value: f64, left: usize, right: usize },
    Leaf { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoTree {
    pub nodes: Vec<IsoNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoForestModel {
    pub trees: Vec<IsoTree>,
    pub subsample: usize,
    pub max_depth: usize,
}

/// Average unsuccessful-search path length in a BST of `m` keys,
/// `2 H(m-1) - 2 (m-1) / m` with exact harmonic numbers.
pub fn iso_c(m: usize) -> f64 {
    if m <= 1 {
        return 0.0;
    }
    let h: f64 = (1..m).map(|i| 1.0 / i as f64).sum();
    2.0 * h - 2.0 * (m - 1) as f64 / m as f64
}

fn build_iso(rows: &[&Vec<f64>], depth: usize, max_depth: usize, nodes: &mut Vec<IsoNode>, rng: &mut RngStream) -> usize {
    let id = nodes.len();
    nodes.push(IsoNode::Leaf { size: rows.len() });
    if depth >= max_depth || rows.len() <= 1 {
        return id;
    }
    let d = rows[0].len();
    let dim = rng.random_range(0..d);
    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r[dim]), b.max(r[dim])));
    if lo >= hi {
        return id;
    }
    let value = rng.random_range(lo..hi);
    let (l, r): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = rows.iter().partition(|row| row[dim] < value);
    let left = build_iso(&l, depth + 1, max_depth, nodes, rng);
    let right = build_iso(&r, depth + 1, max_depth, nodes, rng);
    nodes[id] = IsoNode::Split { dim, value, left, right };
    id
}

impl IsoTree {
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                IsoNode::Split { dim, value, left, right } => {
                    node = if x[dim] < value { left } else { right };
                    depth += 1.0;
                }
                IsoNode::Leaf { size } => return depth + iso_c(size),
            }
        }
    }
}

impl IsoForestModel {
    /// `2^(-E[path] / c(subsample))`, in `(0, 1]`.
    pub fn score(&self, x: &[f64]) -> f64 {
        let mean = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        let c = iso_c(self.subsample).max(f64::MIN_POSITIVE);
        2f64.powf(-mean / c)
    }
}

pub fn fit_isoforest(rows: &[Vec<f64>], trees: usize, subsample: usize, rng: &mut RngStream) -> Result<IsoForestModel> {
    check_rows(rows)?;
    if rows.len() < 2 || trees == 0 || subsample < 2 {
        return Err(Error::invalid("isolation forest needs n >= 2, trees >= 1, subsample >= 2"));
    }
    let m = subsample.min(rows.len());
    let max_depth = (m as f64).log2().ceil() as usize;
    let mut out = Vec::with_capacity(trees);
    for _ in 0..trees {
        let idx = rand::seq::index::sample(rng, rows.len(), m);
        let sample: Vec<&Vec<f64>> = idx.iter().map(|i| &rows[i]).collect();
        let mut nodes = Vec::new();
        build_iso(&sample, 0, max_depth, &mut nodes, rng);
        out.push(IsoTree { nodes });
    }
    Ok(IsoForestModel { trees: out, subsample: m, max_depth })
}

/// `P(ood > id) + 0.5 P(ood = id)`, computed by counting over sorted ID
/// scores.
pub fn roc_auc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::invalid("AUC needs non-empty score sets"));
    }
    let mut id = id_scores.to_vec();
    id.sort_by(f64::total_cmp);
    let mut twice: u128 = 0;
    for &s in ood_scores {
        let below = id.partition_point(|&v| v < s);
        let not_above = id.partition_point(|&v| v <= s);
        twice += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(twice as f64 / (2 * id.len() as u128 * ood_scores.len() as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorCalibration {
    pub threshold: f64,
    pub target_fpr: f64,
    pub achieved_fpr: f64,
}

/// Smallest ID score `τ` with `#{id > τ} / n <= target_fpr`.
pub fn calibrate_threshold(id_scores: &[f64], target_fpr: f64) -> Result<DetectorCalibration> {
    if id_scores.is_empty() {
        return Err(Error::invalid("calibration needs ID scores"));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::invalid(format!("target FPR must lie in (0, 1), got {target_fpr}")));
    }
    let mut v = id_scores.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    for &tau in &v {
        let above = v.len() - v.partition_point(|&s| s <= tau);
        if above as f64 / n <= target_fpr {
            return Ok(DetectorCalibration { threshold: tau, target_fpr, achieved_fpr: above as f64 / n });
        }
    }
    unreachable!("the maximum score always satisfies the constraint")
}

/// Fraction of scores strictly above `tau`.
pub fn tpr_at_threshold(ood_scores: &[f64], tau: f64) -> Result<f64> {
    if ood_scores.is_empty() {
        return Err(Error::invalid("TPR needs OOD scores"));
    }
    Ok(ood_scores.iter().filter(|&&s| s > tau).count() as f64 / ood_scores.len() as f64)
}

/// ROC points `(fpr, tpr)` at every distinct threshold, from `(1, 1)` down to
/// `(0, 0)`.
pub fn roc_points(id_scores: &[f64], ood_scores: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<f64> = id_scores.iter().chain(ood_scores).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let frac = |s: &[f64], t: f64| s.iter().filter(|&&v| v >= t).count() as f64 / s.len() as f64;
    let mut pts: Vec<(f64, f64)> = all.iter().map(|&t| (frac(id_scores, t), frac(ood_scores, t))).collect();
    pts.push((0.0, 0.0));
    pts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DetectorKind {
    Mahalanobis,
    Gmm { k: usize },
    /// One BIC-selected mixture per reference cluster; the score is the
    /// negative of the best cluster's log-density.
    GmmBic { max_k: usize },
    Knn { k: usize },
    IsoForest,
    OneClassSvm,
}

impl DetectorKind {
    pub fn name(&self) -> String {
        match self {
            DetectorKind::Mahalanobis => "mahalanobis".into(),
            DetectorKind::Gmm { k } => format!("gmm_k{k}"),
            DetectorKind::GmmBic { .. } => "gmm_bic".into(),
            DetectorKind::Knn { k } => format!("knn{k}"),
            DetectorKind::IsoForest => "isoforest".into(),
            DetectorKind::OneClassSvm => "ocsvm".into(),
        }
    }

    /// The eight-method comparison list.
    pub fn comparison_set() -> Vec<DetectorKind> {
        vec![
            DetectorKind::Gmm { k: 3 },
            DetectorKind::Gmm { k: 8 },
            DetectorKind::GmmBic { max_k: 8 },
            DetectorKind::Mahalanobis,
            DetectorKind::Knn { k: 10 },
            DetectorKind::Knn { k: 50 },
            DetectorKind::IsoForest,
            DetectorKind::OneClassSvm,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Detector {
    Mahalanobis(MahalanobisModel),
    Gmm(GmmModel),
    GmmSet(Vec<GmmModel>),
    Knn(KnnModel),
    IsoForest(IsoForestModel),
}

impl Detector {
    pub fn score(&self, x: &[f64]) -> f64 {
        match self {
            Detector::Mahalanobis(m) => m.score(x),
            Detector::Gmm(g) => g.score(x),
            Detector::GmmSet(gs) => gs.iter().map(|g| g.score(x)).fold(f64::INFINITY, f64::min),
            Detector::Knn(k) => k.score(x),
            Detector::IsoForest(f) => f.score(x),
        }
    }

    pub fn score_all(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.score(r)).collect()
    }
}

/// Fits `kind` on reference data split into `groups` (a single group for
/// one-class use). Returns `Ok(None)` for detectors that are not implemented.
pub fn fit_detector(kind: DetectorKind, groups: &[Vec<Vec<f64>>], rng: &mut RngStream) -> Result<Option<Detector>> {
    let pooled: Vec<Vec<f64>> = groups.iter().flatten().cloned().collect();
    Ok(Some(match kind {
        DetectorKind::Mahalanobis => Detector::Mahalanobis(fit_mahalanobis(&pooled, MAHALANOBIS_RIDGE)?),
        DetectorKind::Gmm { k } => Detector::Gmm(fit_gmm(&pooled, k, rng)?),
        DetectorKind::GmmBic { max_k } => {
            Detector::GmmSet(groups.iter().map(|g| fit_gmm_bic(g, max_k, rng).map(|m| m.0)).collect::<Result<_>>()?)
        }
        DetectorKind::Knn { k } => Detector::Knn(fit_knn(&pooled, k)?),
        DetectorKind::IsoForest => Detector::IsoForest(fit_isoforest(&pooled, 100, 256, rng)?),
        DetectorKind::OneClassSvm => return Ok(None),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRow {
    pub task: String,
    pub detector: String,
    pub ood_subset: String,
    /// `None` when the detector is not implemented.
    pub result: Option<DetectorResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorResult {
    pub auc: f64,
    pub tpr_at_tau: f64,
    pub tau: f64,
    pub achieved_fpr: f64,
}

pub fn detector_rows_csv(rows: &[DetectorRow]) -> String {
    let mut s = String::from("task,detector,ood_subset,auc,tpr_at_tau,tau,achieved_fpr\n");
    for r in rows {
        match &r.result {
            Some(v) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{:?},{:?},{:?},{:?}",
                    r.task, r.detector, r.ood_subset, v.auc, v.tpr_at_tau, v.tau, v.achieved_fpr
                );
            }
            None => {
                let _ = writeln!(s, "{},{},{},not implemented,,,", r.task, r.detector, r.ood_subset);
            }
        }
    }
    s
}
