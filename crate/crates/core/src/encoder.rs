//! Frozen representation pipeline: stack the last `k` observations, lift them
//! through a fixed random `tanh` layer and project onto principal components.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_FEATURE_DIM: usize = 128;

/// `k` consecutive observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsWindow {
    pub frames: Vec<Observation>,
}

impl ObsWindow {
    /// Window ending at step `t` of `history`. Steps before `k - 1` repeat the
    /// earliest frame.
    pub fn ending_at(history: &[Observation], t: usize, k: usize) -> Result<Self> {
        if t >= history.len() {
            return Err(Error::invalid(format!("window end {t} beyond history of {}", history.len())));
        }
        let frames = (0..k)
            .map(|i| {
                let back = k - 1 - i;
                history[t.saturating_sub(back)].clone()
            })
            .collect();
        Ok(Self { frames })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.values().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFeature(pub Vec<f64>);

/// Fixed random layer `tanh(M w + c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub window: usize,
    pub obs_dim: usize,
    pub feature_dim: usize,
    /// Row-major `feature_dim x (window * obs_dim)`.
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Featurizer {
    /// Draws `M ~ N(0, gain^2 / in_dim)` and `c ~ U(-1, 1)` from `seed`.
    pub fn generate(seed: u64, window: usize, obs_dim: usize, feature_dim: usize, gain: f64) -> Self {
        let mut rng = rng::stream(seed.wrapping_add(1), Purpose::Constants);
        let in_dim = window * obs_dim;
        let normal = Normal::new(0.0, gain / (in_dim as f64).sqrt()).expect("positive std");
        let matrix = (0..feature_dim * in_dim).map(|_| normal.sample(&mut rng)).collect();
        let offset = (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { window, obs_dim, feature_dim, matrix, offset }
    }

    pub fn input_dim(&self) -> usize {
        self.window * self.obs_dim
    }

    pub fn featurize_window(&self, w: &ObsWindow) -> Result<RawFeature> {
        if w.frames.len() != self.window || w.frames.iter().any(|f| f.len() != self.obs_dim) {
            return Err(Error::invalid(format!(
                "window must hold {} frames of length {}",
                self.window, self.obs_dim
            )));
        }
        Ok(self.featurize_flat(&w.flatten()))
    }

    fn featurize_flat(&self, flat: &[f64]) -> RawFeature {
        let in_dim = self.input_dim();
        let values = self
            .matrix
            .chunks_exact(in_dim)
            .zip(&self.offset)
            .map(|(row, c)| (row.iter().zip(flat).map(|(m, x)| m * x).sum::<f64>() + c).tanh())
            .collect();
        RawFeature(values)
    }

    /// Feature of the window ending at each step of `history`.
    pub fn featurize_history(&self, history: &[Observation]) -> Result<Vec<RawFeature>> {
        (0..history.len())
            .map(|t| self.featurize_window(&ObsWindow::ending_at(history, t, self.window)?))
            .collect()
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues (unsorted) and eigenvectors as columns of a row-major matrix.
pub fn symmetric_eigen(a: &[f64], n: usize, tol: f64) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| m[i * n + i]).collect();
    (eigenvalues, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `d x feature_dim`, orthonormal rows.
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Sample covariance (divisor `n - 1`) of row vectors, row-major `p x p`.
pub fn covariance(rows: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let p = mean.len();
    let n = rows.len();
    let mut cov = vec![0.0; p * p];
    for row in rows {
        for i in 0..p {
            let di = row[i] - mean[i];
            for j in i..p {
                cov[i * p + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..p {
        for j in i..p {
            let v = cov[i * p + j] / denom;
            cov[i * p + j] = v;
            cov[j * p + i] = v;
        }
    }
    cov
}

pub fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let p = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; p];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

impl PcaModel {
    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let p = self.feature_dim();
        &self.components[i * p..(i + 1) * p]
    }

    pub fn embed(&self, raw: &RawFeature) -> Result<Embedding> {
        let p = self.feature_dim();
        if raw.0.len() != p {
            return Err(Error::invalid(format!("feature length {} != pca input {p}", raw.0.len())));
        }
        let centered: Vec<f64> = raw.0.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(Embedding(
            self.components.chunks_exact(p).map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum()).collect(),
        ))
    }

    /// Maps an embedding back to feature space, `mean + C^T h`.
    pub fn reconstruct(&self, h: &Embedding) -> Vec<f64> {
        let p = self.feature_dim();
        let mut out = self.mean.clone();
        for (row, coef) in self.components.chunks_exact(p).zip(&h.0) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += coef * c;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = self.feature_dim();
        let _ = writeln!(s, "# pca v1");
        let _ = writeln!(s, "d {} features {}", self.d, p);
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "mean {}", join(&self.mean));
        let _ = writeln!(s, "eigenvalues {}", join(&self.eigenvalues));
        for i in 0..self.d {
            let _ = writeln!(s, "component {}", join(self.component(i)));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty pca file".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "d" || parts[2] != "features" {
            return Err(Error::Parse(format!("bad pca header `{header}`")));
        }
        let d: usize = parts[1].parse().map_err(|e| Error::Parse(format!("{e}")))?;
        let p: usize = parts[3].parse().map_err(|e| Error::Parse(format!("{e}")))?;
        let parse_row = |line: Option<&str>, tag: &str, len: usize| -> Result<Vec<f64>> {
            let line = line.ok_or_else(|| Error::Parse(format!("missing `{tag}` row")))?;
            let mut it = line.split_whitespace();
            if it.next() != Some(tag) {
                return Err(Error::Parse(format!("expected `{tag}` row")));
            }
            let row: Vec<f64> = it
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{tag}: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != len {
                return Err(Error::Parse(format!("`{tag}` row has {} values, expected {len}", row.len())));
            }
            Ok(row)
        };
        let mean = parse_row(lines.next(), "mean", p)?;
        let eigenvalues = parse_row(lines.next(), "eigenvalues", d)?;
        let mut components = Vec::with_capacity(d * p);
        for _ in 0..d {
            components.extend(parse_row(lines.next(), "component", p)?);
        }
        Ok(Self { mean, components, eigenvalues, d })
    }
}

pub fn fit_pca(features: &[Vec<f64>], d: usize) -> Result<PcaModel> {
    let n = features.len();
    if d == 0 || n <= d {
        return Err(Error::invalid(format!("pca needs n > d >= 1 (n = {n}, d = {d})")));
    }
    let p = features[0].len();
    if d > p {
        return Err(Error::invalid(format!("cannot keep {d} components of {p}-dimensional data")));
    }
    if features.iter().any(|r| r.len() != p || r.iter().any(|x| !x.is_finite())) {
        return Err(Error::invalid("pca input must be finite with equal row lengths"));
    }
    let mean = column_means(features);
    let cov = covariance(features, &mean);
    let (vals, vecs) = symmetric_eigen(&cov, p, 1e-13);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(d * p);
    let mut eigenvalues = Vec::with_capacity(d);
    for &j in order.iter().take(d) {
        let mut col: Vec<f64> = (0..p).map(|i| vecs[i * p + j]).collect();
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= norm);
        let pivot = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map_or(0.0, |(_, v)| *v);
        if pivot < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        components.extend(col);
        eigenvalues.push(vals[j].max(0.0));
    }
    Ok(PcaModel { mean, components, eigenvalues, d })
}

/// A labelled point of the 2-D export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// First two embedding coordinates of each labelled embedding.
pub fn project2d(embeddings: &[(String, Embedding)]) -> Result<Vec<PlotPoint>> {
    embeddings
        .iter()
        .map(|(label, h)| {
            if h.0.len() < 2 {
                return Err(Error::invalid("2-D projection needs embeddings with d >= 2"));
            }
            Ok(PlotPoint { label: label.clone(), x: h.0[0], y: h.0[1] })
        })
        .collect()
}
