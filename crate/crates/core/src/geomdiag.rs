//! Embedding-geometry diagnostics: centroid cosines, spread-over-separation
//! ratios, per-dimension KS ranking, and the baseline-consistency
//! suitability test for a shift.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indexer::{euclidean, ClusterSet, ID_LABEL};

pub const SUITABILITY_MAX_STD_OVER_MEAN: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub labels: Vec<String>,
    /// Row-major `labels × labels`.
    pub values: Vec<f64>,
}

impl CosineMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.labels.len() + j]
    }

    /// Long-format `label_a,label_b,cosine`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label_a,label_b,cosine\n");
        for (i, a) in self.labels.iter().enumerate() {
            for (j, b) in self.labels.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{:?}", self.get(i, j));
            }
        }
        s
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero-norm vector"));
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(c.clamp(-1.0, 1.0))
}

pub fn centroid_cosine_matrix(clusters: &ClusterSet) -> Result<CosineMatrix> {
    let entries = clusters.entries();
    let n = entries.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = if i == j {
                cosine(&entries[i].centroid, &entries[i].centroid).map(|_| 1.0)?
            } else {
                cosine(&entries[i].centroid, &entries[j].centroid)?
            };
        }
    }
    Ok(CosineMatrix { labels: entries.iter().map(|e| e.label.clone()).collect(), values })
}

/// A ratio whose denominator may vanish.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ratio {
    Value(f64),
    /// Coincident centroids: the ratio is unbounded.
    Coincident,
    /// No comparison cluster exists.
    NotApplicable,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Ratio::Coincident
        } else {
            Ratio::Value(num / den)
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Ratio::Value(v) => Some(*v),
            _ => None,
        }
    }

    fn csv(&self) -> String {
        match self {
            Ratio::Value(v) => format!("{v:?}"),
            Ratio::Coincident => "inf".into(),
            Ratio::NotApplicable => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub label: String,
    /// Mean distance of the label's points to its own centroid.
    pub spread: f64,
    pub ratio_vs_id: Ratio,
    pub ratio_vs_nearest_ood: Ratio,
}

/// Spread-over-separation ratios for every label present in both `points`
/// and `clusters`.
pub fn spread_ratios(points: &BTreeMap<String, Vec<Vec<f64>>>, clusters: &ClusterSet) -> Result<Vec<SpreadRow>> {
    let mut rows = Vec::new();
    for (label, pts) in points {
        let Some(mu) = clusters.centroid(label) else { continue };
        if pts.len() < 2 {
            return Err(Error::invalid(format!("spread of `{label}` needs at least two points")));
        }
        let spread = pts.iter().map(|p| euclidean(p, mu)).sum::<f64>() / pts.len() as f64;
        let ratio_vs_id = match clusters.centroid(ID_LABEL) {
            Some(id) if label != ID_LABEL => Ratio::of(spread, euclidean(mu, id)),
            _ => Ratio::NotApplicable,
        };
        let nearest = clusters
            .entries()
            .iter()
            .filter(|e| e.label != ID_LABEL && &e.label != label)
            .map(|e| euclidean(mu, &e.centroid))
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))));
        let ratio_vs_nearest_ood = match nearest {
            Some(d) if label != ID_LABEL => Ratio::of(spread, d),
            _ => Ratio::NotApplicable,
        };
        rows.push(SpreadRow { label: label.clone(), spread, ratio_vs_id, ratio_vs_nearest_ood });
    }
    Ok(rows)
}

pub fn spread_rows_csv(rows: &[SpreadRow]) -> String {
    let mut s = String::from("label,spread,ratio_vs_id,ratio_vs_nearest_ood\n");
    for r in rows {
        let _ = writeln!(s, "{},{:?},{},{}", r.label, r.spread, r.ratio_vs_id.csv(), r.ratio_vs_nearest_ood.csv());
    }
    s
}

/// Two-sample Kolmogorov–Smirnov statistic, evaluated exactly with integer
/// CDF counts.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("KS needs non-empty samples"));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as i128, sb.len() as i128);
    let mut best: i128 = 0;
    for &x in sa.iter().chain(&sb) {
        let ca = sa.partition_point(|&v| v <= x) as i128;
        let cb = sb.partition_point(|&v| v <= x) as i128;
        best = best.max((ca * nb - cb * na).abs());
    }
    Ok(best as f64 / (na * nb) as f64)
}

/// Dimensions ranked by KS statistic between two groups (descending; ties to
/// the lower index), truncated to `top`.
pub fn rank_dims(known: &[Vec<f64>], novel: &[Vec<f64>], top: usize) -> Result<Vec<(usize, f64)>> {
    let d = known.first().map(Vec::len).ok_or_else(|| Error::invalid("empty known sample"))?;
    if novel.iter().chain(known).any(|r| r.len() != d) {
        return Err(Error::invalid("samples differ in dimension"));
    }
    let mut ks = Vec::with_capacity(d);
    for j in 0..d {
        let a: Vec<f64> = known.iter().map(|r| r[j]).collect();
        let b: Vec<f64> = novel.iter().map(|r| r[j]).collect();
        ks.push((j, ks_statistic(&a, &b)?));
    }
    ks.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ks.truncate(top);
    Ok(ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suitability {
    pub mean: f64,
    pub std: f64,
    /// `None` when the mean is not positive.
    pub std_over_mean: Option<f64>,
    pub degraded: bool,
    pub suitable: bool,
}

/// A shift is suitable for expert growth when the baseline fails
/// consistently: `std/mean < 0.4` and `mean < degradation_frac · id_mean`.
pub fn shift_suitability(returns: &[f64], id_mean: f64, degradation_frac: f64) -> Result<Suitability> {
    if returns.len() < 2 {
        return Err(Error::invalid("suitability needs at least two returns"));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let std_over_mean = (mean > 0.0).then(|| std / mean);
    let degraded = mean < degradation_frac * id_mean;
    let suitable = degraded && std_over_mean.is_some_and(|r| r < SUITABILITY_MAX_STD_OVER_MEAN);
    Ok(Suitability { mean, std, std_over_mean, degraded, suitable })
}
