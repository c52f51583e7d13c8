//! Nearest-centroid problem indexing with the in-distribution label as a
//! first-class candidate (the reject option).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::error::{Error, Result};

/// Reserved label of the in-distribution cluster.
pub const ID_LABEL: &str = "ID";

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn compute_centroid(embeddings: &[&[f64]]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or_else(|| Error::invalid("centroid of an empty set"))?;
    let d = first.len();
    let mut acc = vec![0.0; d];
    for h in embeddings {
        if h.len() != d {
            return Err(Error::invalid("embeddings of unequal length"));
        }
        for (a, x) in acc.iter_mut().zip(h.iter()) {
            *a += x;
        }
    }
    let n = embeddings.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub label: String,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    entries: Vec<ClusterEntry>,
    pub id_bias: f64,
}

impl ClusterSet {
    /// Entries are kept sorted by label. The ID entry is mandatory.
    pub fn new(entries: Vec<ClusterEntry>, id_bias: f64) -> Result<Self> {
        if !(id_bias.is_finite() && id_bias > 0.0) {
            return Err(Error::config(format!("id_bias must be > 0, got {id_bias}")));
        }
        let mut entries = entries;
        entries.sort_by(|a, b| a.label.cmp(&b.label));
        if entries.windows(2).any(|w| w[0].label == w[1].label) {
            return Err(Error::config("cluster labels must be unique"));
        }
        if !entries.iter().any(|e| e.label == ID_LABEL) {
            return Err(Error::config("cluster set must contain the ID entry"));
        }
        let d = entries[0].centroid.len();
        if entries.iter().any(|e| e.centroid.len() != d) {
            return Err(Error::config("all centroids must have the same dimension"));
        }
        Ok(Self { entries, id_bias })
    }

    pub fn entries(&self) -> &[ClusterEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries[0].centroid.len()
    }

    pub fn centroid(&self, label: &str) -> Option<&[f64]> {
        self.entries.iter().find(|e| e.label == label).map(|e| e.centroid.as_slice())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    /// Non-ID labels in lexicographic order.
    pub fn shift_labels(&self) -> Vec<String> {
        self.labels().filter(|l| *l != ID_LABEL).map(str::to_string).collect()
    }

    /// A copy restricted to `keep` (ID is always retained).
    pub fn subset(&self, keep: &[&str]) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .filter(|e| e.label == ID_LABEL || keep.contains(&e.label.as_str()))
            .cloned()
            .collect();
        Self::new(entries, self.id_bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub assigned: String,
    /// Unbiased Euclidean distance to each centroid.
    pub distances: BTreeMap<String, f64>,
}

impl RoutingDecision {
    pub fn is_id(&self) -> bool {
        self.assigned == ID_LABEL
    }

    pub fn to_label(label: &str) -> Self {
        Self { assigned: label.to_string(), distances: BTreeMap::new() }
    }
}

/// Assigns `h` to the centroid with the smallest score, where the ID score is
/// its distance scaled by `id_bias`. Ties go to ID, then to the
/// lexicographically smallest label.
pub fn route(h: &Embedding, clusters: &ClusterSet) -> Result<RoutingDecision> {
    if h.0.len() != clusters.dim() {
        return Err(Error::invalid(format!("embedding has {} dims, clusters have {}", h.0.len(), clusters.dim())));
    }
    let mut distances = BTreeMap::new();
    let mut best: Option<(f64, bool, &str)> = None;
    for e in clusters.entries() {
        let dist = euclidean(&h.0, &e.centroid);
        distances.insert(e.label.clone(), dist);
        let is_id = e.label == ID_LABEL;
        let score = if is_id { clusters.id_bias * dist } else { dist };
        let better = match best {
            None => true,
            Some((s, best_is_id, best_label)) => {
                score < s || (score == s && ((is_id && !best_is_id) || (is_id == best_is_id && e.label.as_str() < best_label)))
            }
        };
        if better {
            best = Some((score, is_id, &e.label));
        }
    }
    let assigned = best.map(|b| b.2.to_string()).expect("cluster set is never empty");
    Ok(RoutingDecision { assigned, distances })
}

/// Per-source-label routing fractions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingRow {
    pub label: String,
    pub count: usize,
    pub reject_frac: f64,
    /// Fraction assigned to each non-ID cluster, in cluster-label order.
    pub assign_fracs: BTreeMap<String, f64>,
    pub total_activation: f64,
}

pub fn routing_stats(embeddings: &[(String, Embedding)], clusters: &ClusterSet) -> Result<Vec<RoutingRow>> {
    if embeddings.is_empty() {
        return Err(Error::invalid("routing stats of an empty set"));
    }
    let shift_labels = clusters.shift_labels();
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (label, h) in embeddings {
        let decision = route(h, clusters)?;
        *counts.entry(label.clone()).or_default().entry(decision.assigned).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(label, by_target)| {
            let count: usize = by_target.values().sum();
            let n = count as f64;
            let rejected = by_target.get(ID_LABEL).copied().unwrap_or(0);
            let assign_fracs = shift_labels
                .iter()
                .map(|l| (l.clone(), by_target.get(l).copied().unwrap_or(0) as f64 / n))
                .collect();
            RoutingRow {
                label,
                count,
                reject_frac: rejected as f64 / n,
                assign_fracs,
                total_activation: (count - rejected) as f64 / n,
            }
        })
        .collect())
}

pub fn routing_stats_csv(rows: &[RoutingRow], clusters: &ClusterSet) -> String {
    let shift_labels = clusters.shift_labels();
    let mut out = String::from("label,reject_frac");
    for l in &shift_labels {
        out.push_str(&format!(",assign_{l}"));
    }
    out.push_str(",total_activation\n");
    for r in rows {
        out.push_str(&format!("{},{:?}", r.label, r.reject_frac));
        for l in &shift_labels {
            out.push_str(&format!(",{:?}", r.assign_fracs.get(l).copied().unwrap_or(0.0)));
        }
        out.push_str(&format!(",{:?}\n", r.total_activation));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub label: String,
    /// Mean distance to each centroid, keyed by centroid label.
    pub mean_distance: BTreeMap<String, f64>,
    pub nearest: String,
}

pub fn centroid_distance_table(clusters: &ClusterSet, by_label: &BTreeMap<String, Vec<Embedding>>) -> Result<Vec<DistanceRow>> {
    by_label
        .iter()
        .map(|(label, points)| {
            if points.is_empty() {
                return Err(Error::invalid(format!("no embeddings for `{label}`")));
            }
            let mean_distance: BTreeMap<String, f64> = clusters
                .entries()
                .iter()
                .map(|e| {
                    let total: f64 = points.iter().map(|h| euclidean(&h.0, &e.centroid)).sum();
                    (e.label.clone(), total / points.len() as f64)
                })
                .collect();
            let nearest = mean_distance
                .iter()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(l, _)| l.clone())
                .expect("non-empty cluster set");
            Ok(DistanceRow { label: label.clone(), mean_distance, nearest })
        })
        .collect()
}
