//! Paired evaluation statistics: bootstrap CIs and p-values, IQM,
//! P(improve), percentile deltas and second-vs-first reuse differences.
//!
//! Every statistic is a pure function of its inputs and the bootstrap seed.
//! Percentiles use linear interpolation at position `(n - 1) p` of the sorted
//! sample.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 42;
pub const DEFAULT_PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];

/// Linear-interpolation quantile of an ascending sample, `q ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub env: String,
    pub block: String,
    pub seeds: Vec<u64>,
    pub method: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl PairedSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.seeds.len();
        if self.method.len() != n || self.baseline.len() != n {
            return Err(Error::invalid(format!("{}/{}: paired arrays differ in length", self.env, self.block)));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != n {
            return Err(Error::invalid(format!("{}/{}: duplicate seeds", self.env, self.block)));
        }
        Ok(())
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.method.iter().zip(&self.baseline).map(|(m, b)| m - b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub n: usize,
    pub delta: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_two_sided: f64,
    pub iqm_delta: f64,
    pub iqm_ci_low: f64,
    pub iqm_ci_high: f64,
    pub p_improve: f64,
    pub resamples: usize,
    pub rng_seed: u64,
}

impl BootstrapSummary {
    pub fn label(&self) -> &'static str {
        significance_label(self.p_two_sided, self.delta)
    }

    pub fn significant(&self) -> bool {
        self.p_two_sided < 0.05
    }
}

/// `***` for p < 0.001, `*` for p < 0.05, `NS` otherwise; significant
/// negative effects are labelled `NEG`.
pub fn significance_label(p: f64, delta: f64) -> &'static str {
    if p < 0.05 && delta < 0.0 {
        "NEG"
    } else if p < 0.001 {
        "***"
    } else if p < 0.05 {
        "*"
    } else {
        "NS"
    }
}

/// Trims `floor(n/4)` values from each end and averages the rest.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.len() < 4 {
        return Err(Error::invalid(format!("IQM needs at least 4 values, got {}", values.len())));
    }
    let v = sorted(values);
    let trim = values.len() / 4;
    Ok(mean(&v[trim..v.len() - trim]))
}

/// `(#{d > 0} + 0.5 #{d = 0}) / n`.
pub fn p_improve(deltas: &[f64]) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::invalid("P(improve) needs at least one delta"));
    }
    let pos = deltas.iter().filter(|&&d| d > 0.0).count() as f64;
    let ties = deltas.iter().filter(|&&d| d == 0.0).count() as f64;
    Ok((pos + 0.5 * ties) / deltas.len() as f64)
}

/// Bootstrap over a vector of per-seed differences. Resample indices are
/// drawn sequentially from one ChaCha stream seeded with `rng_seed`; the IQM
/// CI reuses the same resamples.
pub fn bootstrap_differences(d: &[f64], resamples: usize, rng_seed: u64) -> Result<BootstrapSummary> {
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid(format!("paired bootstrap needs n >= 2, got {n}")));
    }
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut means = Vec::with_capacity(resamples);
    let mut iqms = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; n];
    let with_iqm = n >= 4;
    for _ in 0..resamples {
        for slot in buf.iter_mut() {
            *slot = d[rng.random_range(0..n)];
        }
        means.push(mean(&buf));
        if with_iqm {
            iqms.push(iqm(&buf)?);
        }
    }
    let le = means.iter().filter(|&&m| m <= 0.0).count() as f64 / resamples as f64;
    let ge = means.iter().filter(|&&m| m >= 0.0).count() as f64 / resamples as f64;
    let p = (2.0 * le.min(ge)).clamp(1.0 / resamples as f64, 1.0);
    let means = sorted(&means);
    let (iqm_delta, iqm_lo, iqm_hi) = if with_iqm {
        let iqms = sorted(&iqms);
        (iqm(d)?, quantile_sorted(&iqms, 0.025), quantile_sorted(&iqms, 0.975))
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(BootstrapSummary {
        n,
        delta: mean(d),
        ci_low: quantile_sorted(&means, 0.025),
        ci_high: quantile_sorted(&means, 0.975),
        p_two_sided: p,
        iqm_delta,
        iqm_ci_low: iqm_lo,
        iqm_ci_high: iqm_hi,
        p_improve: p_improve(d)?,
        resamples,
        rng_seed,
    })
}

pub fn paired_bootstrap(sample: &PairedSample, resamples: usize, rng_seed: u64) -> Result<BootstrapSummary> {
    sample.validate()?;
    bootstrap_differences(&sample.deltas(), resamples, rng_seed)
}

/// `percentile_p(method) - percentile_p(baseline)` for each `p` in percent.
pub fn percentile_delta(method: &[f64], baseline: &[f64], ps: &[f64]) -> Result<Vec<(f64, f64)>> {
    if method.is_empty() || baseline.is_empty() {
        return Err(Error::invalid("percentile delta needs non-empty groups"));
    }
    let (m, b) = (sorted(method), sorted(baseline));
    Ok(ps
        .iter()
        .map(|&p| (p, quantile_sorted(&m, p / 100.0) - quantile_sorted(&b, p / 100.0)))
        .collect())
}

/// Bootstrap of `second.method[i] - first.method[i]`, pairing the two seed
/// blocks by position.
pub fn reuse_delta(first: &PairedSample, second: &PairedSample, resamples: usize, rng_seed: u64) -> Result<BootstrapSummary> {
    first.validate()?;
    second.validate()?;
    if first.method.len() != second.method.len() {
        return Err(Error::invalid(format!(
            "reuse blocks differ in size ({} vs {})",
            first.method.len(),
            second.method.len()
        )));
    }
    let d: Vec<f64> = second.method.iter().zip(&first.method).map(|(s, f)| s - f).collect();
    bootstrap_differences(&d, resamples, rng_seed)
}

/// Reads `env,block,seed,baseline_return,method_return` rows, grouped by
/// `(env, block)` with rows kept in file order.
pub fn read_paired_csv(text: &str) -> Result<Vec<PairedSample>> {
    let mut groups: BTreeMap<(String, String), PairedSample> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("env")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("line {}: expected 5 fields, got {}", i + 1, f.len())));
        }
        let perr = |e: &dyn std::fmt::Display| Error::Parse(format!("line {}: {e}", i + 1));
        let seed: u64 = f[2].parse().map_err(|e| perr(&e))?;
        let baseline: f64 = f[3].parse().map_err(|e| perr(&e))?;
        let method: f64 = f[4].parse().map_err(|e| perr(&e))?;
        let g = groups.entry((f[0].to_string(), f[1].to_string())).or_insert_with(|| PairedSample {
            env: f[0].to_string(),
            block: f[1].to_string(),
            seeds: vec![],
            method: vec![],
            baseline: vec![],
        });
        g.seeds.push(seed);
        g.baseline.push(baseline);
        g.method.push(method);
    }
    let out: Vec<PairedSample> = groups.into_values().collect();
    for s in &out {
        s.validate()?;
    }
    Ok(out)
}

pub fn write_paired_csv(samples: &[PairedSample]) -> String {
    let mut s = String::from("env,block,seed,baseline_return,method_return\n");
    for p in samples {
        for i in 0..p.seeds.len() {
            let _ = writeln!(s, "{},{},{},{:?},{:?}", p.env, p.block, p.seeds[i], p.baseline[i], p.method[i]);
        }
    }
    s
}

/// One row of a summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub env: String,
    pub block: String,
    pub summary: BootstrapSummary,
}

pub const SUMMARY_HEADER: &str =
    "method,env,block,n,delta,ci_low,ci_high,p_two_sided,sig,iqm_delta,iqm_ci_low,iqm_ci_high,p_improve,resamples,rng_seed";

pub fn summaries_to_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        let b = &r.summary;
        let _ = writeln!(
            s,
            "{},{},{},{},{:?},{:?},{:?},{:?},{},{:?},{:?},{:?},{:?},{},{}",
            r.method,
            r.env,
            r.block,
            b.n,
            b.delta,
            b.ci_low,
            b.ci_high,
            b.p_two_sided,
            b.label(),
            b.iqm_delta,
            b.iqm_ci_low,
            b.iqm_ci_high,
            b.p_improve,
            b.resamples,
            b.rng_seed
        );
    }
    s
}

/// Fixed-width table with significance marks, one row per summary.
pub fn summaries_to_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<22} {:<12} {:<7} {:>9} {:>21} {:>9} {:<4} {:>9} {:>6}\n",
        "method", "env", "block", "delta", "95% CI", "p", "sig", "IQM d", "P(imp)"
    );
    for r in rows {
        let b = &r.summary;
        let _ = writeln!(
            s,
            "{:<22} {:<12} {:<7} {:>9.3} {:>21} {:>9.4} {:<4} {:>9.3} {:>6.3}",
            r.method,
            r.env,
            r.block,
            b.delta,
            format!("[{:.3}, {:.3}]", b.ci_low, b.ci_high),
            b.p_two_sided,
            b.label(),
            b.iqm_delta,
            b.p_improve
        );
    }
    s.push_str("IQM trims floor(n/4) per side and is computed on per-seed deltas (not a difference of IQMs).\n");
    s
}
