//! Final tables: bootstrap summaries, reuse, percentile deltas, routing
//! activation, suitability, detectors and geometry, as CSV plus one
//! human-readable text report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalstats::{paired_bootstrap, percentile_delta, read_paired_csv, reuse_delta, summaries_to_csv, summaries_to_table, SummaryRow, DEFAULT_PERCENTILES};
use crate::indexer::ID_LABEL;
use crate::manifest::{read_artifact, ArtifactWriter};
use crate::pipeline::{returns_path, BLOCK_FIRST, BLOCK_SECOND};

const REQUIRED: [&str; 10] = [
    "evaluate/methods.csv",
    "evaluate/baseline.csv",
    "evaluate/routing.csv",
    "detect/detectors.csv",
    "diagnose/suitability.csv",
    "diagnose/cosine.csv",
    "diagnose/spread.csv",
    "diagnose/ks_dims.csv",
    "experts/training.csv",
    "pairs/summary.csv",
];

fn rows(text: &str) -> Vec<Vec<&str>> {
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(|l| l.split(',').collect()).collect()
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse().map_err(|e| Error::Parse(format!("{what}: `{s}`: {e}")))
}

/// Writes every report table from the evaluate, detect and diagnose
/// artifacts under `root`. All missing inputs are reported together.
pub fn write_report(root: &Path, cfg: &ExperimentConfig, w: &mut ArtifactWriter) -> Result<()> {
    let missing: Vec<String> = REQUIRED.iter().filter(|r| !root.join(r).exists()).map(|r| r.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let b = cfg.bootstrap.resamples;
    let seed = cfg.bootstrap.seed;
    let mut text = String::from("RESULTS REPORT\n==============\n\n");

    // Paired summaries per method, env and block.
    let methods: Vec<String> = rows(&read_artifact(root, "evaluate/methods.csv")?).iter().map(|r| r[0].to_string()).collect();
    let mut samples = BTreeMap::new();
    for m in &methods {
        samples.insert(m.clone(), read_paired_csv(&read_artifact(root, &returns_path(m))?)?);
    }
    let mut summary_rows = Vec::new();
    let mut pct = String::from("method,env,block,percentile,delta\n");
    for m in &methods {
        for s in &samples[m] {
            summary_rows.push(SummaryRow {
                method: m.clone(),
                env: s.env.clone(),
                block: s.block.clone(),
                summary: paired_bootstrap(s, b, seed)?,
            });
            for (p, d) in percentile_delta(&s.method, &s.baseline, &DEFAULT_PERCENTILES)? {
                let _ = writeln!(pct, "{m},{},{},{p:?},{d:?}", s.env, s.block);
            }
        }
    }
    w.write("report/summary.csv", summaries_to_csv(&summary_rows))?;
    w.write("report/percentiles.csv", pct)?;
    if methods.is_empty() {
        text.push_str("No shift clusters configured: ID-only run, no experts were trained or evaluated.\n\n");
    }
    let first: Vec<SummaryRow> = summary_rows.iter().filter(|r| r.block == BLOCK_FIRST).cloned().collect();
    let _ = writeln!(text, "Paired deltas vs baseline, first seed block ({b} resamples, seed {seed})\n");
    text.push_str(&summaries_to_table(&first));
    text.push('\n');

    // Second encounter and reuse.
    let mut reuse_rows = Vec::new();
    for m in &methods {
        for second in samples[m].iter().filter(|s| s.block == BLOCK_SECOND) {
            if let Some(first) = samples[m].iter().find(|s| s.block == BLOCK_FIRST && s.env == second.env) {
                reuse_rows.push(SummaryRow {
                    method: m.clone(),
                    env: second.env.clone(),
                    block: "second-first".into(),
                    summary: reuse_delta(first, second, b, seed)?,
                });
            }
        }
    }
    if reuse_rows.is_empty() {
        text.push_str("Second seed block not evaluated: second-encounter and reuse tables omitted.\n\n");
    } else {
        let second: Vec<SummaryRow> = summary_rows.iter().filter(|r| r.block == BLOCK_SECOND).cloned().collect();
        text.push_str("Second encounter: paired deltas vs baseline on the second seed block\n\n");
        text.push_str(&summaries_to_table(&second));
        text.push_str("\nReuse: second-block return minus first-block return, paired by seed index\n\n");
        text.push_str(&summaries_to_table(&reuse_rows));
        text.push('\n');
        w.write("report/reuse.csv", summaries_to_csv(&reuse_rows))?;
    }

    // Routing activation (per method, env, block).
    let routing = read_artifact(root, "evaluate/routing.csv")?;
    let mut agg: BTreeMap<(String, String, String), (usize, BTreeMap<String, usize>, usize, usize)> = BTreeMap::new();
    for r in rows(&routing) {
        if r.len() != 8 {
            return Err(Error::Parse("evaluate/routing.csv: expected 8 fields".into()));
        }
        let e = agg.entry((r[0].into(), r[1].into(), r[2].into())).or_default();
        e.0 += r[4].parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?;
        for kv in r[6].split(';').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once(':').ok_or_else(|| Error::Parse(format!("bad route count `{kv}`")))?;
            *e.1.entry(k.to_string()).or_default() += v.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?;
        }
        if r[5] == r[4] {
            e.2 += 1;
            if r[7] == "true" {
                e.3 += 1;
            }
        }
    }
    let mut act = String::from("method,env,block,steps,id_fraction,activations,all_id_episodes,all_id_identical\n");
    text.push_str("Routing activation\n\n");
    let _ = writeln!(text, "{:<22} {:<12} {:<7} {:>8} {:>8}  {}", "method", "env", "block", "ID frac", "all-ID", "activations");
    for ((m, env, block), (steps, counts, all_id, identical)) in &agg {
        let id_frac = counts.get(ID_LABEL).copied().unwrap_or(0) as f64 / *steps as f64;
        let acts: Vec<String> = counts
            .iter()
            .filter(|(k, _)| k.as_str() != ID_LABEL)
            .map(|(k, v)| format!("{k}:{:?}", *v as f64 / *steps as f64))
            .collect();
        let _ = writeln!(act, "{m},{env},{block},{steps},{id_frac:?},{},{all_id},{identical}", acts.join(";"));
        let _ = writeln!(text, "{m:<22} {env:<12} {block:<7} {id_frac:>8.4} {:>8}  {}", format!("{identical}/{all_id}"), acts.join(" "));
    }
    text.push_str("all-ID: episodes routed to ID at every step that are bit-identical to the baseline / all such episodes.\n\n");
    w.write("report/routing.csv", act)?;

    // Suitability joined with the expert's effect on that shift.
    let suit = read_artifact(root, "diagnose/suitability.csv")?;
    let training = read_artifact(root, "experts/training.csv")?;
    let mut acc: BTreeMap<String, String> = BTreeMap::new();
    for r in rows(&training) {
        if r[0] == "harder" {
            acc.insert(r[1].to_string(), r[4].to_string());
        }
    }
    let mut suit_csv = String::from("shift,std_over_mean,degraded,suitable,pair_accuracy,method,delta,p_two_sided,sig\n");
    text.push_str("Shift suitability (baseline consistency) and expert effect, first block\n\n");
    let _ = writeln!(text, "{:<12} {:>9} {:>9} {:>9} {:>8} {:<18} {:>9} {:>9} {:<4}", "shift", "Std/Mean", "degraded", "suitable", "pair acc", "method", "delta", "p", "sig");
    for r in rows(&suit) {
        let shift = r[0];
        let cell = first.iter().find(|s| s.env == shift && (s.method == "harder" || s.method == format!("dual_{shift}")));
        let (method, d, p, sig) = match cell {
            Some(c) => (c.method.clone(), format!("{:?}", c.summary.delta), format!("{:?}", c.summary.p_two_sided), c.summary.label().to_string()),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        let a = acc.get(shift).cloned().unwrap_or_default();
        let _ = writeln!(suit_csv, "{shift},{},{},{},{a},{method},{d},{p},{sig}", r[3], r[6], r[7]);
        let short = |s: &str| s.parse::<f64>().map(|v| format!("{v:.3}")).unwrap_or_else(|_| s.to_string());
        let _ = writeln!(
            text,
            "{shift:<12} {:>9} {:>9} {:>9} {:>8} {method:<18} {:>9} {:>9} {sig:<4}",
            short(r[3]),
            r[6],
            r[7],
            short(&a),
            short(&d),
            short(&p)
        );
    }
    let _ = writeln!(
        text,
        "A shift is suitable when Std/Mean < 0.4 and the baseline mean is below {} x the ID mean.\n",
        cfg.diagnose.degradation_frac
    );
    w.write("report/suitability.csv", suit_csv)?;

    // Detectors.
    let det = read_artifact(root, "detect/detectors.csv")?;
    w.write("report/detectors.csv", &det)?;
    text.push_str("OOD detection (AUC; TPR at the threshold calibrated to the target ID false-positive rate)\n\n");
    let _ = writeln!(text, "{:<15} {:<12} {:<14} {:>8} {:>8} {:>8}", "task", "detector", "ood subset", "AUC", "TPR", "FPR");
    for r in rows(&det) {
        if r[3] == "not implemented" {
            let _ = writeln!(text, "{:<15} {:<12} {:<14} {:>8}", r[0], r[1], r[2], "n/a");
            continue;
        }
        let _ = writeln!(
            text,
            "{:<15} {:<12} {:<14} {:>8.4} {:>8.4} {:>8.4}",
            r[0],
            r[1],
            r[2],
            parse_f64(r[3], "auc")?,
            parse_f64(r[4], "tpr")?,
            parse_f64(r[6], "fpr")?
        );
    }
    text.push('\n');

    // Geometry.
    let cos = read_artifact(root, "diagnose/cosine.csv")?;
    let spread = read_artifact(root, "diagnose/spread.csv")?;
    let ks = read_artifact(root, "diagnose/ks_dims.csv")?;
    w.write("report/cosine.csv", &cos)?;
    w.write("report/spread.csv", &spread)?;
    w.write("report/ks_dims.csv", &ks)?;
    text.push_str("Centroid cosine similarity\n\n");
    let cos_rows = rows(&cos);
    let mut labels: Vec<&str> = cos_rows.iter().map(|r| r[0]).collect();
    labels.dedup();
    let _ = write!(text, "{:<10}", "");
    for l in &labels {
        let _ = write!(text, " {l:>9}");
    }
    text.push('\n');
    for a in &labels {
        let _ = write!(text, "{a:<10}");
        for r in cos_rows.iter().filter(|r| r[0] == *a) {
            let _ = write!(text, " {:>9.4}", parse_f64(r[2], "cosine")?);
        }
        text.push('\n');
    }
    text.push_str("\nSpread (mean distance to own centroid) over centroid separation\n\n");
    let _ = writeln!(text, "{:<10} {:>9} {:>9} {:>12}", "label", "spread", "vs ID", "vs nearest");
    for r in rows(&spread) {
        let short = |s: &str| s.parse::<f64>().map(|v| format!("{v:.3}")).unwrap_or_else(|_| if s.is_empty() { "-".into() } else { s.into() });
        let _ = writeln!(text, "{:<10} {:>9} {:>9} {:>12}", r[0], short(r[1]), short(r[2]), short(r[3]));
    }
    text.push_str("\nTop known-vs-novel KS dimensions\n\n");
    for r in rows(&ks).iter().take(cfg.diagnose.top_ks_dims) {
        let _ = writeln!(text, "  rank {} dim {:>3}  KS {:.4}", r[0], r[1], parse_f64(r[2], "ks")?);
    }

    text.push_str(
        "\nNotes\n\
         - Delta is the mean of per-seed paired differences; CI and two-sided p from the paired bootstrap;\n  \
           p is floored at 1/B.\n\
         - IQM trims floor(n/4) values per side and is the IQM of per-seed deltas (not a difference of IQMs);\n  \
           its CI reuses the mean's resample indices.\n\
         - Percentiles interpolate linearly between order statistics at position (n-1)p/100.\n\
         - P(improve) counts ties as one half.\n\
         - Spread is the mean Euclidean distance to the label's own centroid.\n",
    );
    w.write("report/report.txt", text)?;
    Ok(())
}
