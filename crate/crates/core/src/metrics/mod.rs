//! Individual-level (Top-k) and population-level (CSMF) scoring, plus the
//! per-cause and narrative-length breakdowns used in reports.

mod tables;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{labels_of, AgeGroup, CauseCodebook, CauseIndex, PredictionSet, VARecord};
use crate::error::{Error, Result};

pub use tables::{render_cause_table, render_metric_table, render_summary_table, Metric};

/// Default narrative-length bucket boundaries, in characters.
pub const DEFAULT_LENGTH_BOUNDARIES: [usize; 3] = [250, 500, 1000];

fn require_labeled(records: &[VARecord]) -> Result<Vec<CauseIndex>> {
    if records.is_empty() {
        return Err(Error::validation("cannot score an empty cohort"));
    }
    labels_of(records)
}

/// Fraction of records whose true cause is among the `k` highest-ranked
/// causes. Ranked lists take precedence over probability vectors.
pub fn top_k_accuracy(preds: &PredictionSet, records: &[VARecord], k: usize) -> Result<f64> {
    let labels = require_labeled(records)?;
    let mut hits = 0usize;
    for (r, &y) in records.iter().zip(&labels) {
        let ranking = preds.require(&r.id)?.ranking();
        if ranking.iter().take(k).any(|&c| c == y) {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Mean predicted probability per cause over `records`. Cases with only a
/// ranked list contribute a rank-1 one-hot vector; the flag reports whether
/// that happened.
pub fn predicted_csmf(preds: &PredictionSet, records: &[VARecord]) -> Result<(Vec<f64>, bool)> {
    let c = preds.n_causes();
    let mut sum = vec![0.0; c];
    let mut one_hot = false;
    for r in records {
        let pred = preds.require(&r.id)?;
        one_hot |= pred.probs.is_none();
        let dense = pred.dense_or_one_hot(c).expect("predictions are never empty");
        for (s, p) in sum.iter_mut().zip(dense.as_slice()) {
            *s += p;
        }
    }
    let n = records.len() as f64;
    Ok((sum.into_iter().map(|s| s / n).collect(), one_hot))
}

/// True cause fractions of a labeled cohort over `n_causes` causes.
pub fn true_csmf(records: &[VARecord], n_causes: usize) -> Result<Vec<f64>> {
    let labels = require_labeled(records)?;
    let mut counts = vec![0.0; n_causes];
    for y in labels {
        if y >= n_causes {
            return Err(Error::validation(format!("true cause {y} outside {n_causes} causes")));
        }
        counts[y] += 1.0;
    }
    let n = records.len() as f64;
    Ok(counts.into_iter().map(|k| k / n).collect())
}

/// CSMF accuracy between a predicted and a true cause distribution:
/// one minus the L1 distance scaled by its maximum, `2 (1 - min true)`.
pub fn csmf_accuracy_from(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::validation("CSMF vectors must have equal, nonzero length"));
    }
    let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let denom = 2.0 * (1.0 - min);
    if denom <= 0.0 {
        return Err(Error::validation(
            "CSMF accuracy is undefined when one cause holds all true mass and no other cause exists",
        ));
    }
    let l1: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok((1.0 - l1 / denom).clamp(0.0, 1.0))
}

/// CSMF accuracy of a prediction set on a labeled cohort.
pub fn csmf_accuracy(preds: &PredictionSet, records: &[VARecord]) -> Result<f64> {
    let truth = true_csmf(records, preds.n_causes())?;
    let (pred, _) = predicted_csmf(preds, records)?;
    csmf_accuracy_from(&pred, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseAccuracy {
    pub cause: CauseIndex,
    pub label: String,
    pub top1: f64,
    pub n: usize,
}

/// Top-1 accuracy restricted to each true cause. Causes absent from the
/// cohort are omitted.
pub fn per_cause_report(
    preds: &PredictionSet,
    records: &[VARecord],
) -> Result<BTreeMap<CauseIndex, (f64, usize)>> {
    let labels = require_labeled(records)?;
    let mut tally: BTreeMap<CauseIndex, (usize, usize)> = BTreeMap::new();
    for (r, &y) in records.iter().zip(&labels) {
        let hit = preds.require(&r.id)?.top1() == Some(y);
        let e = tally.entry(y).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    }
    Ok(tally.into_iter().map(|(c, (h, n))| (c, (h as f64 / n as f64, n))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub label: String,
    pub top1: f64,
    pub n: usize,
}

/// Narrative-length stratified Top-1 accuracy, with its pooling scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub scope: String,
    pub buckets: Vec<LengthBucket>,
}

fn bucket_labels(boundaries: &[usize]) -> Vec<String> {
    let mut labels = Vec::with_capacity(boundaries.len() + 1);
    labels.push(format!("<={}", boundaries[0]));
    for w in boundaries.windows(2) {
        labels.push(format!("{}-{}", w[0] + 1, w[1]));
    }
    labels.push(format!(">{}", boundaries[boundaries.len() - 1]));
    labels
}

/// Top-1 accuracy per narrative-length bucket: `<= b1`, `b1+1 ..= b2`, ...,
/// `> bn`, plus an `absent` bucket for records without a narrative. Lengths
/// are character counts. Empty buckets are omitted.
pub fn narrative_length_report(
    preds: &PredictionSet,
    records: &[VARecord],
    boundaries: &[usize],
) -> Result<Vec<LengthBucket>> {
    if boundaries.is_empty() {
        return Err(Error::validation("narrative-length boundaries must not be empty"));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("narrative-length boundaries must be strictly increasing"));
    }
    let labels = require_labeled(records)?;
    let names = bucket_labels(boundaries);
    // last slot is "absent"
    let mut tally = vec![(0usize, 0usize); names.len() + 1];
    for (r, &y) in records.iter().zip(&labels) {
        let slot = match r.narrative_len() {
            None => names.len(),
            Some(len) => boundaries.iter().position(|&b| len <= b).unwrap_or(boundaries.len()),
        };
        let hit = preds.require(&r.id)?.top1() == Some(y);
        tally[slot].0 += hit as usize;
        tally[slot].1 += 1;
    }
    Ok(names
        .into_iter()
        .chain(std::iter::once("absent".to_owned()))
        .zip(tally)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(label, (h, n))| LengthBucket { label, top1: h as f64 / n as f64, n })
        .collect())
}

/// Scores for one method on one cohort (usually one held-out site).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub site: Option<String>,
    pub n: usize,
    pub top1: f64,
    pub top5: Option<f64>,
    pub csmf: f64,
    /// Set when some predictions were ranked-only and CSMF used their
    /// rank-1 one-hot vectors.
    pub one_hot_csmf: bool,
    pub per_cause_top1: Vec<CauseAccuracy>,
    pub length_buckets: LengthReport,
    /// Share of records with a narrative.
    pub narrative_share: f64,
    /// Mean narrative word count among records that have one.
    pub avg_words: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub top5: bool,
    pub length_boundaries: Vec<usize>,
}

impl EvalOptions {
    /// Top-5 is suppressed when there are at most five causes.
    pub fn for_codebook(codebook: &CauseCodebook) -> Self {
        EvalOptions {
            top5: codebook.age_group() != AgeGroup::Neonate && codebook.len() > 5,
            length_boundaries: DEFAULT_LENGTH_BOUNDARIES.to_vec(),
        }
    }
}

pub fn evaluate(
    preds: &PredictionSet,
    records: &[VARecord],
    codebook: &CauseCodebook,
    site: Option<&str>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let top1 = top_k_accuracy(preds, records, 1)?;
    let top5 = if opts.top5 { Some(top_k_accuracy(preds, records, 5)?) } else { None };
    let truth = true_csmf(records, preds.n_causes())?;
    let (pred, one_hot_csmf) = predicted_csmf(preds, records)?;
    let csmf = csmf_accuracy_from(&pred, &truth)?;
    let per_cause_top1 = per_cause_report(preds, records)?
        .into_iter()
        .map(|(cause, (top1, n))| CauseAccuracy {
            cause,
            label: codebook.label(cause).unwrap_or("?").to_owned(),
            top1,
            n,
        })
        .collect();
    let buckets = narrative_length_report(preds, records, &opts.length_boundaries)?;
    let with_text: Vec<&str> = records.iter().filter_map(|r| r.narrative.as_deref()).collect();
    let avg_words = if with_text.is_empty() {
        0.0
    } else {
        with_text.iter().map(|t| t.split_whitespace().count()).sum::<usize>() as f64 / with_text.len() as f64
    };
    Ok(EvalReport {
        method: preds.method.clone(),
        site: site.map(str::to_owned),
        n: records.len(),
        top1,
        top5,
        csmf,
        one_hot_csmf,
        per_cause_top1,
        length_buckets: LengthReport {
            scope: match site {
                Some(s) => format!("site {s}, method {}", preds.method),
                None => format!("all records, method {}", preds.method),
            },
            buckets,
        },
        narrative_share: with_text.len() as f64 / records.len() as f64,
        avg_words,
    })
}

/// Mean and sample standard deviation of one metric across sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pooled {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Pooled {
    pub fn of(values: &[f64]) -> Option<Pooled> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Pooled { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub top1: Pooled,
    pub top5: Option<Pooled>,
    pub csmf: Pooled,
}

/// Pools per-site reports by method, in first-seen method order.
pub fn summarize(reports: &[EvalReport]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .filter_map(|m| {
            let rs: Vec<&EvalReport> = reports.iter().filter(|r| r.method == m).collect();
            let top1: Vec<f64> = rs.iter().map(|r| r.top1).collect();
            let csmf: Vec<f64> = rs.iter().map(|r| r.csmf).collect();
            let top5: Option<Vec<f64>> = rs.iter().map(|r| r.top5).collect();
            Some(MethodSummary {
                method: m.to_owned(),
                top1: Pooled::of(&top1)?,
                top5: top5.and_then(|v| Pooled::of(&v)),
                csmf: Pooled::of(&csmf)?,
            })
        })
        .collect()
}
