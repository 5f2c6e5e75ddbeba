//! Embedding classifier, prior baseline, and the two ensembles.
//!
//! The classifier is multinomial logistic regression fitted by full-batch
//! gradient descent. Each iteration tries a Barzilai-Borwein step first and
//! halves it until the Armijo condition holds, so the loss never increases.
//! Gradients are accumulated over fixed-size chunks and summed in chunk
//! order, which keeps results identical with and without threading.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::domain::{argmax, CauseIndex, Prediction, PredictionSet, PrevalenceVector, ProbVector, VARecord};
use crate::error::{Error, Result};
use crate::ingest::EmbeddingTable;
use crate::metrics::csmf_accuracy_from;
use crate::par;

const CHUNK: usize = 256;
const ARMIJO_C: f64 = 1e-4;
const CSMF_TIE_TOL: f64 = 1e-12;

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const DEFAULT_GRID_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRegConfig {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_max_iter() -> usize {
    2000
}

fn default_grad_tol() -> f64 {
    1e-6
}

fn default_seed() -> u64 {
    42
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig { max_iter: default_max_iter(), grad_tol: default_grad_tol(), seed: default_seed() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub iterations: usize,
    pub grad_norm: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub seed: u64,
    /// Loss after every accepted step, starting with the initial loss.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub n_classes: usize,
    pub dim: usize,
    /// Row-major `n_classes x (dim + 1)`; the last column is the bias.
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub train_meta: TrainMeta,
}

impl LogRegModel {
    /// A model with all weights zero.
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        LogRegModel {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * (dim + 1)],
            lambda: 0.0,
            train_meta: TrainMeta {
                iterations: 0,
                grad_norm: f64::NAN,
                final_loss: f64::NAN,
                converged: false,
                seed: 0,
                loss_history: Vec::new(),
            },
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        if x.len() != self.dim {
            return Err(Error::validation(format!(
                "feature dimension {} does not match model dimension {}",
                x.len(),
                self.dim
            )));
        }
        let mut p = vec![0.0; self.n_classes];
        softmax_scores(&self.weights, self.dim, x, &mut p);
        ProbVector::new(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.n_classes * (self.dim + 1) {
            return Err(Error::validation("model weight matrix has the wrong shape"));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::validation("model weights must be finite"));
        }
        Ok(())
    }
}

/// Writes softmax probabilities of the affine scores into `out`.
fn softmax_scores(w: &[f64], dim: usize, x: &[f64], out: &mut [f64]) {
    let stride = dim + 1;
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w[k * stride..(k + 1) * stride];
        *o = row[dim] + row[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Mean cross-entropy plus `(lambda / 2) * |W|^2` (bias excluded), with its
/// gradient.
pub fn logreg_objective(x: &[Vec<f64>], y: &[CauseIndex], n_classes: usize, lambda: f64, w: &[f64]) -> (f64, Vec<f64>) {
    let dim = x.first().map_or(0, Vec::len);
    let stride = dim + 1;
    let idx: Vec<usize> = (0..x.len()).collect();
    let parts = par::map_chunks(&idx, CHUNK, |_, chunk| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.len()];
        let mut p = vec![0.0; n_classes];
        for &i in chunk {
            softmax_scores(w, dim, &x[i], &mut p);
            loss -= p[y[i]].max(f64::MIN_POSITIVE).ln();
            for k in 0..n_classes {
                let r = p[k] - if k == y[i] { 1.0 } else { 0.0 };
                let g = &mut grad[k * stride..(k + 1) * stride];
                for (gj, xj) in g[..dim].iter_mut().zip(&x[i]) {
                    *gj += r * xj;
                }
                g[dim] += r;
            }
        }
        (loss, grad)
    });
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    loss /= n;
    for v in grad.iter_mut() {
        *v /= n;
    }
    for k in 0..n_classes {
        for j in 0..dim {
            let wk = w[k * stride + j];
            loss += 0.5 * lambda * wk * wk;
            grad[k * stride + j] += lambda * wk;
        }
    }
    (loss, grad)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fit_logreg(
    x: &[Vec<f64>],
    y: &[CauseIndex],
    n_classes: usize,
    lambda: f64,
    config: &LogRegConfig,
) -> Result<LogRegModel> {
    if x.len() != y.len() {
        return Err(Error::validation(format!("{} feature rows but {} labels", x.len(), y.len())));
    }
    if n_classes < 2 || x.len() < n_classes {
        return Err(Error::validation(format!(
            "need at least as many samples ({}) as classes ({n_classes}), and two classes",
            x.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::validation(format!("lambda {lambda} must be finite and nonnegative")));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim) {
        return Err(Error::validation("feature rows must share a positive dimension"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("features must be finite"));
    }
    if let Some(bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::validation(format!("label {bad} out of range for {n_classes} classes")));
    }

    let mut w = vec![0.0; n_classes * (dim + 1)];
    let (mut loss, mut grad) = logreg_objective(x, y, n_classes, lambda, &w);
    let mut history = vec![loss];
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) < config.grad_tol;
    while !converged && iterations < config.max_iter {
        if let Some((pw, pg)) = &prev {
            let s: Vec<f64> = w.iter().zip(pw).map(|(a, b)| a - b).collect();
            let d: Vec<f64> = grad.iter().zip(pg).map(|(a, b)| a - b).collect();
            let sd = dot(&s, &d);
            if sd > 0.0 {
                step = (dot(&s, &s) / sd).clamp(1e-10, 1e10);
            }
        }
        let g2 = dot(&grad, &grad);
        let accepted = loop {
            let trial: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let (tl, tg) = logreg_objective(x, y, n_classes, lambda, &trial);
            if tl <= loss - ARMIJO_C * step * g2 {
                break Some((trial, tl, tg));
            }
            step *= 0.5;
            if step < 1e-16 {
                break None;
            }
        };
        let Some((nw, nl, ng)) = accepted else { break };
        prev = Some((std::mem::replace(&mut w, nw), std::mem::replace(&mut grad, ng)));
        loss = nl;
        history.push(loss);
        iterations += 1;
        converged = inf_norm(&grad) < config.grad_tol;
    }
    log::debug!("logreg lambda={lambda} iterations={iterations} loss={loss:.6} converged={converged}");
    Ok(LogRegModel {
        n_classes,
        dim,
        weights: w,
        lambda,
        train_meta: TrainMeta {
            iterations,
            grad_norm: inf_norm(&grad),
            final_loss: loss,
            converged,
            seed: config.seed,
            loss_history: history,
        },
    })
}

/// Fits on the embedding rows and gold causes of `records`.
pub fn fit_logreg_records(
    table: &EmbeddingTable,
    records: &[VARecord],
    n_classes: usize,
    lambda: f64,
    config: &LogRegConfig,
) -> Result<LogRegModel> {
    let x = table.rows(records.iter().map(|r| r.id.as_str()))?;
    let y = crate::domain::labels_of(records)?;
    fit_logreg(&x, &y, n_classes, lambda, config)
}

pub fn predict_logreg<'a>(
    model: &LogRegModel,
    table: &EmbeddingTable,
    ids: impl IntoIterator<Item = &'a str>,
    method: &str,
) -> Result<PredictionSet> {
    if table.dim() != model.dim {
        return Err(Error::validation(format!(
            "embedding dimension {} does not match model dimension {}",
            table.dim(),
            model.dim
        )));
    }
    let ids: Vec<&str> = ids.into_iter().collect();
    let rows = par::map(&ids, |id| -> Result<ProbVector> { model.predict_proba(table.require(id)?) });
    let mut set = PredictionSet::new(method, model.n_classes);
    for (id, p) in ids.iter().zip(rows) {
        set.insert(*id, Prediction::from_probs(p?))?;
    }
    Ok(set)
}

/// Every case receives the prevalence vector.
pub fn prior_baseline<'a>(prevalence: &PrevalenceVector, ids: impl IntoIterator<Item = &'a str>, method: &str) -> Result<PredictionSet> {
    let p = ProbVector::new(prevalence.as_slice().to_vec())?;
    let mut set = PredictionSet::new(method, prevalence.len());
    for id in ids {
        set.insert(id, Prediction::from_probs(p.clone()))?;
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub methods: Vec<String>,
    pub weights: Vec<f64>,
}

impl EnsembleWeights {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.methods.len() != self.weights.len() {
            return Err(Error::validation("ensemble needs one weight per method"));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("ensemble weights must be nonnegative"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::validation("ensemble weights must sum to 1"));
        }
        Ok(())
    }
}

/// Dense matrices `[method][case][cause]` aligned to `ids`.
fn dense_stack(sets: &[PredictionSet], ids: &[&str]) -> Result<Vec<Vec<Vec<f64>>>> {
    let c = sets[0].n_causes();
    sets.iter()
        .map(|set| {
            if set.n_causes() != c {
                return Err(Error::validation("prediction sets disagree on the number of causes"));
            }
            ids.iter()
                .map(|id| {
                    let pred = set.require(id)?;
                    pred.probs.as_ref().map(|p| p.as_slice().to_vec()).ok_or_else(|| {
                        Error::validation(format!("method {} has no probability vector for {id}", set.method))
                    })
                })
                .collect()
        })
        .collect()
}

fn check_coverage(sets: &[PredictionSet], records: &[VARecord]) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::validation("at least one method is required"));
    }
    for set in sets {
        set.check_covers(records)?;
    }
    Ok(())
}

/// All vectors of `m` nonnegative integers summing to `total`, in
/// lexicographic order.
fn compositions(total: usize, m: usize) -> Vec<Vec<usize>> {
    if m == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, m - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Exhaustive lattice search. Highest out-of-fold Top-1 wins, then higher
/// CSMF accuracy, then the lexicographically smallest weight vector.
pub fn fit_weighted_ensemble(oof: &[PredictionSet], records: &[VARecord], grid_step: f64) -> Result<EnsembleWeights> {
    check_coverage(oof, records)?;
    let steps = (1.0 / grid_step).round();
    if !(grid_step > 0.0 && grid_step <= 1.0) || (steps * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!("grid step {grid_step} must divide 1")));
    }
    let steps = steps as usize;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let dense = dense_stack(oof, &ids)?;
    let labels = crate::domain::labels_of(records)?;
    let c = oof[0].n_causes();
    let truth = crate::metrics::true_csmf(records, c)?;
    let lattice = compositions(steps, oof.len());
    let scored = par::map(&lattice, |point| -> Result<(usize, f64)> {
        let w: Vec<f64> = point.iter().map(|&k| k as f64 / steps as f64).collect();
        let mut hits = 0;
        let mut csmf = vec![0.0; c];
        let mut row = vec![0.0; c];
        for (i, &y) in labels.iter().enumerate() {
            row.iter_mut().for_each(|v| *v = 0.0);
            for (m, wm) in w.iter().enumerate() {
                if *wm > 0.0 {
                    for (r, p) in row.iter_mut().zip(&dense[m][i]) {
                        *r += wm * p;
                    }
                }
            }
            if argmax(&row) == y {
                hits += 1;
            }
            for (a, r) in csmf.iter_mut().zip(&row) {
                *a += r;
            }
        }
        let n = labels.len() as f64;
        csmf.iter_mut().for_each(|v| *v /= n);
        Ok((hits, csmf_accuracy_from(&csmf, &truth)?))
    });
    let mut best: Option<(usize, f64, &Vec<usize>)> = None;
    for (point, score) in lattice.iter().zip(scored) {
        let (hits, csmf) = score?;
        let better = match best {
            None => true,
            Some((bh, bc, bp)) => match hits.cmp(&bh) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal if csmf > bc + CSMF_TIE_TOL => true,
                Ordering::Equal if csmf < bc - CSMF_TIE_TOL => false,
                Ordering::Equal => point < bp,
            },
        };
        if better {
            best = Some((hits, csmf, point));
        }
    }
    let (_, _, point) = best.expect("lattice is never empty");
    Ok(EnsembleWeights {
        methods: oof.iter().map(|s| s.method.clone()).collect(),
        weights: point.iter().map(|&k| k as f64 / steps as f64).collect(),
    })
}

fn check_method_order(expected: &[String], sets: &[PredictionSet]) -> Result<()> {
    let got: Vec<&str> = sets.iter().map(|s| s.method.as_str()).collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::validation(format!(
            "method order {got:?} does not match the fitted order {expected:?}"
        )));
    }
    Ok(())
}

/// Per-case convex combination over the ids of the first set.
pub fn apply_weighted_ensemble(weights: &EnsembleWeights, sets: &[PredictionSet], method: &str) -> Result<PredictionSet> {
    weights.validate()?;
    check_method_order(&weights.methods, sets)?;
    let ids: Vec<&str> = sets[0].ids().map(String::as_str).collect();
    let dense = dense_stack(sets, &ids)?;
    let c = sets[0].n_causes();
    let mut out = PredictionSet::new(method, c);
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![0.0; c];
        for (m, wm) in weights.weights.iter().enumerate() {
            for (r, p) in row.iter_mut().zip(&dense[m][i]) {
                *r += wm * p;
            }
        }
        out.insert(*id, Prediction::from_probs(ProbVector::new(row)?))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackerModel {
    pub method_order: Vec<String>,
    pub n_causes: usize,
    pub model: LogRegModel,
}

fn stacked_features(sets: &[PredictionSet], ids: &[&str]) -> Result<Vec<Vec<f64>>> {
    let dense = dense_stack(sets, ids)?;
    Ok((0..ids.len())
        .map(|i| dense.iter().flat_map(|m| m[i].iter().copied()).collect())
        .collect())
}

/// Logistic regression on the concatenated per-method probability vectors.
pub fn fit_stacker(oof: &[PredictionSet], records: &[VARecord], lambda: f64, config: &LogRegConfig) -> Result<StackerModel> {
    check_coverage(oof, records)?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let x = stacked_features(oof, &ids)?;
    let c = oof[0].n_causes();
    debug_assert_eq!(x[0].len(), oof.len() * c);
    let y = crate::domain::labels_of(records)?;
    Ok(StackerModel {
        method_order: oof.iter().map(|s| s.method.clone()).collect(),
        n_causes: c,
        model: fit_logreg(&x, &y, c, lambda, config)?,
    })
}

pub fn predict_stacker(stacker: &StackerModel, sets: &[PredictionSet], method: &str) -> Result<PredictionSet> {
    check_method_order(&stacker.method_order, sets)?;
    let ids: Vec<&str> = sets[0].ids().map(String::as_str).collect();
    let x = stacked_features(sets, &ids)?;
    if x.first().is_some_and(|r| r.len() != stacker.model.dim) {
        return Err(Error::validation("stacked feature dimension does not match the stacker"));
    }
    let probs = par::map(&x, |row| stacker.model.predict_proba(row));
    let mut out = PredictionSet::new(method, stacker.n_causes);
    for (id, p) in ids.iter().zip(probs) {
        out.insert(*id, Prediction::from_probs(p?))?;
    }
    Ok(out)
}
