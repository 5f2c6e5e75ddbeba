//! Fold construction and the leave-one-site-out experiment.
//!
//! Within a fold every trainable piece sees only the fold's training ids:
//! inner stratified splits produce out-of-fold probabilities for the base
//! methods, ensembles are fitted on those, base models are refitted on the
//! full training ids, and the calibrator is fitted on training predictions.
//! Every fit passes through a [`LeakGuard`] holding the held-out ids.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::{apply_calibration, fit_calibrator, CalibrationParams};
use crate::domain::{empirical_prevalence, labels_of, CauseCodebook, CauseIndex, PredictionSet, VARecord};
use crate::error::{Error, Result};
use crate::ingest::EmbeddingTable;
use crate::metrics::{render_cause_table, render_metric_table, render_summary_table, Metric};
use crate::metrics::{evaluate, summarize, top_k_accuracy, EvalOptions, EvalReport, MethodSummary};
use crate::models::{
    apply_weighted_ensemble, fit_logreg, fit_stacker, fit_weighted_ensemble, predict_logreg, predict_stacker,
    prior_baseline, EnsembleWeights, LogRegConfig, DEFAULT_GRID_STEP, DEFAULT_LAMBDA_GRID,
};
use crate::par;

pub const EMBEDDING_METHOD: &str = "embedding-logreg";
pub const PRIOR_METHOD: &str = "prior";
pub const ENSEMBLE_METHOD: &str = "weighted-ensemble";
pub const STACKER_METHOD: &str = "stacker";
pub const DEFAULT_INNER_FOLDS: usize = 5;

/// `(train ids, validation ids)`.
pub type Split = (Vec<String>, Vec<String>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    /// Held-out site, or `fold-k` for random splits.
    pub test_site: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub inner: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stratified k-fold: each class is shuffled and dealt round-robin, with the
/// starting fold carried over between classes so fold sizes stay balanced.
pub fn stratified_kfold(ids: &[String], labels: &[CauseIndex], k: usize, seed: u64) -> Result<Vec<Split>> {
    if ids.len() != labels.len() {
        return Err(Error::validation("ids and labels differ in length"));
    }
    if k < 2 {
        return Err(Error::validation(format!("k = {k} must be at least 2")));
    }
    if k > ids.len() {
        return Err(Error::validation(format!("k = {k} exceeds the {} available ids", ids.len())));
    }
    let mut by_class: BTreeMap<CauseIndex, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = seeded(seed, 1);
    let mut fold_of = vec![0usize; ids.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..ids.len()).partition(|&i| fold_of[i] == f);
            (train.into_iter().map(|i| ids[i].clone()).collect(), val.into_iter().map(|i| ids[i].clone()).collect())
        })
        .collect())
}

fn inner_splits(train: &[&VARecord], inner_folds: usize, seed: u64) -> Result<Vec<Split>> {
    let ids: Vec<String> = train.iter().map(|r| r.id.clone()).collect();
    let labels: Vec<CauseIndex> = train
        .iter()
        .map(|r| r.true_cause.ok_or_else(|| Error::validation(format!("record {} has no gold cause", r.id))))
        .collect::<Result<_>>()?;
    stratified_kfold(&ids, &labels, inner_folds.min(ids.len()), seed)
}

/// One fold per site, in order of first appearance.
pub fn loso_split(records: &[VARecord], seed: u64) -> Result<FoldPlan> {
    loso_split_with(records, DEFAULT_INNER_FOLDS, seed)
}

pub fn loso_split_with(records: &[VARecord], inner_folds: usize, seed: u64) -> Result<FoldPlan> {
    crate::domain::check_unique_ids(records)?;
    let mut sites: Vec<&str> = Vec::new();
    for r in records {
        if !sites.contains(&r.site.as_str()) {
            sites.push(&r.site);
        }
    }
    if sites.len() < 2 {
        return Err(Error::validation("leave-one-site-out needs at least two sites"));
    }
    let folds = sites
        .iter()
        .enumerate()
        .map(|(f, site)| {
            let (test, train): (Vec<&VARecord>, Vec<&VARecord>) = records.iter().partition(|r| r.site == *site);
            Ok(Fold {
                test_site: site.to_string(),
                train_ids: train.iter().map(|r| r.id.clone()).collect(),
                test_ids: test.iter().map(|r| r.id.clone()).collect(),
                inner: inner_splits(&train, inner_folds, seed.wrapping_add(f as u64))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldPlan { folds, seed })
}

/// Stratified random k-fold over the pooled cohort, ignoring sites.
pub fn random_split(records: &[VARecord], k: usize, inner_folds: usize, seed: u64) -> Result<FoldPlan> {
    crate::domain::check_unique_ids(records)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let outer = stratified_kfold(&ids, &labels_of(records)?, k, seed)?;
    let by_id: BTreeMap<&str, &VARecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let folds = outer
        .into_iter()
        .enumerate()
        .map(|(f, (train_ids, test_ids))| {
            let train: Vec<&VARecord> = train_ids.iter().map(|id| by_id[id.as_str()]).collect();
            Ok(Fold {
                test_site: format!("fold-{}", f + 1),
                inner: inner_splits(&train, inner_folds, seed.wrapping_add(f as u64 + 1))?,
                train_ids,
                test_ids,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldPlan { folds, seed })
}

/// Rejects any fit whose ids include a held-out id.
pub struct LeakGuard<'a> {
    site: &'a str,
    held_out: HashSet<&'a str>,
}

impl<'a> LeakGuard<'a> {
    pub fn new(fold: &'a Fold) -> Self {
        LeakGuard { site: &fold.test_site, held_out: fold.test_ids.iter().map(String::as_str).collect() }
    }

    pub fn check<'b>(&self, what: &str, ids: impl IntoIterator<Item = &'b str>) -> Result<()> {
        for id in ids {
            if self.held_out.contains(id) {
                return Err(Error::Leakage(format!("held-out id {id} of {} reached {what}", self.site)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitMode {
    Loso,
    Random { folds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(default = "default_split")]
    pub split: SplitMode,
    #[serde(default = "default_inner")]
    pub inner_folds: usize,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    #[serde(default = "yes")]
    pub stratify_calibration: bool,
    /// Ranked methods to calibrate; every ranked-only method when absent.
    #[serde(default)]
    pub calibrate: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub prior: bool,
    #[serde(default = "yes")]
    pub weighted_ensemble: bool,
    #[serde(default = "yes")]
    pub stacker: bool,
    #[serde(default)]
    pub logreg: LogRegConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_split() -> SplitMode {
    SplitMode::Loso
}

fn default_inner() -> usize {
    DEFAULT_INNER_FOLDS
}

fn default_lambda_grid() -> Vec<f64> {
    DEFAULT_LAMBDA_GRID.to_vec()
}

fn default_grid_step() -> f64 {
    DEFAULT_GRID_STEP
}

fn yes() -> bool {
    true
}

fn default_seed() -> u64 {
    42
}

impl Default for HarnessConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::validation("lambda_grid must be nonempty with nonnegative entries"));
        }
        if self.inner_folds < 2 {
            return Err(Error::validation("inner_folds must be at least 2"));
        }
        if let SplitMode::Random { folds } = self.split {
            if folds < 2 {
                return Err(Error::validation("random split needs at least 2 folds"));
            }
        }
        Ok(())
    }
}

/// Data for one experiment.
pub struct ExperimentInputs {
    pub codebook: CauseCodebook,
    pub records: Vec<VARecord>,
    pub embeddings: Option<EmbeddingTable>,
    /// Frozen predictors (LLM output, external posteriors); constant across
    /// inner folds.
    pub fixed: Vec<PredictionSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldArtifacts {
    pub test_site: String,
    pub n_train: usize,
    pub n_test: usize,
    pub embedding_lambda: Option<f64>,
    pub stacker_lambda: Option<f64>,
    pub ensemble: Option<EnsembleWeights>,
    pub calibration: BTreeMap<String, CalibrationParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub reports: Vec<EvalReport>,
    pub summaries: Vec<MethodSummary>,
    pub folds: Vec<FoldArtifacts>,
}

fn pick(by_id: &BTreeMap<&str, &VARecord>, ids: &[String]) -> Result<Vec<VARecord>> {
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::validation(format!("fold references unknown id {id}")))
        })
        .collect()
}

fn ids_of(records: &[VARecord]) -> impl Iterator<Item = &str> {
    records.iter().map(|r| r.id.as_str())
}

/// Out-of-fold embedding probabilities for one lambda.
#[allow(clippy::too_many_arguments)]
fn embedding_oof(
    table: &EmbeddingTable,
    train: &[VARecord],
    inner: &[Split],
    by_id: &BTreeMap<&str, &VARecord>,
    c: usize,
    lambda: f64,
    config: &LogRegConfig,
    guard: &LeakGuard,
) -> Result<PredictionSet> {
    let mut oof = PredictionSet::new(EMBEDDING_METHOD, c);
    for (fit_ids, val_ids) in inner {
        guard.check("inner embedding fit", fit_ids.iter().map(String::as_str))?;
        let fit = pick(by_id, fit_ids)?;
        let x = table.rows(ids_of(&fit))?;
        let model = fit_logreg(&x, &labels_of(&fit)?, c, lambda, config)?;
        let part = predict_logreg(&model, table, val_ids.iter().map(String::as_str), EMBEDDING_METHOD)?;
        for (id, p) in part.iter() {
            oof.insert(id.clone(), p.clone())?;
        }
    }
    oof.check_covers(train)?;
    Ok(oof)
}

/// The first lambda with the highest Top-1.
fn best_lambda(scored: &[(f64, f64)]) -> f64 {
    let mut best = scored[0];
    for &s in &scored[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    best.0
}

struct FoldOutput {
    reports: Vec<EvalReport>,
    artifacts: FoldArtifacts,
}

fn run_fold(inputs: &ExperimentInputs, config: &HarnessConfig, fold: &Fold) -> Result<FoldOutput> {
    let guard = LeakGuard::new(fold);
    let codebook = &inputs.codebook;
    let c = codebook.len();
    let by_id: BTreeMap<&str, &VARecord> = inputs.records.iter().map(|r| (r.id.as_str(), r)).collect();
    guard.check("training ids", fold.train_ids.iter().map(String::as_str))?;
    for (fit_ids, val_ids) in &fold.inner {
        guard.check("inner split", fit_ids.iter().chain(val_ids).map(String::as_str))?;
    }
    let train = pick(&by_id, &fold.train_ids)?;
    let test = pick(&by_id, &fold.test_ids)?;
    let train_ids: Vec<&str> = ids_of(&train).collect();
    let test_ids: Vec<&str> = ids_of(&test).collect();
    let opts = EvalOptions::for_codebook(codebook);

    // Base methods: (out-of-fold on train, predictions on test).
    let mut oof_sets: Vec<PredictionSet> = Vec::new();
    let mut test_sets: Vec<PredictionSet> = Vec::new();
    let mut embedding_lambda = None;
    if let Some(table) = &inputs.embeddings {
        let scored = config
            .lambda_grid
            .iter()
            .map(|&l| {
                let oof = embedding_oof(table, &train, &fold.inner, &by_id, c, l, &config.logreg, &guard)?;
                Ok((l, top_k_accuracy(&oof, &train, 1)?, oof))
            })
            .collect::<Result<Vec<_>>>()?;
        let lambda = best_lambda(&scored.iter().map(|s| (s.0, s.1)).collect::<Vec<_>>());
        embedding_lambda = Some(lambda);
        let oof = scored.into_iter().find(|s| s.0 == lambda).expect("chosen from grid").2;
        guard.check("embedding refit", train_ids.iter().copied())?;
        let x = table.rows(train_ids.iter().copied())?;
        let model = fit_logreg(&x, &labels_of(&train)?, c, lambda, &config.logreg)?;
        test_sets.push(predict_logreg(&model, table, test_ids.iter().copied(), EMBEDDING_METHOD)?);
        oof_sets.push(oof);
    }
    for set in &inputs.fixed {
        oof_sets.push(set.subset(train_ids.iter().copied())?);
        test_sets.push(set.subset(test_ids.iter().copied())?);
    }

    let mut scored: Vec<PredictionSet> = test_sets.clone();
    let mut artifacts = FoldArtifacts {
        test_site: fold.test_site.clone(),
        n_train: train.len(),
        n_test: test.len(),
        embedding_lambda,
        stacker_lambda: None,
        ensemble: None,
        calibration: BTreeMap::new(),
    };

    if config.prior {
        guard.check("prior prevalence", train_ids.iter().copied())?;
        let prevalence = empirical_prevalence(&train, codebook)?;
        scored.push(prior_baseline(&prevalence, test_ids.iter().copied(), PRIOR_METHOD)?);
    }

    let dense_oof: Vec<PredictionSet> = oof_sets.iter().map(PredictionSet::densified).collect();
    let dense_test: Vec<PredictionSet> = test_sets.iter().map(PredictionSet::densified).collect();
    if config.weighted_ensemble && dense_oof.len() >= 2 {
        guard.check("ensemble fit", train_ids.iter().copied())?;
        let weights = fit_weighted_ensemble(&dense_oof, &train, config.grid_step)?;
        scored.push(apply_weighted_ensemble(&weights, &dense_test, ENSEMBLE_METHOD)?);
        artifacts.ensemble = Some(weights);
    }
    if config.stacker && dense_oof.len() >= 2 {
        let mut per_lambda = Vec::new();
        for &lambda in &config.lambda_grid {
            let mut hits = 0usize;
            for (fit_ids, val_ids) in &fold.inner {
                guard.check("inner stacker fit", fit_ids.iter().map(String::as_str))?;
                let fit = pick(&by_id, fit_ids)?;
                let val = pick(&by_id, val_ids)?;
                let fit_sets = dense_oof.iter().map(|s| s.subset(ids_of(&fit))).collect::<Result<Vec<_>>>()?;
                let val_sets = dense_oof.iter().map(|s| s.subset(ids_of(&val))).collect::<Result<Vec<_>>>()?;
                let model = fit_stacker(&fit_sets, &fit, lambda, &config.logreg)?;
                let pred = predict_stacker(&model, &val_sets, STACKER_METHOD)?;
                hits += (top_k_accuracy(&pred, &val, 1)? * val.len() as f64).round() as usize;
            }
            per_lambda.push((lambda, hits as f64 / train.len() as f64));
        }
        let lambda = best_lambda(&per_lambda);
        guard.check("stacker fit", train_ids.iter().copied())?;
        let model = fit_stacker(&dense_oof, &train, lambda, &config.logreg)?;
        scored.push(predict_stacker(&model, &dense_test, STACKER_METHOD)?);
        artifacts.stacker_lambda = Some(lambda);
    }

    for (train_set, test_set) in oof_sets.iter().zip(&test_sets) {
        let wanted = match &config.calibrate {
            Some(list) => list.contains(&test_set.method),
            None => train_set.has_ranked_only(),
        };
        if !wanted {
            continue;
        }
        guard.check("calibrator fit", train_set.ids().map(String::as_str))?;
        let params = fit_calibrator(train_set, &train, codebook, config.stratify_calibration, None)?;
        scored.push(apply_calibration(test_set, &params)?);
        artifacts.calibration.insert(test_set.method.clone(), params);
    }

    let reports = scored
        .iter()
        .map(|set| evaluate(set, &test, codebook, Some(&fold.test_site), &opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldOutput { reports, artifacts })
}

fn check_inputs(inputs: &ExperimentInputs) -> Result<()> {
    crate::domain::check_unique_ids(&inputs.records)?;
    for r in &inputs.records {
        r.validate(&inputs.codebook)?;
        if r.true_cause.is_none() {
            return Err(Error::validation(format!("record {} has no gold cause", r.id)));
        }
    }
    let mut names = BTreeSet::new();
    for set in &inputs.fixed {
        if set.n_causes() != inputs.codebook.len() {
            return Err(Error::validation(format!("method {} has the wrong number of causes", set.method)));
        }
        set.check_covers(&inputs.records)?;
        if !names.insert(set.method.as_str()) || set.method == EMBEDDING_METHOD {
            return Err(Error::validation(format!("method name {} is used twice", set.method)));
        }
    }
    if let Some(table) = &inputs.embeddings {
        for r in &inputs.records {
            table.require(&r.id)?;
        }
    }
    if inputs.embeddings.is_none() && inputs.fixed.is_empty() {
        return Err(Error::validation("no base method: supply embeddings or prediction files"));
    }
    Ok(())
}

/// Checks every fold's training structures against its held-out ids.
pub fn check_plan(plan: &FoldPlan) -> Result<()> {
    for fold in &plan.folds {
        let guard = LeakGuard::new(fold);
        guard.check("training ids", fold.train_ids.iter().map(String::as_str))?;
        for (fit_ids, val_ids) in &fold.inner {
            guard.check("inner split", fit_ids.iter().chain(val_ids).map(String::as_str))?;
        }
    }
    Ok(())
}

/// Runs every fold of `plan`; folds run in parallel, reports keep plan order.
pub fn run_plan(inputs: &ExperimentInputs, config: &HarnessConfig, plan: &FoldPlan) -> Result<ExperimentResult> {
    config.validate()?;
    check_inputs(inputs)?;
    check_plan(plan)?;
    let outputs = par::map(&plan.folds, |fold| run_fold(inputs, config, fold));
    let mut reports = Vec::new();
    let mut folds = Vec::new();
    for out in outputs {
        let out = out?;
        reports.extend(out.reports);
        folds.push(out.artifacts);
    }
    let summaries = summarize(&reports);
    Ok(ExperimentResult { reports, summaries, folds })
}

/// Builds the plan named by `config.split` and runs it.
pub fn run_loso(inputs: &ExperimentInputs, config: &HarnessConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let plan = match config.split {
        SplitMode::Loso => loso_split_with(&inputs.records, config.inner_folds, config.seed)?,
        SplitMode::Random { folds } => random_split(&inputs.records, folds, config.inner_folds, config.seed)?,
    };
    run_plan(inputs, config, &plan)
}

/// All text tables for a result.
pub fn render_tables(result: &ExperimentResult, title: &str) -> String {
    let mut out = String::new();
    let has_top5 = result.reports.iter().any(|r| r.top5.is_some());
    let metrics: &[Metric] = if has_top5 { &[Metric::Top1, Metric::Top5, Metric::Csmf] } else { &[Metric::Top1, Metric::Csmf] };
    for &m in metrics {
        out.push_str(&render_metric_table(title, &result.reports, m));
        out.push('\n');
    }
    out.push_str(&render_summary_table(&format!("Pooled across sites: {title}"), &result.summaries));
    let mut methods: Vec<&str> = Vec::new();
    for r in &result.reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for m in methods {
        let rs: Vec<EvalReport> = result.reports.iter().filter(|r| r.method == m).cloned().collect();
        out.push('\n');
        out.push_str(&render_cause_table(&format!("Top-1 by cause and site: {m}"), &rs));
    }
    out
}

/// Writes `reports.json`, `folds.json` and `tables.txt` into `dir`.
pub fn write_outputs(dir: &Path, result: &ExperimentResult, title: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write_json = |name: &str, value: serde_json::Value| {
        let path = dir.join(name);
        let text = serde_json::to_string_pretty(&value).map_err(|e| Error::json(name, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write_json(
        "reports.json",
        serde_json::json!({ "reports": result.reports, "summaries": result.summaries }),
    )?;
    write_json("folds.json", serde_json::to_value(&result.folds).map_err(|e| Error::json("folds", e))?)?;
    let path = dir.join("tables.txt");
    std::fs::write(&path, render_tables(result, title)).map_err(|e| Error::io(&path, e))
}
