//! Subcommand implementations.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::{json, Value};

use lava_core::calibrate::{apply_calibration, fit_calibrator, CalibrationParams};
use lava_core::harness::{
    render_tables, run_loso, stratified_kfold, write_outputs, ExperimentInputs, ExperimentResult, FoldArtifacts,
    EMBEDDING_METHOD, ENSEMBLE_METHOD,
};
use lava_core::ingest::{
    load_embeddings, load_external_predictions, load_records_report, write_embeddings_csv, write_predictions,
    EmbeddingTable,
};
use lava_core::llm::{
    predict_batch, write_failure_manifest, BatchOutcome, ChatTransport, HttpTransport, LlmClientConfig,
    PromptTemplate, ReplayTransport,
};
use lava_core::metrics::{top_k_accuracy, EvalReport, MethodSummary};
use lava_core::models::{
    apply_weighted_ensemble, fit_logreg_records, fit_weighted_ensemble, predict_logreg, LogRegModel,
};
use lava_core::synth::{generate_cohort, oracle_predictions, SiteSpec, SynthConfig};
use lava_core::{CauseCodebook, PredictionSet, PrevalenceVector, VARecord};

use crate::config::{RunConfig, SynthSection};
use crate::manifest::Manifest;
use crate::{display, CliError, Command};

pub const LLM_METHOD: &str = "llm";
pub const ORACLE_METHOD: &str = "oracle";
pub const DEFAULT_SITES: [&str; 6] = ["AP", "Bohol", "Dar", "Mexico", "Pemba", "UP"];
pub const DEFAULT_SITE_SIZE: usize = 200;

type CmdResult = Result<Value, CliError>;

pub fn dispatch(command: Command, config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    match command {
        Command::Synth => synth(config, manifest),
        Command::PredictLlm => predict_llm(config, manifest),
        Command::TrainEmbed => train_embed(config, manifest),
        Command::PredictEmbed => predict_embed(config, manifest),
        Command::Calibrate => calibrate(config, manifest),
        Command::Ensemble => ensemble(config, manifest),
        Command::Evaluate => evaluate(config, manifest),
        Command::Report => report(config, manifest),
    }
}

fn codebook(config: &RunConfig) -> CauseCodebook {
    CauseCodebook::canonical(config.age_group)
}

fn load_records(config: &RunConfig, manifest: &mut Manifest, cb: &CauseCodebook) -> Result<Vec<VARecord>, CliError> {
    let path = config.records_path();
    manifest.input(&path)?;
    let load = load_records_report(&path, cb)?;
    for r in &load.rejects {
        warn!("{}: row {} rejected: {}", path.display(), r.row, r.reason);
    }
    if load.records.is_empty() {
        return Err(lava_core::Error::Validation(format!("{}: no usable records", path.display())).into());
    }
    info!("loaded {} records from {}", load.records.len(), path.display());
    Ok(load.records)
}

fn load_table(path: &Path, manifest: &mut Manifest) -> Result<EmbeddingTable, CliError> {
    manifest.input(path)?;
    Ok(load_embeddings(path)?)
}

fn load_set(path: &Path, manifest: &mut Manifest, cb: &CauseCodebook) -> Result<PredictionSet, CliError> {
    manifest.input(path)?;
    Ok(load_external_predictions(path, cb)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, manifest: &mut Manifest) -> Result<T, CliError> {
    manifest.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| lava_core::Error::Json { context: display(path), source: e }.into())
}

fn labeled(records: Vec<VARecord>) -> Result<Vec<VARecord>, CliError> {
    let n = records.len();
    let kept: Vec<VARecord> = records.into_iter().filter(|r| r.true_cause.is_some()).collect();
    if kept.is_empty() {
        return Err(lava_core::Error::Validation("no labeled records".into()).into());
    }
    if kept.len() < n {
        warn!("ignoring {} unlabeled records", n - kept.len());
    }
    Ok(kept)
}

pub fn synth_config(config: &RunConfig, cb: &CauseCodebook) -> Result<SynthConfig, CliError> {
    let seed = config.seed;
    let section = match &config.synth {
        Some(s) => s.clone(),
        None => {
            let prevalence = PrevalenceVector::new(vec![1.0 / cb.len() as f64; cb.len()])?;
            SynthSection {
                sites: DEFAULT_SITES
                    .iter()
                    .map(|s| SiteSpec { name: s.to_string(), n: DEFAULT_SITE_SIZE, prevalence: prevalence.clone(), flip_rate: None })
                    .collect(),
                symptom_count: 20,
                base_symptom_profile: None,
                site_flip_rate: 0.0,
                missing_rate: 0.0,
                embedding_dim: 16,
                class_separation: 3.0,
                oracle_accuracy: None,
            }
        }
    };
    Ok(SynthConfig {
        sites: section.sites,
        symptom_count: section.symptom_count,
        base_symptom_profile: section.base_symptom_profile,
        site_flip_rate: section.site_flip_rate,
        missing_rate: section.missing_rate,
        embedding_dim: section.embedding_dim,
        class_separation: section.class_separation,
        seed,
    })
}

fn synth(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    let cb = codebook(config);
    let sc = synth_config(config, &cb)?;
    let (records, table) = generate_cohort(&sc, &cb)?;
    let records_path = config.records_path();
    let emb_path = config.embeddings_path();
    for p in [&records_path, &emb_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
    }
    lava_core::ingest::write_records(&records_path, &records, &cb)?;
    write_embeddings_csv(&emb_path, &table)?;
    manifest.output(&records_path);
    manifest.output(&emb_path);
    let mut summary = json!({
        "command": "synth",
        "records": records.len(),
        "sites": sc.sites.len(),
        "embedding_dim": table.dim(),
        "records_path": display(&records_path),
        "embeddings_path": display(&emb_path),
    });
    if let Some(acc) = config.synth.as_ref().and_then(|s| s.oracle_accuracy) {
        let set = oracle_predictions(&records, cb.len(), acc, ORACLE_METHOD, config.seed)?;
        let path = config.out.join("oracle.jsonl");
        write_predictions(&path, &set, &cb)?;
        manifest.output(&path);
        summary["oracle_path"] = Value::String(display(&path));
    }
    Ok(summary)
}

fn template(config: &RunConfig, manifest: &mut Manifest) -> Result<PromptTemplate, CliError> {
    match &config.prompt_template {
        Some(p) => read_json(p, manifest),
        None => Ok(PromptTemplate::builtin(config.age_group)),
    }
}

/// Runs the LLM over `records` through the response cache. The transport
/// is built lazily so a warm cache needs neither network nor API key.
pub fn run_llm(config: &RunConfig, manifest: &mut Manifest, records: &[VARecord], cb: &CauseCodebook) -> Result<BatchOutcome, CliError> {
    let tpl = template(config, manifest)?;
    let llm = LlmClientConfig { cache_dir: config.cache_dir(), ..config.llm.clone() };
    if llm.cache_dir.exists() {
        manifest.input(&llm.cache_dir)?;
    }
    let replay = config.llm_replay.clone();
    if let Some(p) = &replay {
        manifest.input(p)?;
    }
    let factory_config = llm.clone();
    let outcome = predict_batch(records, cb, &tpl, &llm, LLM_METHOD, move || -> lava_core::Result<Box<dyn ChatTransport>> {
        match replay {
            Some(p) => Ok(Box::new(ReplayTransport::from_jsonl(&p)?)),
            None => Ok(Box::new(HttpTransport::from_env(&factory_config)?)),
        }
    })?;
    info!(
        "llm: {} predicted, {} failed, {} cache hits, {} requests",
        outcome.predictions.len(),
        outcome.failures.len(),
        outcome.cache_hits,
        outcome.requests
    );
    Ok(outcome)
}

fn predict_llm(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    let cb = codebook(config);
    let records = load_records(config, manifest, &cb)?;
    let outcome = run_llm(config, manifest, &records, &cb)?;
    let pred_path = config.out.join("llm.jsonl");
    let fail_path = config.out.join("llm_failures.jsonl");
    if outcome.predictions.is_empty() {
        warn!("no predictions succeeded; {} not written", pred_path.display());
    } else {
        write_predictions(&pred_path, &outcome.predictions, &cb)?;
        manifest.output(&pred_path);
    }
    write_failure_manifest(&fail_path, &outcome.failures)?;
    manifest.output(&fail_path);
    Ok(json!({
        "command": "predict-llm",
        "predicted": outcome.predictions.len(),
        "failed": outcome.failures.len(),
        "cache_hits": outcome.cache_hits,
        "requests": outcome.requests,
        "predictions_path": display(&pred_path),
        "failures_path": display(&fail_path),
    }))
}

/// Picks lambda by stratified k-fold Top-1 on `records` (first best wins).
fn select_lambda(config: &RunConfig, table: &EmbeddingTable, records: &[VARecord], c: usize) -> Result<(f64, Vec<(f64, f64)>), CliError> {
    let grid = &config.harness.lambda_grid;
    if grid.len() == 1 {
        return Ok((grid[0], Vec::new()));
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let labels = lava_core::domain::labels_of(records)?;
    let splits = stratified_kfold(&ids, &labels, config.harness.inner_folds, config.seed)?;
    let by_id: std::collections::BTreeMap<&str, &VARecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut scored = Vec::new();
    for &lambda in grid {
        let mut oof = PredictionSet::new(EMBEDDING_METHOD, c);
        for (fit_ids, val_ids) in &splits {
            let fit: Vec<VARecord> = fit_ids.iter().map(|id| by_id[id.as_str()].clone()).collect();
            let model = fit_logreg_records(table, &fit, c, lambda, &config.harness.logreg)?;
            for (id, p) in predict_logreg(&model, table, val_ids.iter().map(String::as_str), EMBEDDING_METHOD)?.iter() {
                oof.insert(id.clone(), p.clone())?;
            }
        }
        scored.push((lambda, top_k_accuracy(&oof, records, 1)?));
    }
    let mut best = scored[0];
    for &s in &scored[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok((best.0, scored))
}

fn train_embed(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    config.harness.validate()?;
    let cb = codebook(config);
    let records = labeled(load_records(config, manifest, &cb)?)?;
    let table = load_table(&config.embeddings_path(), manifest)?;
    let (lambda, scored) = select_lambda(config, &table, &records, cb.len())?;
    let model = fit_logreg_records(&table, &records, cb.len(), lambda, &config.harness.logreg)?;
    if !model.train_meta.converged {
        warn!("logistic regression stopped after {} iterations without converging", model.train_meta.iterations);
    }
    let path = config.embed_model_path();
    write_json(&path, &model)?;
    manifest.output(&path);
    Ok(json!({
        "command": "train-embed",
        "lambda": lambda,
        "cv_top1": scored.iter().map(|(l, t)| json!({"lambda": l, "top1": t})).collect::<Vec<_>>(),
        "iterations": model.train_meta.iterations,
        "converged": model.train_meta.converged,
        "model_path": display(&path),
    }))
}

fn predict_embed(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    let cb = codebook(config);
    let records = load_records(config, manifest, &cb)?;
    let table = load_table(&config.embeddings_path(), manifest)?;
    let model: LogRegModel = read_json(&config.embed_model_path(), manifest)?;
    model.validate()?;
    if model.n_classes != cb.len() {
        return Err(lava_core::Error::Validation(format!(
            "model has {} classes, codebook has {}",
            model.n_classes,
            cb.len()
        ))
        .into());
    }
    let set = predict_logreg(&model, &table, records.iter().map(|r| r.id.as_str()), EMBEDDING_METHOD)?;
    let path = config.out.join("embed.jsonl");
    write_predictions(&path, &set, &cb)?;
    manifest.output(&path);
    Ok(json!({"command": "predict-embed", "predicted": set.len(), "predictions_path": display(&path)}))
}

fn calibrate(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    let cb = codebook(config);
    let records = labeled(load_records(config, manifest, &cb)?)?;
    let pred_path = config.calibration.predictions.clone().unwrap_or_else(|| config.out.join("llm.jsonl"));
    let set = load_set(&pred_path, manifest, &cb)?;
    let params = fit_calibrator(&set, &records, &cb, config.calibration.stratify, config.calibration.target.as_ref())?;
    let calibrated = apply_calibration(&set, &params)?;
    let params_path = config.out.join("calibration.json");
    let out_path = config.out.join(format!("{}.jsonl", calibrated.method));
    write_json(&params_path, &params)?;
    write_predictions(&out_path, &calibrated, &cb)?;
    manifest.output(&params_path);
    manifest.output(&out_path);
    Ok(json!({
        "command": "calibrate",
        "method": calibrated.method,
        "objective": params.objective,
        "params_path": display(&params_path),
        "predictions_path": display(&out_path),
    }))
}

fn ensemble(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    let cb = codebook(config);
    let records = labeled(load_records(config, manifest, &cb)?)?;
    if config.data.predictions.len() < 2 {
        return Err(CliError::Config("ensemble needs at least two files in data.predictions".into()));
    }
    let sets = config
        .data
        .predictions
        .iter()
        .map(|p| load_set(p, manifest, &cb).map(|s| s.densified()))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = fit_weighted_ensemble(&sets, &records, config.ensemble.grid_step)?;
    let combined = apply_weighted_ensemble(&weights, &sets, ENSEMBLE_METHOD)?;
    let weights_path = config.out.join("ensemble.json");
    let out_path = config.out.join(format!("{ENSEMBLE_METHOD}.jsonl"));
    write_json(&weights_path, &weights)?;
    write_predictions(&out_path, &combined, &cb)?;
    manifest.output(&weights_path);
    manifest.output(&out_path);
    Ok(json!({
        "command": "ensemble",
        "methods": weights.methods,
        "weights": weights.weights,
        "weights_path": display(&weights_path),
        "predictions_path": display(&out_path),
    }))
}

fn title(config: &RunConfig) -> String {
    config.evaluate.title.clone().unwrap_or_else(|| format!("{} cohort", config.age_group.as_str()))
}

fn evaluate(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    let cb = codebook(config);
    let records = labeled(load_records(config, manifest, &cb)?)?;
    let emb_path = config.embeddings_path();
    let embeddings = if config.data.embeddings.is_some() || emb_path.exists() {
        Some(load_table(&emb_path, manifest)?)
    } else {
        info!("no embeddings at {}; embedding model skipped", emb_path.display());
        None
    };
    let mut fixed = config
        .data
        .predictions
        .iter()
        .map(|p| load_set(p, manifest, &cb))
        .collect::<Result<Vec<_>, _>>()?;
    if config.evaluate.use_llm {
        let outcome = run_llm(config, manifest, &records, &cb)?;
        if !outcome.failures.is_empty() {
            let path = config.out.join("llm_failures.jsonl");
            write_failure_manifest(&path, &outcome.failures)?;
            manifest.output(&path);
            return Err(lava_core::Error::Validation(format!(
                "{} cases have no LLM prediction; see {}",
                outcome.failures.len(),
                path.display()
            ))
            .into());
        }
        fixed.push(outcome.predictions);
    }
    let inputs = ExperimentInputs { codebook: cb, records, embeddings, fixed };
    let result = run_loso(&inputs, &config.harness)?;
    let title = title(config);
    write_outputs(&config.out, &result, &title)?;
    for name in ["reports.json", "folds.json", "tables.txt"] {
        manifest.output(config.out.join(name));
    }
    Ok(json!({
        "command": "evaluate",
        "folds": result.folds.len(),
        "summaries": result.summaries,
        "tables_path": display(&config.out.join("tables.txt")),
    }))
}

#[derive(serde::Deserialize)]
struct ReportsFile {
    reports: Vec<EvalReport>,
    summaries: Vec<MethodSummary>,
}

fn report(config: &RunConfig, manifest: &mut Manifest) -> CmdResult {
    let reports_path = config.out.join("reports.json");
    let folds_path = config.out.join("folds.json");
    let file: ReportsFile = read_json(&reports_path, manifest)?;
    let folds: Vec<FoldArtifacts> = if folds_path.exists() { read_json(&folds_path, manifest)? } else { Vec::new() };
    let result = ExperimentResult { reports: file.reports, summaries: file.summaries, folds };
    let path: PathBuf = config.out.join("report.txt");
    std::fs::write(&path, render_tables(&result, &title(config))).map_err(|e| CliError::io(&path, e))?;
    manifest.output(&path);
    let calibration: Vec<&CalibrationParams> = result.folds.iter().flat_map(|f| f.calibration.values()).collect();
    Ok(json!({
        "command": "report",
        "reports": result.reports.len(),
        "calibrators": calibration.len(),
        "summaries": result.summaries,
        "report_path": display(&path),
    }))
}
