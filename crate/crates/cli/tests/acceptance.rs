//! Acceptance suite. Each criterion runs in isolation, is timed against its
//! budget and prints one PASS/FAIL line; the process fails if any does.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lava_core::calibrate::{apply_calibration, build_lp, fit_calibrator, solve_lp, RankWeights};
use lava_core::harness::{loso_split, run_loso, run_plan, stratified_kfold, ExperimentInputs, HarnessConfig};
use lava_core::ingest::load_records;
use lava_core::llm::{
    parse_response, predict_batch, serialize_ranked, ChatTransport, LlmClientConfig, PromptTemplate,
    ReplayTransport,
};
use lava_core::metrics::{csmf_accuracy, csmf_accuracy_from, top_k_accuracy};
use lava_core::models::{
    fit_logreg, fit_stacker, fit_weighted_ensemble, logreg_objective, predict_stacker, LogRegConfig,
    DEFAULT_LAMBDA_GRID,
};
use lava_core::synth::{generate_cohort, oracle_predictions, SynthConfig};
use lava_core::{
    AgeGroup, CauseCodebook, Confidence, Error, Prediction, PredictionSet, PrevalenceVector, ProbVector,
    RankedCause, RankedPrediction, Sex, VARecord,
};

type Check = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: lava_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const SITES: [&str; 6] = ["AP", "Bohol", "Dar", "Mexico", "Pemba", "UP"];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn record(id: String, site: &str, age_group: AgeGroup, cause: usize) -> VARecord {
    VARecord {
        id,
        site: site.to_owned(),
        age_group,
        age_value: 1.0,
        sex: Sex::Unknown,
        symptoms: Default::default(),
        narrative: None,
        true_cause: Some(cause),
    }
}

fn random_dist(r: &mut ChaCha8Rng, c: usize, zero_prob: f64) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..c).map(|_| if r.random::<f64>() < zero_prob { 0.0 } else { r.random::<f64>() }).collect();
        let s: f64 = raw.iter().sum();
        if s > 0.0 {
            return raw.iter().map(|v| v / s).collect();
        }
    }
}

fn random_ranked(r: &mut ChaCha8Rng, c: usize, k: usize) -> RankedPrediction {
    let mut causes: Vec<usize> = (0..c).collect();
    causes.shuffle(r);
    let entries = causes[..k]
        .iter()
        .map(|&cause| RankedCause { cause, confidence: Confidence::ALL[r.random_range(0..3)] })
        .collect();
    RankedPrediction::new(entries).unwrap()
}

// --- CSMF identities -------------------------------------------------------

fn csmf_identities() -> Check {
    let truth = [0.5, 0.3, 0.2];
    let perfect = ok(csmf_accuracy_from(&truth, &truth))?;
    ensure(perfect == 1.0, || format!("perfect aggregate gave {perfect}"))?;
    let rarest = ok(csmf_accuracy_from(&[0.0, 0.0, 1.0], &truth))?;
    ensure(rarest.abs() <= 1e-12, || format!("all mass on rarest gave {rarest}"))?;
    // (0.1 + 0.1 + 0) / (2 * (1 - 0.2))
    let hand = ok(csmf_accuracy_from(&[0.4, 0.4, 0.2], &truth))?;
    ensure((hand - 0.875).abs() <= 1e-12, || format!("hand case gave {hand}"))?;
    Ok(format!("perfect={perfect} rarest={rarest:e} hand={hand}"))
}

// --- Calibration LP optimality ---------------------------------------------

struct Instance {
    set: PredictionSet,
    lists: Vec<Vec<usize>>,
    prevalence: Vec<f64>,
    target: Vec<f64>,
}

fn lp_instance(seed: u64) -> Instance {
    let mut r = rng(1000 + seed);
    let c = 2 + (seed as usize % 4);
    let n = 10 + (seed as usize * 7) % 41;
    let prevalence = random_dist(&mut r, c, 0.25);
    let target = random_dist(&mut r, c, 0.1);
    let mut set = PredictionSet::new("m", c);
    let mut lists = Vec::new();
    for i in 0..n {
        let k = r.random_range(1..=c.min(5));
        let ranked = random_ranked(&mut r, c, k);
        lists.push(ranked.causes().collect());
        set.insert(format!("r{i}"), Prediction::from_ranked(ranked)).unwrap();
    }
    Instance { set, lists, prevalence, target }
}

/// Mean calibrated vector as `A alpha + sum_k B_k (1 - S_k(alpha))`, built
/// directly from the per-case definition.
struct MeanModel {
    a: Vec<[f64; 5]>,
    b: Vec<Vec<f64>>,
    depth: usize,
}

fn mean_model(inst: &Instance) -> MeanModel {
    let c = inst.prevalence.len();
    let n = inst.lists.len() as f64;
    let mut a = vec![[0.0; 5]; c];
    let mut b = vec![vec![0.0; c]; 6];
    let mut depth = 0;
    for list in &inst.lists {
        depth = depth.max(list.len());
        for (j, &cause) in list.iter().enumerate() {
            a[cause][j] += 1.0 / n;
        }
        let rest: Vec<usize> = (0..c).filter(|x| !list.contains(x)).collect();
        let shares: Vec<(usize, f64)> = if rest.is_empty() {
            list.iter().map(|&x| (x, 1.0 / list.len() as f64)).collect()
        } else {
            let d: f64 = rest.iter().map(|&x| inst.prevalence[x]).sum();
            if d > 0.0 {
                rest.iter().map(|&x| (x, inst.prevalence[x] / d)).collect()
            } else {
                rest.iter().map(|&x| (x, 1.0 / rest.len() as f64)).collect()
            }
        };
        for (x, s) in shares {
            b[list.len()][x] += s / n;
        }
    }
    MeanModel { a, b, depth }
}

fn model_mean(m: &MeanModel, alpha: &[f64]) -> Vec<f64> {
    let mut prefix = [0.0; 6];
    for k in 1..=5 {
        prefix[k] = prefix[k - 1] + alpha[k - 1];
    }
    (0..m.a.len())
        .map(|c| {
            let mut q: f64 = (0..5).map(|j| m.a[c][j] * alpha[j]).sum();
            for k in 1..=5 {
                q += m.b[k][c] * (1.0 - prefix[k]);
            }
            q
        })
        .collect()
}

fn model_gap(m: &MeanModel, target: &[f64], alpha: &[f64]) -> f64 {
    model_mean(m, alpha).iter().zip(target).map(|(q, t)| (q - t).abs()).sum()
}

/// Minimum over nonincreasing weights on the 0.01 lattice with sum <= 1.
/// Ranks deeper than any list are fixed at zero, which is always feasible
/// and does not change the objective.
fn brute_force(m: &MeanModel, target: &[f64]) -> f64 {
    fn go(m: &MeanModel, target: &[f64], alpha: &mut [f64; 5], j: usize, cap: u32, left: u32, best: &mut f64) {
        if j == m.depth {
            let g = model_gap(m, target, alpha);
            if g < *best {
                *best = g;
            }
            return;
        }
        for v in 0..=cap.min(left) {
            alpha[j] = v as f64 / 100.0;
            go(m, target, alpha, j + 1, v, left - v, best);
        }
        alpha[j] = 0.0;
    }
    let mut best = f64::INFINITY;
    go(m, target, &mut [0.0; 5], 0, 100, 100, &mut best);
    best
}

fn lp_optimality() -> Check {
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..20u64 {
        let inst = lp_instance(seed);
        let model = mean_model(&inst);
        let prev = PrevalenceVector::new(inst.prevalence.clone()).unwrap();
        let target = PrevalenceVector::new(inst.target.clone()).unwrap();
        let brute = brute_force(&model, &inst.target);
        for stratify in [false, true] {
            let lp = ok(build_lp(&inst.set, &prev, &target, stratify))?;
            let params = ok(solve_lp(&lp))?;
            // Score the solver's weights with the independent per-case model.
            let n = inst.lists.len() as f64;
            let mut qbar = vec![0.0; inst.target.len()];
            for (_, pred) in inst.set.iter() {
                let ranked = pred.ranked.as_ref().unwrap();
                let w: &RankWeights = params.weights(ranked.stratum());
                let single = Instance {
                    set: PredictionSet::new("case", inst.target.len()),
                    lists: vec![ranked.causes().collect()],
                    prevalence: inst.prevalence.clone(),
                    target: inst.target.clone(),
                };
                for (q, v) in qbar.iter_mut().zip(model_mean(&mean_model(&single), w)) {
                    *q += v / n;
                }
            }
            let achieved: f64 = qbar.iter().zip(&inst.target).map(|(q, t)| (q - t).abs()).sum();
            let reported = params.objective.unwrap_or(f64::NAN);
            ensure((achieved - reported).abs() <= 1e-9, || {
                format!("seed {seed}: reported objective {reported} but weights achieve {achieved}")
            })?;
            ensure(achieved <= brute + 1e-6, || {
                format!("seed {seed} stratify={stratify}: solver {achieved} > brute force {brute}")
            })?;
            worst = worst.max(achieved - brute);
        }
    }
    Ok(format!("20 instances, max(solver - brute) = {worst:.3e}"))
}

// --- Rank preservation -------------------------------------------------------

fn rank_preservation() -> Check {
    let cb = CauseCodebook::canonical(AgeGroup::Child);
    let sc = ok(SynthConfig::balanced(&SITES, 150, cb.len(), 3))?;
    let (records, _) = ok(generate_cohort(&sc, &cb))?;
    let raw = ok(oracle_predictions(&records, cb.len(), 0.7, "oracle", 9))?;
    for site in SITES {
        let (test, train): (Vec<VARecord>, Vec<VARecord>) = records.iter().cloned().partition(|r| r.site == site);
        let params = ok(fit_calibrator(&raw, &train, &cb, true, None))?;
        let test_raw = ok(raw.subset(test.iter().map(|r| r.id.as_str())))?;
        let calibrated = ok(apply_calibration(&test_raw, &params))?;
        for k in [1, 5] {
            let before = ok(top_k_accuracy(&test_raw, &test, k))?;
            let after = ok(top_k_accuracy(&calibrated, &test, k))?;
            ensure(before.to_bits() == after.to_bits(), || format!("site {site} top-{k}: {before} vs {after}"))?;
        }
    }
    Ok(format!("{} held-out cohorts, Top-1/Top-5 bit-identical", SITES.len()))
}

// --- Calibration improves train CSMF -----------------------------------------

fn biased_predictions(records: &[VARecord], c: usize, seed: u64) -> PredictionSet {
    let mut r = rng(seed);
    let mut set = PredictionSet::new("biased", c);
    for rec in records {
        let y = rec.true_cause.unwrap();
        let mut order = vec![];
        if r.random::<f64>() < 0.45 || y == 0 {
            order.push(y);
        } else {
            order.push(0);
            order.push(y);
        }
        let mut rest: Vec<usize> = (0..c).filter(|x| !order.contains(x)).collect();
        rest.shuffle(&mut r);
        order.extend(rest.into_iter().take(5 - order.len()));
        let ranked = RankedPrediction::from_causes(&order, Confidence::Medium).unwrap();
        set.insert(rec.id.clone(), Prediction::from_ranked(ranked)).unwrap();
    }
    set
}

fn train_csmf_improvement() -> Check {
    let mut cohorts = 0;
    let mut worst = f64::INFINITY;
    for (i, age) in AgeGroup::ALL.iter().enumerate() {
        for seed in 0..3u64 {
            let cb = CauseCodebook::canonical(*age);
            let sc = ok(SynthConfig::balanced(&SITES[..3], 120, cb.len(), seed))?;
            let (records, _) = ok(generate_cohort(&sc, &cb))?;
            let acc = 0.4 + 0.15 * seed as f64;
            let raw = ok(oracle_predictions(&records, cb.len(), acc, "oracle", 50 + i as u64))?;
            let one_hot = ok(csmf_accuracy(&raw, &records))?;
            for stratify in [false, true] {
                let params = ok(fit_calibrator(&raw, &records, &cb, stratify, None))?;
                let cal = ok(csmf_accuracy(&ok(apply_calibration(&raw, &params))?, &records))?;
                ensure(cal >= one_hot - 1e-12, || {
                    format!("{} seed {seed}: calibrated {cal} < one-hot {one_hot}", age.as_str())
                })?;
                worst = worst.min(cal - one_hot);
            }
            cohorts += 1;
        }
    }
    let cb = CauseCodebook::canonical(AgeGroup::Child);
    let sc = ok(SynthConfig::balanced(&SITES[..2], 500, cb.len(), 77))?;
    let (records, _) = ok(generate_cohort(&sc, &cb))?;
    let raw = biased_predictions(&records, cb.len(), 78);
    let one_hot = ok(csmf_accuracy(&raw, &records))?;
    let params = ok(fit_calibrator(&raw, &records, &cb, true, None))?;
    let cal = ok(csmf_accuracy(&ok(apply_calibration(&raw, &params))?, &records))?;
    ensure(cal - one_hot >= 0.02, || format!("biased cohort: calibrated {cal} vs one-hot {one_hot}"))?;
    Ok(format!(
        "{cohorts} cohorts, min gain {worst:.2e}; biased cohort {one_hot:.4} -> {cal:.4} (+{:.4})",
        cal - one_hot
    ))
}

// --- Logistic regression -----------------------------------------------------

fn logistic_regression() -> Check {
    let mut r = rng(42);
    let (n, d, c) = (40, 4, 3);
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()).collect();
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let w: Vec<f64> = (0..c * (d + 1)).map(|_| r.random::<f64>() - 0.5).collect();
    let lambda = 0.3;
    let (_, grad) = logreg_objective(&x, &y, c, lambda, &w);
    let h = 1e-5;
    let fd: Vec<f64> = (0..w.len())
        .map(|i| {
            let mut p = w.clone();
            p[i] += h;
            let mut m = w.clone();
            m[i] -= h;
            (logreg_objective(&x, &y, c, lambda, &p).0 - logreg_objective(&x, &y, c, lambda, &m).0) / (2.0 * h)
        })
        .collect();
    let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = grad.iter().map(|v| v * v).sum::<f64>().sqrt().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt());
    let rel = diff / scale;
    ensure(rel < 1e-5, || format!("gradient relative error {rel:e}"))?;

    let config = LogRegConfig::default();
    let model = ok(fit_logreg(&x, &y, c, 0.01, &config))?;
    let hist = &model.train_meta.loss_history;
    ensure(hist.len() > 1, || "no loss history".into())?;
    ensure(hist.windows(2).all(|p| p[1] <= p[0]), || "loss increased during training".into())?;

    let centers = [[4.0, 0.0], [-4.0, 0.0], [0.0, 4.0]];
    let mut sx = Vec::new();
    let mut sy = Vec::new();
    for i in 0..90 {
        let k = i % 3;
        sx.push(vec![centers[k][0] + r.random::<f64>() - 0.5, centers[k][1] + r.random::<f64>() - 0.5]);
        sy.push(k);
    }
    let sep = ok(fit_logreg(&sx, &sy, 3, 1e-3, &config))?;
    let correct = sx
        .iter()
        .zip(&sy)
        .filter(|(row, &k)| sep.predict_proba(row).unwrap().argmax() == k)
        .count();
    ensure(correct == sx.len(), || format!("separable Top-1 {correct}/{}", sx.len()))?;

    // Balanced labels: the unpenalised intercept then also sits at uniform.
    let big = ok(fit_logreg(&sx, &sy, 3, 1e6, &config))?;
    let dev = sx
        .iter()
        .flat_map(|row| big.predict_proba(row).unwrap().as_slice().to_vec())
        .map(|p| (p - 1.0 / 3.0).abs())
        .fold(0.0, f64::max);
    ensure(dev < 1e-3, || format!("large-lambda deviation from uniform {dev:e}"))?;
    Ok(format!(
        "grad rel err {rel:.2e}; {} monotone steps; separable 1.0; uniform dev {dev:.1e}",
        hist.len() - 1
    ))
}

// --- Harness integrity -------------------------------------------------------

fn loso_partitions() -> Result<(), String> {
    for sites in 2..=10usize {
        let mut r = rng(sites as u64);
        let mut records = Vec::new();
        let names: Vec<String> = (0..sites).map(|s| format!("site{s}")).collect();
        for name in &names {
            for _ in 0..r.random_range(10..40) {
                let id = format!("r{}", records.len());
                records.push(record(id, name, AgeGroup::Neonate, r.random_range(0..6)));
            }
        }
        let plan = ok(loso_split(&records, sites as u64))?;
        ensure(plan.folds.len() == sites, || format!("{sites} sites gave {} folds", plan.folds.len()))?;
        let all: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for fold in &plan.folds {
            let test: BTreeSet<&str> = fold.test_ids.iter().map(String::as_str).collect();
            let train: BTreeSet<&str> = fold.train_ids.iter().map(String::as_str).collect();
            ensure(test.is_disjoint(&train), || format!("{}: train/test overlap", fold.test_site))?;
            ensure(test.union(&train).count() == all.len(), || format!("{}: not a partition", fold.test_site))?;
            for r in &records {
                ensure((r.site == fold.test_site) == test.contains(r.id.as_str()), || {
                    format!("{}: record {} misplaced", fold.test_site, r.id)
                })?;
            }
            for id in &test {
                ensure(seen.insert(*id), || format!("{id} held out twice"))?;
            }
            let mut val_seen = BTreeSet::new();
            for (fit, val) in &fold.inner {
                let f: BTreeSet<&str> = fit.iter().map(String::as_str).collect();
                let v: BTreeSet<&str> = val.iter().map(String::as_str).collect();
                ensure(f.is_disjoint(&v) && f.union(&v).copied().collect::<BTreeSet<_>>() == train, || {
                    format!("{}: inner split is not a partition of train", fold.test_site)
                })?;
                ensure(v.iter().all(|id| val_seen.insert(*id)), || "inner validation overlap".into())?;
            }
            ensure(val_seen == train, || "inner validation sets do not cover train".into())?;
        }
        ensure(seen == all, || "some record never held out".into())?;
    }
    Ok(())
}

fn harness_integrity() -> Check {
    loso_partitions()?;

    let cb = CauseCodebook::canonical(AgeGroup::Child);
    let sc = ok(SynthConfig::balanced(&SITES, 20, cb.len(), 4))?;
    let (records, _) = ok(generate_cohort(&sc, &cb))?;
    let oracle = ok(oracle_predictions(&records, cb.len(), 0.9, "oracle", 5))?;
    let small = ExperimentInputs { codebook: cb.clone(), records: records.clone(), embeddings: None, fixed: vec![oracle] };
    let mut plan = ok(loso_split(&records, 1))?;
    let stolen = plan.folds[1].test_ids[0].clone();
    plan.folds[1].train_ids.push(stolen);
    match run_plan(&small, &HarnessConfig::default(), &plan) {
        Err(Error::Leakage(_)) => {}
        other => return Err(format!("leaked plan was not rejected: {:?}", other.map(|_| ())))?,
    }

    let sc = ok(SynthConfig::balanced(&SITES, 350, cb.len(), 17))?;
    let (records, _) = ok(generate_cohort(&sc, &cb))?;
    let oracle = ok(oracle_predictions(&records, cb.len(), 0.9, "oracle", 5))?;
    let n = records.len();
    let inputs = ExperimentInputs { codebook: cb, records, embeddings: None, fixed: vec![oracle] };
    let config = HarnessConfig { weighted_ensemble: false, stacker: false, ..Default::default() };
    let result = ok(run_loso(&inputs, &config))?;
    let summary = result.summaries.iter().find(|s| s.method == "oracle").ok_or("no oracle summary")?;
    let top1 = summary.top1.mean;
    ensure((0.86..=0.94).contains(&top1), || format!("oracle pooled Top-1 {top1}"))?;
    Ok(format!("LOSO partitions for 2-10 sites; leakage aborts; oracle pooled Top-1 {top1:.4} on {n} cases"))
}

// --- Ensemble sanity ---------------------------------------------------------

/// Lambda from the default grid with the best inner 5-fold Top-1, as the
/// harness chooses it.
fn stacker_lambda(bases: &[PredictionSet], train: &[VARecord]) -> Result<f64, String> {
    let ids: Vec<String> = train.iter().map(|r| r.id.clone()).collect();
    let labels: Vec<usize> = train.iter().map(|r| r.true_cause.unwrap()).collect();
    let splits = ok(stratified_kfold(&ids, &labels, 5, 7))?;
    let mut best = (f64::NAN, -1.0);
    for &lambda in &DEFAULT_LAMBDA_GRID {
        let mut oof = PredictionSet::new("inner", bases[0].n_causes());
        for (fit_ids, val_ids) in &splits {
            let fit: Vec<VARecord> = train.iter().filter(|r| fit_ids.contains(&r.id)).cloned().collect();
            let pick = |ids: &[String]| -> Vec<PredictionSet> {
                bases.iter().map(|b| b.subset(ids.iter().map(String::as_str)).unwrap()).collect()
            };
            let model = ok(fit_stacker(&pick(fit_ids), &fit, lambda, &LogRegConfig::default()))?;
            for (id, p) in ok(predict_stacker(&model, &pick(val_ids), "inner"))?.iter() {
                oof.insert(id.clone(), p.clone()).unwrap();
            }
        }
        let top1 = ok(top_k_accuracy(&oof, train, 1))?;
        if top1 > best.1 {
            best = (lambda, top1);
        }
    }
    Ok(best.0)
}

fn ensemble_sanity() -> Check {
    let cb = CauseCodebook::canonical(AgeGroup::Neonate);
    let c = cb.len();
    let sc = ok(SynthConfig::balanced(&SITES[..3], 200, c, 8))?;
    let (records, _) = ok(generate_cohort(&sc, &cb))?;
    let mut r = rng(42);
    let mut perfect = PredictionSet::new("perfect", c);
    let mut random = PredictionSet::new("random", c);
    for rec in &records {
        let y = rec.true_cause.unwrap();
        perfect.insert(rec.id.clone(), Prediction::from_probs(ProbVector::one_hot(c, y))).unwrap();
        let p = ProbVector::new(random_dist(&mut r, c, 0.0)).unwrap();
        random.insert(rec.id.clone(), Prediction::from_probs(p)).unwrap();
    }
    let bases = [perfect, random];
    let weights = ok(fit_weighted_ensemble(&bases, &records, 0.05))?;
    let w_perfect = weights.weights[weights.methods.iter().position(|m| m == "perfect").ok_or("method lost")?];
    ensure(w_perfect >= 0.95, || format!("perfect method weight {w_perfect}"))?;

    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.true_cause.unwrap()).collect();
    let mut oof = PredictionSet::new("stacker", c);
    for (train_ids, test_ids) in ok(stratified_kfold(&ids, &labels, 5, 42))? {
        let train: Vec<VARecord> = records.iter().filter(|r| train_ids.contains(&r.id)).cloned().collect();
        let sub = |ids: &[String]| -> Vec<PredictionSet> {
            bases.iter().map(|b| b.subset(ids.iter().map(String::as_str)).unwrap()).collect()
        };
        let lambda = stacker_lambda(&bases, &train)?;
        let model = ok(fit_stacker(&sub(&train_ids), &train, lambda, &LogRegConfig::default()))?;
        for (id, p) in ok(predict_stacker(&model, &sub(&test_ids), "stacker"))?.iter() {
            oof.insert(id.clone(), p.clone()).unwrap();
        }
    }
    let stack = ok(top_k_accuracy(&oof, &records, 1))?;
    let best = bases
        .iter()
        .map(|b| top_k_accuracy(b, &records, 1).unwrap())
        .fold(0.0, f64::max);
    ensure(stack >= 0.98 * best, || format!("stacker OOF Top-1 {stack} vs best base {best}"))?;
    Ok(format!("perfect weight {w_perfect}; stacker OOF Top-1 {stack:.4} vs best base {best:.4}"))
}

// --- Prompt and parser -------------------------------------------------------

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini")
}

fn prompt_round_trip() -> Check {
    for (age, want) in [(AgeGroup::Adult, 34), (AgeGroup::Child, 21), (AgeGroup::Neonate, 6)] {
        let cb = CauseCodebook::canonical(age);
        let text = ok(PromptTemplate::builtin(age).instantiate(&cb))?;
        let unresolved = lava_core::llm::unresolved_placeholders(&text);
        ensure(unresolved.is_empty(), || format!("{}: unresolved {unresolved:?}", age.as_str()))?;
        let mut lines = text.lines();
        lines.find(|l| l.starts_with("ALLOWED CAUSES FOR")).ok_or("no cause list heading")?;
        let list = lines.next().ok_or("no cause list")?.trim().trim_end_matches('.');
        let listed: Vec<&str> = list.split("; ").collect();
        let unique: BTreeSet<&str> = listed.iter().copied().collect();
        let labels: BTreeSet<&str> = cb.labels().iter().map(String::as_str).collect();
        ensure(listed.len() == want && unique == labels, || {
            format!("{}: {} labels listed, {} distinct codebook labels", age.as_str(), listed.len(), labels.len())
        })?;
    }

    let cb = CauseCodebook::canonical(AgeGroup::Adult);
    let mut r = rng(42);
    for i in 0..100 {
        let k = r.random_range(1..=5);
        let pred = random_ranked(&mut r, cb.len(), k);
        let text = ok(serialize_ranked(&pred, &cb))?;
        let back = ok(parse_response(&text, &cb))?;
        ensure(back == pred, || format!("case {i}: {text} parsed differently"))?;
    }

    let dir = fixture_dir();
    let records: Vec<VARecord> = ok(load_records(&dir.join("records.csv"), &cb))?.into_iter().take(5).collect();
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = LlmClientConfig { cache_dir: cache.path().to_owned(), ..Default::default() };
    let replay = ok(ReplayTransport::from_jsonl(&dir.join("replay.jsonl")))?;
    let outcome = ok(predict_batch(&records, &cb, &PromptTemplate::builtin(AgeGroup::Adult), &config, "llm", move || {
        Ok(Box::new(replay) as Box<dyn ChatTransport>)
    }))?;
    ensure(outcome.failures.is_empty() && outcome.predictions.len() == 5, || {
        format!("replay: {} parsed, failures {:?}", outcome.predictions.len(), outcome.failures)
    })?;
    Ok(format!("34/21/6 labels, 100 round trips, replay 5/5 ({} requests)", outcome.requests))
}

// --- Replication hook ----------------------------------------------------------

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let dest = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &dest)?;
        } else {
            std::fs::copy(entry.path(), dest)?;
        }
    }
    Ok(())
}

fn replication_hook() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let work = tmp.path().join("mini");
    copy_dir(&fixture_dir(), &work).map_err(|e| e.to_string())?;
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_lava"))
        .args(["evaluate", "--config", "config.json"])
        .current_dir(&work)
        .env_remove("OPENAI_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("evaluate exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    let tables = std::fs::read_to_string(work.join("tables.txt")).map_err(|e| e.to_string())?;
    for heading in ["Top-1 accuracy by site", "Top-5 accuracy by site", "CSMF accuracy by site", "Pooled across sites"] {
        ensure(tables.contains(heading), || format!("tables lack {heading:?}"))?;
    }
    for site in SITES {
        ensure(tables.lines().any(|l| l.starts_with(site)), || format!("tables lack a row for {site}"))?;
    }
    let text = std::fs::read_to_string(work.join("reports.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let reports = v["reports"].as_array().ok_or("reports missing")?;
    let summaries = v["summaries"].as_array().ok_or("summaries missing")?;
    let methods: BTreeSet<&str> = summaries.iter().filter_map(|s| s["method"].as_str()).collect();
    for m in ["llm", "llm-calibrated", "lcva"] {
        ensure(methods.contains(m), || format!("no summary for {m}"))?;
    }
    let mut checked = 0;
    for s in summaries {
        let method = s["method"].as_str().unwrap_or_default();
        let rows: Vec<&serde_json::Value> = reports.iter().filter(|r| r["method"] == method).collect();
        ensure(rows.len() == SITES.len(), || format!("{method}: {} site rows", rows.len()))?;
        for metric in ["top1", "top5", "csmf"] {
            let Some(mean) = s[metric]["mean"].as_f64() else { continue };
            let vals: Vec<f64> = rows.iter().map(|r| r[metric].as_f64().unwrap()).collect();
            let direct = vals.iter().sum::<f64>() / vals.len() as f64;
            ensure((mean - direct).abs() <= 1e-12, || format!("{method} {metric}: pooled {mean} vs {direct}"))?;
            checked += 1;
        }
    }
    Ok(format!("{} methods, {checked} pooled means match site means", summaries.len()))
}

// --- Runner ------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 9] = [
        ("csmf-identities", Duration::from_secs(1), csmf_identities),
        ("calibration-lp-optimality", Duration::from_secs(30), lp_optimality),
        ("calibration-rank-preservation", Duration::from_secs(1), rank_preservation),
        ("calibration-train-csmf", Duration::from_secs(5), train_csmf_improvement),
        ("logistic-regression", Duration::from_secs(10), logistic_regression),
        ("harness-integrity", Duration::from_secs(60), harness_integrity),
        ("ensemble-sanity", Duration::from_secs(60), ensemble_sanity),
        ("prompt-parse-round-trip", Duration::from_secs(5), prompt_round_trip),
        ("replication-hook", Duration::from_secs(60), replication_hook),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; exceeded {budget:?} budget")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS {name} ({:.2}s): {detail}", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({:.2}s): {why}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
