//! Population-level calibration of ranked predictions.
//!
//! A case with ranked causes `r_1..r_k` and stratum `s` receives
//!
//! ```text
//! q_c = alpha[s][j]                               if c = r_j
//! q_c = (1 - sum_{j<=k} alpha[s][j]) * pi~_c      otherwise
//! pi~_c = pi_c / sum_{c' not ranked} pi_c'
//! ```
//!
//! with `alpha[s]` nonincreasing, nonnegative and summing to at most one.
//! The weights minimise the L1 gap between the mean calibrated vector and a
//! target distribution, which is a linear program once auxiliary variables
//! `t_c >= |qbar_c - r_c|` are introduced.
//!
//! Edge cases: when every non-ranked cause has zero prevalence the residual
//! is spread uniformly over the non-ranked causes; when the list covers
//! every cause the residual is spread uniformly over the list. Both keep
//! `q` a distribution and affine in `alpha`.

pub mod simplex;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{
    empirical_prevalence, CauseCodebook, CauseIndex, Confidence, Prediction, PredictionSet,
    PrevalenceVector, ProbVector, RankedPrediction, VARecord, MAX_RANKED,
};
use crate::error::{Error, Result};
use crate::par;
use simplex::{LinearProgram, Relation};

/// Weights for one stratum, by rank.
pub type RankWeights = [f64; MAX_RANKED];

/// The one-hot default: all mass on the rank-1 cause.
pub const ONE_HOT_WEIGHTS: RankWeights = [1.0, 0.0, 0.0, 0.0, 0.0];

const CONSTRAINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub stratified: bool,
    /// Weight vector per confidence stratum. Unstratified fits repeat the
    /// shared vector under every stratum.
    pub strata: BTreeMap<Confidence, RankWeights>,
    pub target: PrevalenceVector,
    pub prevalence: PrevalenceVector,
    /// Achieved `sum_c |qbar_c - r_c|` on the fitting cohort.
    #[serde(default)]
    pub objective: Option<f64>,
}

impl CalibrationParams {
    /// Parameters applying `weights` to every stratum.
    pub fn uniform(weights: RankWeights, target: PrevalenceVector, prevalence: PrevalenceVector) -> Result<Self> {
        check_weights(&weights)?;
        Ok(CalibrationParams {
            stratified: false,
            strata: Confidence::ALL.iter().map(|&c| (c, weights)).collect(),
            target,
            prevalence,
            objective: None,
        })
    }

    pub fn weights(&self, stratum: Confidence) -> &RankWeights {
        &self.strata[&stratum]
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.len() != self.prevalence.len() {
            return Err(Error::validation("target and prevalence lengths differ"));
        }
        for c in Confidence::ALL {
            let w = self
                .strata
                .get(&c)
                .ok_or_else(|| Error::validation(format!("missing weights for stratum {c}")))?;
            check_weights(w)?;
        }
        Ok(())
    }
}

/// Checks nonnegativity, monotonicity and the unit budget.
pub fn check_weights(w: &RankWeights) -> Result<()> {
    if w.iter().any(|v| !v.is_finite() || *v < -CONSTRAINT_TOL) {
        return Err(Error::validation(format!("weights {w:?} must be finite and nonnegative")));
    }
    if w.windows(2).any(|p| p[1] > p[0] + CONSTRAINT_TOL) {
        return Err(Error::validation(format!("weights {w:?} must be nonincreasing by rank")));
    }
    if w.iter().sum::<f64>() > 1.0 + CONSTRAINT_TOL {
        return Err(Error::validation(format!("weights {w:?} sum above one")));
    }
    Ok(())
}

/// How the residual mass of one case is spread.
#[derive(Debug, Clone, PartialEq)]
struct Residual {
    /// (cause, share) pairs summing to one.
    shares: Vec<(CauseIndex, f64)>,
}

fn residual_shares(ranked: &RankedPrediction, prevalence: &[f64]) -> Residual {
    let c = prevalence.len();
    let mut in_list = vec![false; c];
    for cause in ranked.causes() {
        in_list[cause] = true;
    }
    let rest: Vec<CauseIndex> = (0..c).filter(|&i| !in_list[i]).collect();
    if rest.is_empty() {
        let k = ranked.len() as f64;
        return Residual { shares: ranked.causes().map(|i| (i, 1.0 / k)).collect() };
    }
    let denom: f64 = rest.iter().map(|&i| prevalence[i]).sum();
    let shares = if denom > 0.0 {
        rest.iter().map(|&i| (i, prevalence[i] / denom)).collect()
    } else {
        let u = 1.0 / rest.len() as f64;
        rest.iter().map(|&i| (i, u)).collect()
    };
    Residual { shares }
}

/// Calibrated probability vector of one case.
pub fn calibrate_case(ranked: &RankedPrediction, weights: &RankWeights, prevalence: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; prevalence.len()];
    let mut used = 0.0;
    for (j, cause) in ranked.causes().enumerate() {
        q[cause] += weights[j];
        used += weights[j];
    }
    let residual = (1.0 - used).max(0.0);
    for (i, share) in residual_shares(ranked, prevalence).shares {
        q[i] += residual * share;
    }
    q
}

fn stratum_block(stratify: bool, c: Confidence) -> usize {
    if stratify {
        c.index()
    } else {
        0
    }
}

/// The calibration LP in inequality form over `x = (alpha blocks, t)`.
///
/// `qbar(alpha) = offset + coeffs · alpha` is kept alongside so objective
/// values can be evaluated without the LP.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationLP {
    pub stratified: bool,
    pub n_causes: usize,
    /// Number of weight blocks (1, or 3 when stratified).
    pub blocks: usize,
    /// Cases per block.
    pub block_counts: Vec<usize>,
    /// `coeffs[c][b * 5 + j]`: derivative of `qbar_c` in `alpha[b][j]`.
    pub coeffs: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    pub target: PrevalenceVector,
    pub prevalence: PrevalenceVector,
    pub program: LinearProgram,
}

impl CalibrationLP {
    pub fn num_weight_vars(&self) -> usize {
        self.blocks * MAX_RANKED
    }

    pub fn num_variables(&self) -> usize {
        self.num_weight_vars() + self.n_causes
    }

    /// Mean calibrated vector for flattened block weights.
    pub fn mean_calibrated(&self, alpha: &[f64]) -> Vec<f64> {
        self.coeffs
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| b + row.iter().zip(alpha).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    /// `sum_c |qbar_c - r_c|` at flattened block weights.
    pub fn l1_gap(&self, alpha: &[f64]) -> f64 {
        self.mean_calibrated(alpha)
            .iter()
            .zip(self.target.as_slice())
            .map(|(q, r)| (q - r).abs())
            .sum()
    }

    /// The same problem with one weight vector shared by every block.
    pub fn pooled(&self) -> CalibrationLP {
        if self.blocks == 1 {
            return self.clone();
        }
        let coeffs: Vec<Vec<f64>> = self
            .coeffs
            .iter()
            .map(|row| {
                (0..MAX_RANKED)
                    .map(|j| (0..self.blocks).map(|b| row[b * MAX_RANKED + j]).sum())
                    .collect()
            })
            .collect();
        let program = assemble(&coeffs, &self.offset, self.target.as_slice(), 1);
        CalibrationLP {
            stratified: false,
            n_causes: self.n_causes,
            blocks: 1,
            block_counts: vec![self.block_counts.iter().sum()],
            coeffs,
            offset: self.offset.clone(),
            target: self.target.clone(),
            prevalence: self.prevalence.clone(),
            program,
        }
    }
}

fn assemble(coeffs: &[Vec<f64>], offset: &[f64], target: &[f64], blocks: usize) -> LinearProgram {
    let c = offset.len();
    let nw = blocks * MAX_RANKED;
    let nv = nw + c;
    let mut objective = vec![0.0; nv];
    for o in objective.iter_mut().skip(nw) {
        *o = 1.0;
    }
    let mut lp = LinearProgram::new(objective);
    for cause in 0..c {
        // qbar_c - r_c <= t_c  and  r_c - qbar_c <= t_c
        let gap = target[cause] - offset[cause];
        let mut up = vec![0.0; nv];
        up[..nw].copy_from_slice(&coeffs[cause]);
        up[nw + cause] = -1.0;
        lp.add(up, Relation::Le, gap);
        let mut down = vec![0.0; nv];
        for (d, a) in down.iter_mut().zip(&coeffs[cause]) {
            *d = -a;
        }
        down[nw + cause] = -1.0;
        lp.add(down, Relation::Le, -gap);
    }
    for b in 0..blocks {
        for j in 0..MAX_RANKED - 1 {
            let mut row = vec![0.0; nv];
            row[b * MAX_RANKED + j + 1] = 1.0;
            row[b * MAX_RANKED + j] = -1.0;
            lp.add(row, Relation::Le, 0.0);
        }
        let mut budget = vec![0.0; nv];
        for v in budget.iter_mut().skip(b * MAX_RANKED).take(MAX_RANKED) {
            *v = 1.0;
        }
        lp.add(budget, Relation::Le, 1.0);
    }
    lp
}

fn ranked_of<'a>(id: &str, pred: &'a Prediction) -> Result<&'a RankedPrediction> {
    pred.ranked
        .as_ref()
        .ok_or_else(|| Error::validation(format!("record {id} has no ranked prediction to calibrate")))
}

/// Builds the calibration LP from ranked predictions.
pub fn build_lp(
    preds: &PredictionSet,
    prevalence: &PrevalenceVector,
    target: &PrevalenceVector,
    stratify: bool,
) -> Result<CalibrationLP> {
    if preds.is_empty() {
        return Err(Error::validation("cannot calibrate on an empty prediction set"));
    }
    let c = preds.n_causes();
    if prevalence.len() != c || target.len() != c {
        return Err(Error::validation(format!(
            "prevalence/target lengths ({}, {}) must equal the {c} causes",
            prevalence.len(),
            target.len()
        )));
    }
    let blocks = if stratify { Confidence::ALL.len() } else { 1 };
    let nw = blocks * MAX_RANKED;
    let n = preds.len() as f64;
    let mut coeffs = vec![vec![0.0; nw]; c];
    let mut offset = vec![0.0; c];
    let mut block_counts = vec![0usize; blocks];
    for (id, pred) in preds.iter() {
        let ranked = ranked_of(id, pred)?;
        let b = stratum_block(stratify, ranked.stratum());
        block_counts[b] += 1;
        let residual = residual_shares(ranked, prevalence.as_slice());
        // q_c = sum_j [c = r_j] a_j + (1 - sum_{j<=k} a_j) w_c
        for &(cause, w) in &residual.shares {
            offset[cause] += w / n;
            for j in 0..ranked.len() {
                coeffs[cause][b * MAX_RANKED + j] -= w / n;
            }
        }
        for (j, cause) in ranked.causes().enumerate() {
            coeffs[cause][b * MAX_RANKED + j] += 1.0 / n;
        }
    }
    let program = assemble(&coeffs, &offset, target.as_slice(), blocks);
    Ok(CalibrationLP {
        stratified: stratify,
        n_causes: c,
        blocks,
        block_counts,
        coeffs,
        offset,
        target: target.clone(),
        prevalence: prevalence.clone(),
        program,
    })
}

/// Removes round-off from simplex output so the weights satisfy the
/// constraints exactly.
fn clean_weights(raw: &[f64]) -> RankWeights {
    let mut w = [0.0; MAX_RANKED];
    for (j, v) in raw.iter().take(MAX_RANKED).enumerate() {
        w[j] = v.max(0.0);
        if j > 0 && w[j] > w[j - 1] {
            w[j] = w[j - 1];
        }
    }
    let sum: f64 = w.iter().sum();
    if sum > 1.0 {
        for v in w.iter_mut() {
            *v /= sum;
        }
    }
    w
}

fn solve_blocks(lp: &CalibrationLP) -> Result<Vec<RankWeights>> {
    let sol = lp
        .program
        .solve()
        .map_err(|e| Error::validation(format!("calibration LP: {e}")))?;
    debug_assert!(lp.program.max_violation(&sol.x) < 1e-7);
    Ok((0..lp.blocks)
        .map(|b| clean_weights(&sol.x[b * MAX_RANKED..(b + 1) * MAX_RANKED]))
        .collect())
}

/// Solves the LP exactly. Strata without any fitting case fall back to the
/// pooled (unstratified) solution.
pub fn solve_lp(lp: &CalibrationLP) -> Result<CalibrationParams> {
    let solved = solve_blocks(lp)?;
    let mut per_block = solved.clone();
    if lp.blocks > 1 && lp.block_counts.contains(&0) {
        let pooled = solve_blocks(&lp.pooled())?[0];
        for (b, count) in lp.block_counts.iter().enumerate() {
            if *count == 0 {
                per_block[b] = pooled;
            }
        }
    }
    let flat: Vec<f64> = per_block.iter().flatten().copied().collect();
    let objective = lp.l1_gap(&flat);
    let strata = Confidence::ALL
        .iter()
        .map(|&c| (c, per_block[stratum_block(lp.stratified, c)]))
        .collect();
    Ok(CalibrationParams {
        stratified: lp.stratified,
        strata,
        target: lp.target.clone(),
        prevalence: lp.prevalence.clone(),
        objective: Some(objective),
    })
}

/// Replaces every case's probability vector by its calibrated vector; the
/// ranked list is carried through unchanged.
pub fn apply_calibration(preds: &PredictionSet, params: &CalibrationParams) -> Result<PredictionSet> {
    params.validate()?;
    let c = preds.n_causes();
    if params.prevalence.len() != c {
        return Err(Error::validation(format!(
            "calibration fitted on {} causes, predictions have {c}",
            params.prevalence.len()
        )));
    }
    let entries: Vec<(&String, &Prediction)> = preds.iter().collect();
    let calibrated = par::map(&entries, |(id, pred)| -> Result<(String, Prediction)> {
        let ranked = ranked_of(id, pred)?;
        if let Some(bad) = ranked.causes().find(|&x| x >= c) {
            return Err(Error::validation(format!("record {id}: cause index {bad} out of range")));
        }
        let q = calibrate_case(ranked, params.weights(ranked.stratum()), params.prevalence.as_slice());
        let probs = ProbVector::new(q)?;
        Ok(((*id).clone(), Prediction { probs: Some(probs), ranked: Some(ranked.clone()) }))
    });
    let mut out = PredictionSet::new(format!("{}-calibrated", preds.method), c);
    for item in calibrated {
        let (id, pred) = item?;
        out.insert(id, pred)?;
    }
    Ok(out)
}

/// Fits calibration weights on a labeled training cohort. The prevalence is
/// the training label distribution; the target defaults to it.
pub fn fit_calibrator(
    train_preds: &PredictionSet,
    train_records: &[VARecord],
    codebook: &CauseCodebook,
    stratify: bool,
    target: Option<&PrevalenceVector>,
) -> Result<CalibrationParams> {
    let prevalence = empirical_prevalence(train_records, codebook)?;
    let target = target.cloned().unwrap_or_else(|| prevalence.clone());
    let subset = train_preds.subset(train_records.iter().map(|r| r.id.as_str()))?;
    let lp = build_lp(&subset, &prevalence, &target, stratify)?;
    solve_lp(&lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AgeGroup, RankedCause, Sex};
    use proptest::prelude::*;

    fn ranked(causes: &[usize], conf: Confidence) -> RankedPrediction {
        RankedPrediction::from_causes(causes, conf).unwrap()
    }

    fn set_of(c: usize, lists: &[(&[usize], Confidence)]) -> PredictionSet {
        let mut set = PredictionSet::new("llm", c);
        for (i, (l, conf)) in lists.iter().enumerate() {
            set.insert(format!("r{i}"), Prediction::from_ranked(ranked(l, *conf))).unwrap();
        }
        set
    }

    fn prev(v: &[f64]) -> PrevalenceVector {
        PrevalenceVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn apply_formula_examples() {
        let pi = [0.4, 0.3, 0.2, 0.1];
        let r = ranked(&[0, 1], Confidence::High);
        let q = calibrate_case(&r, &[0.5, 0.3, 0.0, 0.0, 0.0], &pi);
        let want = [0.5, 0.3, 0.2 * 0.2 / 0.3, 0.2 * 0.1 / 0.3];
        for (a, b) in q.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{q:?}");
        }
        assert_eq!(calibrate_case(&r, &ONE_HOT_WEIGHTS, &pi), vec![1.0, 0.0, 0.0, 0.0]);
        let q = calibrate_case(&r, &[0.0; 5], &pi);
        assert_eq!(q[0], 0.0);
        assert_eq!(q[1], 0.0);
        assert!((q[2] - 2.0 / 3.0).abs() < 1e-15 && (q[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_and_full_cover() {
        // Non-ranked causes all have zero prevalence: uniform over them.
        let q = calibrate_case(&ranked(&[0, 1], Confidence::Low), &[0.4, 0.2, 0.0, 0.0, 0.0], &[0.5, 0.5, 0.0, 0.0]);
        for (a, b) in q.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((a - b).abs() < 1e-15, "{q:?}");
        }
        // Ranked list covers all causes: residual split over the list.
        let q = calibrate_case(&ranked(&[2, 0, 1], Confidence::Low), &[0.5, 0.2, 0.0, 0.0, 0.0], &[0.2, 0.3, 0.5]);
        assert!((q[2] - 0.6).abs() < 1e-15 && (q[0] - 0.3).abs() < 1e-15 && (q[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lp_structure() {
        let lists: Vec<(&[usize], Confidence)> = vec![(&[0, 1], Confidence::High); 3];
        let set = set_of(4, &lists);
        let p = prev(&[0.25; 4]);
        let lp = build_lp(&set, &p, &p, false).unwrap();
        assert_eq!(lp.num_variables(), 5 + 4);
        assert_eq!(lp.program.num_vars(), 9);
        let lp = build_lp(&set, &p, &p, true).unwrap();
        assert_eq!(lp.num_variables(), 15 + 4);
        assert_eq!(lp.block_counts, vec![3, 0, 0]);
        assert!(build_lp(&PredictionSet::new("x", 4), &p, &p, false).is_err());
    }

    #[test]
    fn affine_coefficients_match_hand_expansion() {
        // C = 4, pi = (0.4, 0.3, 0.2, 0.1); case A ranks (0, 1), case B ranks (2).
        // Case A residual weights over {2, 3}: (2/3, 1/3).
        // Case B residual weights over {0, 1, 3}: (0.5, 0.375, 0.125).
        // qbar_c = 0.5 * (q_A,c + q_B,c):
        //   qbar_0 = 0.5 a1 + 0.5 * 0.5 (1 - b1)
        //   qbar_1 = 0.5 a2 + 0.5 * 0.375 (1 - b1)
        //   qbar_2 = 0.5 * 2/3 (1 - a1 - a2) + 0.5 b1
        //   qbar_3 = 0.5 * 1/3 (1 - a1 - a2) + 0.5 * 0.125 (1 - b1)
        // Unstratified: a = b = alpha.
        let set = set_of(4, &[(&[0, 1], Confidence::High), (&[2], Confidence::High)]);
        let pi = prev(&[0.4, 0.3, 0.2, 0.1]);
        let lp = build_lp(&set, &pi, &pi, false).unwrap();
        let want_offset = [0.25, 0.1875, 1.0 / 3.0, 1.0 / 6.0 + 0.0625];
        let want_coeffs = [
            [0.5 - 0.25, 0.0, 0.0, 0.0, 0.0],
            [-0.1875, 0.5, 0.0, 0.0, 0.0],
            [-1.0 / 3.0 + 0.5, -1.0 / 3.0, 0.0, 0.0, 0.0],
            [-1.0 / 6.0 - 0.0625, -1.0 / 6.0, 0.0, 0.0, 0.0],
        ];
        for c in 0..4 {
            assert!((lp.offset[c] - want_offset[c]).abs() < 1e-15, "offset {c}");
            for j in 0..5 {
                assert!((lp.coeffs[c][j] - want_coeffs[c][j]).abs() < 1e-15, "coeff {c},{j}");
            }
        }
    }

    #[test]
    fn zero_residual_optimum() {
        // Rank-1 causes already match the target exactly.
        let set = set_of(
            3,
            &[(&[0, 1], Confidence::High), (&[0, 2], Confidence::High), (&[1, 0], Confidence::Low), (&[2], Confidence::Medium)],
        );
        let target = prev(&[0.5, 0.25, 0.25]);
        let lp = build_lp(&set, &target, &target, false).unwrap();
        let params = solve_lp(&lp).unwrap();
        assert!(params.objective.unwrap() < 1e-12);
        assert!(lp.l1_gap(&ONE_HOT_WEIGHTS) < 1e-15);
    }

    #[test]
    fn single_cause_target_still_feasible() {
        let set = set_of(3, &[(&[0, 1], Confidence::High), (&[1], Confidence::High), (&[2, 0], Confidence::High)]);
        let pi = prev(&[0.4, 0.4, 0.2]);
        let target = prev(&[1.0, 0.0, 0.0]);
        let params = solve_lp(&build_lp(&set, &pi, &target, true).unwrap()).unwrap();
        params.validate().unwrap();
        assert!(params.objective.unwrap().is_finite());
    }

    #[test]
    fn empty_strata_fall_back_to_pooled() {
        let set = set_of(3, &[(&[0, 1], Confidence::High), (&[1], Confidence::High), (&[2, 0], Confidence::High)]);
        let pi = prev(&[0.4, 0.4, 0.2]);
        let lp = build_lp(&set, &pi, &pi, true).unwrap();
        let strat = solve_lp(&lp).unwrap();
        let pooled = solve_lp(&build_lp(&set, &pi, &pi, false).unwrap()).unwrap();
        assert_eq!(strat.weights(Confidence::Low), pooled.weights(Confidence::High));
        assert_eq!(strat.weights(Confidence::Medium), pooled.weights(Confidence::High));
    }

    #[test]
    fn stratified_equals_unstratified_on_homogeneous_cohort() {
        let set = set_of(
            4,
            &[(&[0, 1], Confidence::Medium), (&[1, 2], Confidence::Medium), (&[0], Confidence::Medium), (&[3, 0], Confidence::Medium)],
        );
        let pi = prev(&[0.1, 0.2, 0.3, 0.4]);
        let a = solve_lp(&build_lp(&set, &pi, &pi, true).unwrap()).unwrap();
        let b = solve_lp(&build_lp(&set, &pi, &pi, false).unwrap()).unwrap();
        assert!((a.objective.unwrap() - b.objective.unwrap()).abs() < 1e-12);
        for s in Confidence::ALL {
            for j in 0..5 {
                assert!((a.weights(s)[j] - b.weights(Confidence::Medium)[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn apply_keeps_ranked_and_rejects_out_of_range() {
        let set = set_of(3, &[(&[0, 1], Confidence::High), (&[2], Confidence::Low)]);
        let pi = prev(&[0.5, 0.3, 0.2]);
        let params = CalibrationParams::uniform([0.6, 0.2, 0.0, 0.0, 0.0], pi.clone(), pi).unwrap();
        let out = apply_calibration(&set, &params).unwrap();
        assert_eq!(out.get("r0").unwrap().ranked, set.get("r0").unwrap().ranked);
        let wide = set_of(5, &[(&[4], Confidence::High)]);
        assert!(apply_calibration(&wide, &params).is_err());
    }

    #[test]
    fn params_json_shape() {
        let pi = prev(&[0.5, 0.5]);
        let params = CalibrationParams::uniform(ONE_HOT_WEIGHTS, pi.clone(), pi).unwrap();
        let v: serde_json::Value = serde_json::to_value(&params).unwrap();
        assert_eq!(v["strata"]["high"].as_array().unwrap().len(), 5);
        assert!(v["target"].is_array() && v["prevalence"].is_array());
        let back: CalibrationParams = serde_json::from_value(v).unwrap();
        assert_eq!(back.strata, params.strata);
    }

    #[test]
    fn fit_on_perfect_predictor_is_exact() {
        let book = CauseCodebook::canonical(AgeGroup::Neonate);
        let mut recs = Vec::new();
        let mut set = PredictionSet::new("llm", 6);
        for i in 0..30 {
            let y = [0, 0, 1, 3, 4, 5][i % 6];
            recs.push(VARecord {
                id: format!("n{i}"),
                site: "x".into(),
                age_group: AgeGroup::Neonate,
                age_value: 1.0,
                sex: Sex::Unknown,
                symptoms: Default::default(),
                narrative: None,
                true_cause: Some(y),
            });
            let second = (y + 1) % 6;
            set.insert(
                format!("n{i}"),
                Prediction::from_ranked(
                    RankedPrediction::new(vec![
                        RankedCause { cause: y, confidence: Confidence::High },
                        RankedCause { cause: second, confidence: Confidence::Low },
                    ])
                    .unwrap(),
                ),
            )
            .unwrap();
        }
        let params = fit_calibrator(&set, &recs, &book, true, None).unwrap();
        assert!(params.objective.unwrap() < 1e-12);
    }

    proptest! {
        #[test]
        fn calibrated_rows_are_distributions(
            raw in proptest::collection::vec(0.0f64..1.0, 5),
            scale in 0.0f64..=1.0,
            pi_raw in proptest::collection::vec(0.0f64..1.0, 6),
            list in proptest::sample::subsequence((0usize..6).collect::<Vec<_>>(), 1..=5),
            boundary in proptest::bool::ANY,
        ) {
            let mut w = raw.clone();
            w.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = w.iter().sum();
            let s = if boundary { 1.0 } else { scale };
            let w: RankWeights = std::array::from_fn(|j| if total > 0.0 { w[j] / total * s } else { 0.0 });
            prop_assume!(check_weights(&w).is_ok());
            let pi_sum: f64 = pi_raw.iter().sum();
            prop_assume!(pi_sum > 0.0);
            let pi: Vec<f64> = pi_raw.iter().map(|p| p / pi_sum).collect();
            let r = ranked(&list, Confidence::High);
            let q = calibrate_case(&r, &w, &pi);
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|v| *v >= 0.0));
            let by_rank: Vec<f64> = list.iter().map(|&c| q[c]).collect();
            prop_assert!(by_rank.windows(2).all(|p| p[0] >= p[1] - 1e-15));
        }
    }
}
