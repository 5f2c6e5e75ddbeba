use lava_core::calibrate::{build_lp, calibrate_case, solve_lp, RankWeights};
use lava_core::{Confidence, Prediction, PredictionSet, PrevalenceVector, RankedCause, RankedPrediction};
use proptest::prelude::*;

fn dist(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Nonincreasing, nonnegative, summing to at most one.
fn feasible(raw: [f64; 5], budget: f64) -> RankWeights {
    let mut w = raw;
    w.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = w.iter().sum();
    w.map(|v| v / s * budget)
}

fn gap(set: &PredictionSet, weights: &dyn Fn(Confidence) -> RankWeights, prev: &[f64], target: &[f64]) -> f64 {
    let c = target.len();
    let mut mean = vec![0.0; c];
    for (_, p) in set.iter() {
        let r = p.ranked.as_ref().unwrap();
        for (m, q) in mean.iter_mut().zip(calibrate_case(r, &weights(r.stratum()), prev)) {
            *m += q / set.len() as f64;
        }
    }
    mean.iter().zip(target).map(|(m, t)| (m - t).abs()).sum()
}

fn instance() -> impl Strategy<Value = (PredictionSet, Vec<f64>, Vec<f64>)> {
    (2usize..9).prop_flat_map(|c| {
        let case = (
            Just(c),
            proptest::sample::subsequence((0..c).collect::<Vec<_>>(), 1..=c.min(5)).prop_shuffle(),
            0usize..3,
        );
        (
            proptest::collection::vec(case, 1..40),
            proptest::collection::vec(0.01f64..1.0, c),
            proptest::collection::vec(0.01f64..1.0, c),
        )
            .prop_map(move |(cases, prev, target)| {
                let mut set = PredictionSet::new("m", c);
                for (i, (_, causes, conf)) in cases.into_iter().enumerate() {
                    let entries = causes
                        .into_iter()
                        .map(|cause| RankedCause { cause, confidence: Confidence::ALL[conf] })
                        .collect();
                    set.insert(format!("r{i}"), Prediction::from_ranked(RankedPrediction::new(entries).unwrap()))
                        .unwrap();
                }
                (set, dist(prev), dist(target))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lp_beats_every_feasible_weighting(
        (set, prev, target) in instance(),
        raw in proptest::array::uniform5(0.0f64..1.0),
        budget in 0.0f64..=1.0,
    ) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-9);
        let pv = PrevalenceVector::new(prev.clone()).unwrap();
        let tv = PrevalenceVector::new(target.clone()).unwrap();
        let pooled = solve_lp(&build_lp(&set, &pv, &tv, false).unwrap()).unwrap();
        let strat = solve_lp(&build_lp(&set, &pv, &tv, true).unwrap()).unwrap();
        let w = feasible(raw, budget);
        let other = gap(&set, &|_| w, &prev, &target);
        let pooled_gap = gap(&set, &|s| *pooled.weights(s), &prev, &target);
        let strat_gap = gap(&set, &|s| *strat.weights(s), &prev, &target);
        prop_assert!(pooled_gap <= other + 1e-9, "pooled {pooled_gap} vs feasible {other}");
        prop_assert!(strat_gap <= pooled_gap + 1e-9, "stratified {strat_gap} vs pooled {pooled_gap}");
        prop_assert!((pooled.objective.unwrap() - pooled_gap).abs() < 1e-9);
    }
}
