//! Synthetic multi-site cohorts.
//!
//! Causes are drawn per site from that site's prevalence. Each site perturbs
//! a shared cause-by-symptom rate profile by replacing a rate `p` with
//! `1 - p` at the site's flip rate, which shifts `P(symptom | cause)` across
//! sites. Embeddings are cause-conditional isotropic Gaussians with unit
//! noise. Every site draws from its own ChaCha stream, so adding a site never
//! changes the records of the others.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{
    AgeGroup, CauseCodebook, Confidence, Prediction, PredictionSet, PrevalenceVector, RankedCause,
    RankedPrediction, Sex, Symptom, VARecord, MAX_RANKED,
};
use crate::error::{Error, Result};
use crate::ingest::EmbeddingTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub name: String,
    pub n: usize,
    pub prevalence: PrevalenceVector,
    /// Overrides the cohort-wide flip rate for this site.
    #[serde(default)]
    pub flip_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub sites: Vec<SiteSpec>,
    #[serde(default = "default_symptom_count")]
    pub symptom_count: usize,
    /// `C x symptom_count` Bernoulli rates; drawn from the seed when absent.
    #[serde(default)]
    pub base_symptom_profile: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub site_flip_rate: f64,
    /// Probability that any single symptom answer is recorded as missing.
    #[serde(default)]
    pub missing_rate: f64,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_symptom_count() -> usize {
    20
}

fn default_embedding_dim() -> usize {
    16
}

fn default_class_separation() -> f64 {
    3.0
}

fn default_seed() -> u64 {
    42
}

impl SynthConfig {
    /// Sites with equal size and uniform prevalence.
    pub fn balanced(sites: &[&str], n_per_site: usize, n_causes: usize, seed: u64) -> Result<Self> {
        let prevalence = PrevalenceVector::new(vec![1.0 / n_causes as f64; n_causes])?;
        Ok(SynthConfig {
            sites: sites
                .iter()
                .map(|s| SiteSpec { name: s.to_string(), n: n_per_site, prevalence: prevalence.clone(), flip_rate: None })
                .collect(),
            symptom_count: default_symptom_count(),
            base_symptom_profile: None,
            site_flip_rate: 0.0,
            missing_rate: 0.0,
            embedding_dim: default_embedding_dim(),
            class_separation: default_class_separation(),
            seed,
        })
    }

    pub fn validate(&self, codebook: &CauseCodebook) -> Result<()> {
        let c = codebook.len();
        if self.sites.is_empty() {
            return Err(Error::validation("synth config needs at least one site"));
        }
        let mut names = BTreeSet::new();
        for s in &self.sites {
            if s.name.trim().is_empty() || !names.insert(s.name.as_str()) {
                return Err(Error::validation(format!("site name {:?} empty or repeated", s.name)));
            }
            if s.n == 0 {
                return Err(Error::validation(format!("site {} must have n >= 1", s.name)));
            }
            if s.prevalence.len() != c {
                return Err(Error::validation(format!(
                    "site {} prevalence has {} entries, codebook has {c}",
                    s.name,
                    s.prevalence.len()
                )));
            }
            check_unit("flip_rate", s.flip_rate.unwrap_or(0.0))?;
        }
        check_unit("site_flip_rate", self.site_flip_rate)?;
        check_unit("missing_rate", self.missing_rate)?;
        if self.symptom_count == 0 || self.embedding_dim == 0 {
            return Err(Error::validation("symptom_count and embedding_dim must be positive"));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return Err(Error::validation("class_separation must be finite and nonnegative"));
        }
        if let Some(profile) = &self.base_symptom_profile {
            if profile.len() != c || profile.iter().any(|row| row.len() != self.symptom_count) {
                return Err(Error::validation(format!(
                    "base_symptom_profile must be {c} x {}",
                    self.symptom_count
                )));
            }
            for row in profile {
                for &p in row {
                    check_unit("symptom rate", p)?;
                }
            }
        }
        Ok(())
    }
}

fn check_unit(what: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(format!("{what} {v} outside [0, 1]")))
    }
}

pub fn symptom_id(j: usize) -> String {
    format!("s{}", j + 1)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_profile(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Vec<Vec<f64>> {
    (0..c)
        .map(|_| {
            (0..s)
                .map(|_| {
                    if rng.random::<f64>() < 0.3 {
                        rng.random_range(0.6..0.95)
                    } else {
                        rng.random_range(0.02..0.25)
                    }
                })
                .collect()
        })
        .collect()
}

fn class_means(rng: &mut ChaCha8Rng, c: usize, dim: usize, sep: f64) -> Vec<Vec<f64>> {
    if dim >= c {
        return (0..c)
            .map(|k| (0..dim).map(|d| if d == k { sep } else { 0.0 }).collect())
            .collect();
    }
    (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| sep * x / norm).collect()
        })
        .collect()
}

fn age_for(group: AgeGroup, rng: &mut ChaCha8Rng) -> f64 {
    let (lo, hi) = match group {
        AgeGroup::Adult => (15, 90),
        AgeGroup::Child => (1, 11),
        AgeGroup::Neonate => (0, 27),
    };
    rng.random_range(lo..=hi) as f64
}

fn narrative_for(record: &VARecord) -> Option<String> {
    let positives: Vec<&str> = record
        .symptoms
        .iter()
        .filter(|(_, v)| **v == Symptom::Yes)
        .map(|(k, _)| k.as_str())
        .collect();
    if positives.is_empty() {
        return None;
    }
    let unit = if record.age_group == AgeGroup::Neonate { "days" } else { "years" };
    let mut text = format!(
        "The deceased was a {} aged {} {unit}, seen at {}.",
        record.sex, record.age_value, record.site
    );
    for s in positives {
        text.push_str(&format!(" The family reported symptom {s} during the final illness and described it in detail."));
    }
    Some(text)
}

/// Generates the records and embeddings for every configured site.
pub fn generate_cohort(config: &SynthConfig, codebook: &CauseCodebook) -> Result<(Vec<VARecord>, EmbeddingTable)> {
    config.validate(codebook)?;
    let c = codebook.len();
    let s = config.symptom_count;
    let mut shared = stream(config.seed, 0);
    let profile = match &config.base_symptom_profile {
        Some(p) => p.clone(),
        None => draw_profile(&mut shared, c, s),
    };
    let means = class_means(&mut shared, c, config.embedding_dim, config.class_separation);

    let mut records = Vec::new();
    let mut table = EmbeddingTable::new(config.embedding_dim)?;
    for (site_idx, site) in config.sites.iter().enumerate() {
        let mut rng = stream(config.seed, site_idx as u64 + 1);
        let flip = site.flip_rate.unwrap_or(config.site_flip_rate);
        let site_profile: Vec<Vec<f64>> = profile
            .iter()
            .map(|row| row.iter().map(|&p| if rng.random::<f64>() < flip { 1.0 - p } else { p }).collect())
            .collect();
        let causes = WeightedIndex::new(site.prevalence.as_slice())
            .map_err(|e| Error::validation(format!("site {} prevalence: {e}", site.name)))?;
        for i in 0..site.n {
            let cause = causes.sample(&mut rng);
            let symptoms: BTreeMap<String, Symptom> = (0..s)
                .map(|j| {
                    let v = if rng.random::<f64>() < config.missing_rate {
                        Symptom::Missing
                    } else if rng.random::<f64>() < site_profile[cause][j] {
                        Symptom::Yes
                    } else {
                        Symptom::No
                    };
                    (symptom_id(j), v)
                })
                .collect();
            let sex = if rng.random::<bool>() { Sex::Male } else { Sex::Female };
            let mut record = VARecord {
                id: format!("{}-{:05}", site.name, i),
                site: site.name.clone(),
                age_group: codebook.age_group(),
                age_value: age_for(codebook.age_group(), &mut rng),
                sex,
                symptoms,
                narrative: None,
                true_cause: Some(cause),
            };
            record.narrative = narrative_for(&record);
            let emb: Vec<f64> = means[cause].iter().map(|m| m + gaussian(&mut rng)).collect();
            table.insert(record.id.clone(), emb)?;
            records.push(record);
        }
    }
    Ok((records, table))
}

/// A ranked-only predictor whose rank-1 cause equals the truth with
/// probability `accuracy`; otherwise rank 1 is a uniformly chosen wrong cause.
/// Correct calls are mostly `high` confidence and wrong ones mostly `low`.
pub fn oracle_predictions(
    records: &[VARecord],
    n_causes: usize,
    accuracy: f64,
    method: &str,
    seed: u64,
) -> Result<PredictionSet> {
    check_unit("accuracy", accuracy)?;
    if n_causes < 2 {
        return Err(Error::validation("oracle predictor needs at least two causes"));
    }
    let mut rng = stream(seed, u64::MAX);
    let mut set = PredictionSet::new(method, n_causes);
    let k = MAX_RANKED.min(n_causes);
    for r in records {
        let truth = r
            .true_cause
            .ok_or_else(|| Error::validation(format!("record {} has no gold cause", r.id)))?;
        let correct = rng.random::<f64>() < accuracy;
        let top = if correct {
            truth
        } else {
            let other = rng.random_range(0..n_causes - 1);
            if other >= truth {
                other + 1
            } else {
                other
            }
        };
        let mut pool: Vec<usize> = (0..n_causes).filter(|&x| x != top).collect();
        let mut causes = vec![top];
        while causes.len() < k {
            let j = rng.random_range(0..pool.len());
            causes.push(pool.swap_remove(j));
        }
        let confidence = match (correct, rng.random::<f64>()) {
            (true, u) if u < 0.7 => Confidence::High,
            (false, u) if u < 0.6 => Confidence::Low,
            _ => Confidence::Medium,
        };
        let entries = causes.into_iter().map(|cause| RankedCause { cause, confidence }).collect();
        set.insert(r.id.clone(), Prediction::from_ranked(RankedPrediction::new(entries)?))?;
    }
    Ok(set)
}
