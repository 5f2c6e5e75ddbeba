//! Domain types shared by every stage of the pipeline: age modules, cause
//! codebooks, death records and the two prediction representations (dense
//! probability vectors and short ranked lists with confidence labels).
//!
//! Causes are always exchanged as indices into an ordered [`CauseCodebook`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a cause in its codebook.
pub type CauseIndex = usize;

/// Tolerance for sum-to-one checks on stored vectors.
pub const SUM_TOL: f64 = 1e-9;
/// Inputs further than this from summing to one are rejected rather than
/// renormalized.
pub const INGEST_TOL: f64 = 1e-6;
/// Longest ranked list a predictor may return.
pub const MAX_RANKED: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeGroup {
    Adult,
    Child,
    Neonate,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 3] = [AgeGroup::Adult, AgeGroup::Child, AgeGroup::Neonate];

    /// Size of the canonical cause list for this module.
    pub fn expected_causes(self) -> usize {
        match self {
            AgeGroup::Adult => 34,
            AgeGroup::Child => 21,
            AgeGroup::Neonate => 6,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgeGroup::Adult => "adult",
            AgeGroup::Child => "child",
            AgeGroup::Neonate => "neonate",
        }
    }

    /// Plural upper-case form used in prompt headings.
    pub fn upper_plural(self) -> &'static str {
        match self {
            AgeGroup::Adult => "ADULTS",
            AgeGroup::Child => "CHILDREN",
            AgeGroup::Neonate => "NEONATES",
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adult" | "adults" => Ok(AgeGroup::Adult),
            "child" | "children" => Ok(AgeGroup::Child),
            "neonate" | "neonates" => Ok(AgeGroup::Neonate),
            other => Err(Error::validation(format!("unknown age group {other:?}"))),
        }
    }
}

const ADULT_LABELS: &str = include_str!("../resources/codebooks/adult.txt");
const CHILD_LABELS: &str = include_str!("../resources/codebooks/child.txt");
const NEONATE_LABELS: &str = include_str!("../resources/codebooks/neonate.txt");
const ADULT_ALIASES: &str = include_str!("../resources/codebooks/adult.aliases");
const CHILD_ALIASES: &str = include_str!("../resources/codebooks/child.aliases");
const NEONATE_ALIASES: &str = include_str!("../resources/codebooks/neonate.aliases");

/// Ordered cause labels for one age module plus an alias table.
///
/// Label lookup is case-insensitive and whitespace-insensitive. The canonical
/// codebooks are embedded; custom codebooks of any size can be built for
/// miniature fixtures and are flagged as non-canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct CauseCodebook {
    age_group: AgeGroup,
    labels: Vec<String>,
    aliases: BTreeMap<String, CauseIndex>,
    folded: HashMap<String, CauseIndex>,
    stripped: HashMap<String, CauseIndex>,
    canonical: bool,
}

/// Trims and collapses internal runs of whitespace.
pub fn collapse_whitespace(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fold(raw: &str) -> String {
    collapse_whitespace(raw).to_lowercase()
}

fn strip_punct(raw: &str) -> String {
    raw.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl CauseCodebook {
    /// The embedded codebook for an age module.
    pub fn canonical(age_group: AgeGroup) -> Self {
        let (labels, aliases) = match age_group {
            AgeGroup::Adult => (ADULT_LABELS, ADULT_ALIASES),
            AgeGroup::Child => (CHILD_LABELS, CHILD_ALIASES),
            AgeGroup::Neonate => (NEONATE_LABELS, NEONATE_ALIASES),
        };
        let labels = labels
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        let mut book = Self::build(age_group, labels).expect("embedded codebook is valid");
        for line in aliases.lines() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (alias, target) = line.split_once('\t').expect("alias lines are tab separated");
            book.add_alias(alias, target).expect("embedded alias is valid");
        }
        book.canonical = true;
        assert_eq!(book.len(), age_group.expected_causes());
        book
    }

    /// A codebook with an arbitrary label list (at least two causes).
    pub fn custom<S: AsRef<str>>(age_group: AgeGroup, labels: &[S]) -> Result<Self> {
        let labels = labels.iter().map(|l| collapse_whitespace(l.as_ref())).collect();
        let mut book = Self::build(age_group, labels)?;
        book.canonical = book.len() == age_group.expected_causes();
        Ok(book)
    }

    fn build(age_group: AgeGroup, labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::validation("a codebook needs at least two causes"));
        }
        let mut folded = HashMap::new();
        let mut stripped = HashMap::new();
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::validation(format!("empty label at position {i}")));
            }
            if folded.insert(fold(label), i).is_some() {
                return Err(Error::validation(format!("duplicate label {label:?}")));
            }
            stripped.entry(strip_punct(label)).or_insert(i);
        }
        Ok(CauseCodebook {
            age_group,
            labels,
            aliases: BTreeMap::new(),
            folded,
            stripped,
            canonical: false,
        })
    }

    /// Registers `alias` as another spelling of the label `target`.
    pub fn add_alias(&mut self, alias: &str, target: &str) -> Result<()> {
        let idx = self
            .folded
            .get(&fold(target))
            .copied()
            .ok_or_else(|| Error::validation(format!("alias target {target:?} is not a label")))?;
        self.aliases.insert(fold(alias), idx);
        Ok(())
    }

    pub fn with_alias(mut self, alias: &str, target: &str) -> Result<Self> {
        self.add_alias(alias, target)?;
        Ok(self)
    }

    pub fn age_group(&self) -> AgeGroup {
        self.age_group
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, idx: CauseIndex) -> Option<&str> {
        self.labels.get(idx).map(String::as_str)
    }

    pub fn aliases(&self) -> &BTreeMap<String, CauseIndex> {
        &self.aliases
    }

    /// Resolves free-form label text: whitespace collapse, then a
    /// case-insensitive exact match, then the alias table, then a match with
    /// punctuation removed.
    pub fn resolve(&self, raw: &str) -> Option<CauseIndex> {
        let key = fold(raw);
        if key.is_empty() {
            return None;
        }
        if let Some(&i) = self.folded.get(&key) {
            return Some(i);
        }
        if let Some(&i) = self.aliases.get(&key) {
            return Some(i);
        }
        let bare = strip_punct(&key);
        if bare.is_empty() {
            return None;
        }
        if let Some(&i) = self.stripped.get(&bare) {
            return Some(i);
        }
        self.aliases
            .iter()
            .find(|(alias, _)| strip_punct(alias) == bare)
            .map(|(_, &i)| i)
    }

    pub fn check_index(&self, idx: CauseIndex) -> Result<()> {
        if idx < self.len() {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "cause index {idx} out of range for {} causes",
                self.len()
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    #[default]
    Unknown,
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Sex::Male),
            "female" | "f" => Ok(Sex::Female),
            "" | "unknown" | "u" => Ok(Sex::Unknown),
            other => Err(Error::validation(format!("unknown sex {other:?}"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        })
    }
}

/// Tri-state questionnaire answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symptom {
    Yes,
    No,
    Missing,
}

impl Symptom {
    pub fn parse_cell(cell: &str) -> Result<Self> {
        match cell.trim().to_ascii_lowercase().as_str() {
            "yes" | "y" | "1" => Ok(Symptom::Yes),
            "no" | "n" | "0" => Ok(Symptom::No),
            "" | "missing" | "dk" | "don't know" => Ok(Symptom::Missing),
            other => Err(Error::validation(format!("bad symptom cell {other:?}"))),
        }
    }

    pub fn as_cell(self) -> &'static str {
        match self {
            Symptom::Yes => "Yes",
            Symptom::No => "No",
            Symptom::Missing => "",
        }
    }
}

/// One death.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VARecord {
    pub id: String,
    pub site: String,
    pub age_group: AgeGroup,
    /// Years, or days for neonates.
    pub age_value: f64,
    pub sex: Sex,
    pub symptoms: BTreeMap<String, Symptom>,
    pub narrative: Option<String>,
    pub true_cause: Option<CauseIndex>,
}

impl VARecord {
    pub fn narrative_len(&self) -> Option<usize> {
        self.narrative.as_deref().map(|n| n.chars().count())
    }

    pub fn validate(&self, codebook: &CauseCodebook) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::validation("record id is empty"));
        }
        if self.age_group != codebook.age_group() {
            return Err(Error::validation(format!(
                "record {}: age group {} does not match the {} codebook",
                self.id,
                self.age_group,
                codebook.age_group()
            )));
        }
        if let Some(c) = self.true_cause {
            codebook
                .check_index(c)
                .map_err(|e| Error::validation(format!("record {}: {e}", self.id)))?;
        }
        Ok(())
    }
}

/// Checks id uniqueness across a cohort.
pub fn check_unique_ids(records: &[VARecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::validation(format!("duplicate record id {:?}", r.id)));
        }
    }
    Ok(())
}

/// Returns the gold cause of every record, failing on the first unlabeled one.
pub fn labels_of(records: &[VARecord]) -> Result<Vec<CauseIndex>> {
    records
        .iter()
        .map(|r| {
            r.true_cause
                .ok_or_else(|| Error::validation(format!("record {} has no true cause", r.id)))
        })
        .collect()
}

fn check_distribution(probs: &[f64], tol: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::validation("probability vector is empty"));
    }
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
        return Err(Error::validation(format!("entry {i} is {p}; must be finite and >= 0")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::validation(format!("entries sum to {sum}, expected 1")));
    }
    Ok(sum)
}

/// Dense per-cause probabilities summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps a vector that already sums to one within [`SUM_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs, SUM_TOL)?;
        Ok(ProbVector(probs))
    }

    /// Scales a nonnegative vector to sum to one.
    pub fn normalize(raw: &[f64]) -> Result<Self> {
        if let Some((i, p)) = raw.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(Error::validation(format!("entry {i} is {p}; must be finite and >= 0")));
        }
        let sum: f64 = raw.iter().sum();
        if sum.is_nan() || sum <= 0.0 {
            return Err(Error::validation("cannot normalize a vector with no positive entry"));
        }
        Ok(ProbVector(raw.iter().map(|p| p / sum).collect()))
    }

    /// Ingestion rule: accept vectors within [`INGEST_TOL`] of summing to
    /// one and renormalize them once; reject anything further off. Vectors
    /// already within [`SUM_TOL`] are kept bit-for-bit.
    pub fn ingest(raw: Vec<f64>) -> Result<Self> {
        let sum = check_distribution(&raw, INGEST_TOL)?;
        if (sum - 1.0).abs() <= SUM_TOL {
            Ok(ProbVector(raw))
        } else {
            Ok(ProbVector(raw.into_iter().map(|p| p / sum).collect()))
        }
    }

    pub fn one_hot(len: usize, idx: CauseIndex) -> Self {
        let mut v = vec![0.0; len];
        v[idx] = 1.0;
        ProbVector(v)
    }

    pub fn uniform(len: usize) -> Self {
        ProbVector(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest-probability cause; the lowest index wins ties.
    pub fn argmax(&self) -> CauseIndex {
        argmax(&self.0)
    }

    /// Cause indices by descending probability, ties by ascending index.
    pub fn ranking(&self) -> Vec<CauseIndex> {
        let mut order: Vec<CauseIndex> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        order
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::ingest(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Vec<f64> {
        p.0
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> CauseIndex {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Population cause distribution (true, target or predicted CSMF).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PrevalenceVector(Vec<f64>);

impl PrevalenceVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs, SUM_TOL)?;
        Ok(PrevalenceVector(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for PrevalenceVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for PrevalenceVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        let p = ProbVector::ingest(v)?;
        Ok(PrevalenceVector(p.0))
    }
}

impl From<PrevalenceVector> for Vec<f64> {
    fn from(p: PrevalenceVector) -> Vec<f64> {
        p.0
    }
}

/// Fraction of records carrying each gold cause.
pub fn empirical_prevalence(records: &[VARecord], codebook: &CauseCodebook) -> Result<PrevalenceVector> {
    if records.is_empty() {
        return Err(Error::validation("cannot compute prevalence of an empty cohort"));
    }
    let mut counts = vec![0usize; codebook.len()];
    for r in records {
        let c = r
            .true_cause
            .ok_or_else(|| Error::validation(format!("record {} has no true cause", r.id)))?;
        codebook.check_index(c)?;
        counts[c] += 1;
    }
    let n = records.len() as f64;
    PrevalenceVector::new(counts.into_iter().map(|k| k as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl Confidence {
    pub const ALL: [Confidence; 3] = [Confidence::High, Confidence::Medium, Confidence::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            Confidence::High => "high",
            Confidence::Medium => "medium",
            Confidence::Low => "low",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lenient parse of a model-supplied label.
    pub fn parse_lenient(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "high" | "h" => Some(Confidence::High),
            "medium" | "med" | "moderate" | "m" => Some(Confidence::Medium),
            "low" | "l" => Some(Confidence::Low),
            _ => None,
        }
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankedCause {
    pub cause: CauseIndex,
    pub confidence: Confidence,
}

/// Up to five distinct causes in rank order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<RankedCause>", into = "Vec<RankedCause>")]
pub struct RankedPrediction(Vec<RankedCause>);

impl RankedPrediction {
    pub fn new(entries: Vec<RankedCause>) -> Result<Self> {
        if entries.is_empty() || entries.len() > MAX_RANKED {
            return Err(Error::validation(format!(
                "ranked prediction must hold 1..={MAX_RANKED} causes, got {}",
                entries.len()
            )));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.cause) {
                return Err(Error::validation(format!("cause {} ranked twice", e.cause)));
            }
        }
        Ok(RankedPrediction(entries))
    }

    /// Convenience constructor giving every entry the same confidence.
    pub fn from_causes(causes: &[CauseIndex], confidence: Confidence) -> Result<Self> {
        Self::new(causes.iter().map(|&cause| RankedCause { cause, confidence }).collect())
    }

    pub fn entries(&self) -> &[RankedCause] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn top1(&self) -> CauseIndex {
        self.0[0].cause
    }

    /// Calibration stratum: the confidence of the rank-1 entry.
    pub fn stratum(&self) -> Confidence {
        self.0[0].confidence
    }

    pub fn causes(&self) -> impl Iterator<Item = CauseIndex> + '_ {
        self.0.iter().map(|e| e.cause)
    }

    pub fn contains_in_top(&self, cause: CauseIndex, k: usize) -> bool {
        self.0.iter().take(k).any(|e| e.cause == cause)
    }
}

impl TryFrom<Vec<RankedCause>> for RankedPrediction {
    type Error = Error;
    fn try_from(v: Vec<RankedCause>) -> Result<Self> {
        RankedPrediction::new(v)
    }
}

impl From<RankedPrediction> for Vec<RankedCause> {
    fn from(p: RankedPrediction) -> Self {
        p.0
    }
}

/// A case's prediction in one or both representations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    pub probs: Option<ProbVector>,
    pub ranked: Option<RankedPrediction>,
}

impl Prediction {
    pub fn from_probs(p: ProbVector) -> Self {
        Prediction { probs: Some(p), ranked: None }
    }

    pub fn from_ranked(r: RankedPrediction) -> Self {
        Prediction { probs: None, ranked: Some(r) }
    }

    /// Cause ordering used for Top-k: the ranked list when present,
    /// otherwise the probability ranking.
    pub fn ranking(&self) -> Vec<CauseIndex> {
        match (&self.ranked, &self.probs) {
            (Some(r), _) => r.causes().collect(),
            (None, Some(p)) => p.ranking(),
            (None, None) => Vec::new(),
        }
    }

    pub fn top1(&self) -> Option<CauseIndex> {
        match (&self.ranked, &self.probs) {
            (Some(r), _) => Some(r.top1()),
            (None, Some(p)) => Some(p.argmax()),
            (None, None) => None,
        }
    }

    /// The dense vector, falling back to a rank-1 one-hot vector.
    pub fn dense_or_one_hot(&self, n_causes: usize) -> Option<ProbVector> {
        match (&self.probs, &self.ranked) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(r)) => Some(ProbVector::one_hot(n_causes, r.top1())),
            (None, None) => None,
        }
    }
}

/// Predictions of one method keyed by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub method: String,
    n_causes: usize,
    by_id: BTreeMap<String, Prediction>,
}

impl PredictionSet {
    pub fn new(method: impl Into<String>, n_causes: usize) -> Self {
        PredictionSet { method: method.into(), n_causes, by_id: BTreeMap::new() }
    }

    pub fn n_causes(&self) -> usize {
        self.n_causes
    }

    pub fn insert(&mut self, id: impl Into<String>, pred: Prediction) -> Result<()> {
        let id = id.into();
        if pred.probs.is_none() && pred.ranked.is_none() {
            return Err(Error::validation(format!("prediction for {id} is empty")));
        }
        if let Some(p) = &pred.probs {
            if p.len() != self.n_causes {
                return Err(Error::validation(format!(
                    "prediction for {id} has {} probabilities, expected {}",
                    p.len(),
                    self.n_causes
                )));
            }
        }
        if let Some(r) = &pred.ranked {
            if let Some(c) = r.causes().find(|&c| c >= self.n_causes) {
                return Err(Error::validation(format!(
                    "prediction for {id} ranks cause {c}, outside {} causes",
                    self.n_causes
                )));
            }
        }
        self.by_id.insert(id, pred);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Prediction> {
        self.by_id.get(id)
    }

    /// Looks up a record's prediction, failing with the id when absent.
    pub fn require(&self, id: &str) -> Result<&Prediction> {
        self.by_id
            .get(id)
            .ok_or_else(|| Error::validation(format!("{}: no prediction for record {id}", self.method)))
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Prediction)> {
        self.by_id.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.by_id.keys()
    }

    /// Copy restricted to the given ids.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<PredictionSet> {
        let mut out = PredictionSet::new(self.method.clone(), self.n_causes);
        for id in ids {
            out.by_id.insert(id.to_owned(), self.require(id)?.clone());
        }
        Ok(out)
    }

    pub fn renamed(mut self, method: impl Into<String>) -> Self {
        self.method = method.into();
        self
    }

    /// Replaces ranked-only entries by their rank-1 one-hot vector.
    pub fn densified(&self) -> PredictionSet {
        let mut out = self.clone();
        for pred in out.by_id.values_mut() {
            if pred.probs.is_none() {
                pred.probs = pred.dense_or_one_hot(self.n_causes);
            }
        }
        out
    }

    /// True when at least one entry lacks a dense vector.
    pub fn has_ranked_only(&self) -> bool {
        self.by_id.values().any(|p| p.probs.is_none())
    }

    /// Fails unless every record id has a prediction.
    pub fn check_covers(&self, records: &[VARecord]) -> Result<()> {
        for r in records {
            self.require(&r.id)?;
        }
        Ok(())
    }
}
