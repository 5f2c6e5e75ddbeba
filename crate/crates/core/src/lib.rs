//! Verbal-autopsy cause-of-death pipeline.
//!
//! Pluggable predictors (chat-completion LLM, embedding logistic regression,
//! external posterior files) feed a confidence-stratified linear-program
//! calibrator, weighted and stacked ensembles, and a leave-one-site-out
//! evaluation harness reporting Top-k and CSMF accuracy.
//!
//! Heavy loops (fold runs, grid searches, per-case prediction, gradient
//! accumulation) go through [`par`], which uses rayon when the default
//! `parallel` feature is on and falls back to sequential iteration otherwise.

pub mod calibrate;
pub mod domain;
pub mod error;
pub mod harness;
pub mod ingest;
pub mod llm;
pub mod metrics;
pub mod models;
pub mod par;
pub mod synth;

pub use domain::{
    AgeGroup, CauseCodebook, CauseIndex, Confidence, Prediction, PredictionSet, PrevalenceVector,
    ProbVector, RankedCause, RankedPrediction, Sex, Symptom, VARecord,
};
pub use error::{Error, Result};
