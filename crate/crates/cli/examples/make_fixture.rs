//! Regenerates `tests/fixtures/mini`: a 60-case adult cohort in the record
//! CSV format, cached chat responses for every case, a five-entry replay
//! transcript and an external posterior file.
//!
//! Run with `cargo run -p lava-cli --example make_fixture [DIR]`. The cache
//! keys depend on the built-in prompt text, so rerun after editing prompts.

use std::fmt::Write as _;
use std::path::PathBuf;

use lava_core::ingest::{write_predictions, write_records};
use lava_core::llm::{build_prompt, serialize_ranked, CacheEntry, ChatRequest, LlmClientConfig, PromptTemplate, ResponseCache, TranscriptEntry};
use lava_core::synth::{generate_cohort, oracle_predictions, SynthConfig};
use lava_core::{AgeGroup, CauseCodebook, Prediction, PredictionSet, ProbVector};

const SITES: [&str; 6] = ["AP", "Bohol", "Dar", "Mexico", "Pemba", "UP"];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mini"));
    let cb = CauseCodebook::canonical(AgeGroup::Adult);
    let mut sc = SynthConfig::balanced(&SITES, 10, cb.len(), 7)?;
    sc.missing_rate = 0.05;
    let (records, _) = generate_cohort(&sc, &cb)?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    write_records(&dir.join("records.csv"), &records, &cb)?;

    let llm = LlmClientConfig::default();
    let template = PromptTemplate::builtin(AgeGroup::Adult);
    let cache = ResponseCache::new(dir.join("llm_cache"));
    let answers = oracle_predictions(&records, cb.len(), 0.6, "llm", 11)?;
    let mut transcript = String::new();
    for (i, r) in records.iter().enumerate() {
        let (system, user) = build_prompt(r, &cb, &template)?;
        let request = ChatRequest { model: llm.model.clone(), system, user };
        let ranked = answers.require(&r.id)?.ranked.clone().expect("oracle predictions are ranked");
        let body = serialize_ranked(&ranked, &cb)?;
        // Some replies wrap the JSON in prose, as chat models often do.
        let response = match i % 3 {
            0 => body,
            1 => format!("Based on the interview, my assessment:\n```json\n{body}\n```"),
            _ => format!("{body}\nThese causes fit the reported symptoms."),
        };
        if i < 5 {
            let entry = TranscriptEntry { request: request.clone(), response: response.clone() };
            writeln!(transcript, "{}", serde_json::to_string(&entry)?)?;
        }
        cache.put(&CacheEntry { request, sent: None, response })?;
    }
    std::fs::write(dir.join("replay.jsonl"), transcript)?;

    // Posterior vectors from a second, independent oracle: geometric mass
    // over its ranking with the remainder spread evenly.
    let ranked = oracle_predictions(&records, cb.len(), 0.5, "lcva", 23)?;
    let mut lcva = PredictionSet::new("lcva", cb.len());
    for (id, p) in ranked.iter() {
        let order: Vec<usize> = p.ranking();
        let mut probs = vec![0.0; cb.len()];
        let mut mass = 0.5;
        for &c in &order {
            probs[c] = mass;
            mass /= 2.0;
        }
        let rest = 1.0 - probs.iter().sum::<f64>();
        let others = cb.len() - order.len();
        for (c, v) in probs.iter_mut().enumerate() {
            if !order.contains(&c) {
                *v = rest / others as f64;
            }
        }
        lcva.insert(id.clone(), Prediction::from_probs(ProbVector::normalize(&probs)?))?;
    }
    write_predictions(&dir.join("lcva.jsonl"), &lcva, &cb)?;

    let config = serde_json::json!({
        "age_group": "adult",
        "out": ".",
        "data": { "records": "records.csv", "predictions": ["lcva.jsonl"] },
        "llm": { "cache_dir": "llm_cache" },
        "harness": { "stacker": false },
        "evaluate": { "use_llm": true, "title": "mini adult fixture" }
    });
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&config)? + "\n")?;
    eprintln!("wrote fixture to {}", dir.display());
    Ok(())
}
