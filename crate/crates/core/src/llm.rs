//! Prompt construction, chat-completion calls, response parsing and the
//! content-addressed response cache.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::domain::{
    AgeGroup, CauseCodebook, CauseIndex, Confidence, Prediction, PredictionSet, RankedCause,
    RankedPrediction, Sex, Symptom, VARecord, MAX_RANKED,
};
use crate::error::{Error, Result};
use crate::par;

const BASE_PROMPT: &str = include_str!("../resources/prompts/base.txt");
const OUTPUT_FORMAT: &str = include_str!("../resources/prompts/output_format.txt");

/// Appended to the user message when a previous reply could not be parsed.
pub const CORRECTIVE_SUFFIX: &str = "\n\nYour previous reply could not be parsed. Respond with only the JSON object described under OUTPUT FORMAT, with no other text.";

pub const DEFAULT_CARE_ACCESS_FIELDS: [&str; 3] = ["care_sought", "hospital_visit", "travel_time"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub age_group: AgeGroup,
    /// Text with `{age_group}`, `{age_group_upper}`, `{cod_list}`,
    /// `{age_specific_guidance}` and `{examples}` placeholders.
    pub base_text: String,
    pub guidance: String,
    pub examples: String,
    /// Appended verbatim after the instantiated base text.
    pub output_format: String,
    /// Symptom ids rendered under CARE ACCESS instead of QUESTIONNAIRE.
    #[serde(default)]
    pub care_access_fields: Vec<String>,
}

impl PromptTemplate {
    pub fn builtin(age_group: AgeGroup) -> Self {
        let (guidance, examples) = match age_group {
            AgeGroup::Adult => (
                include_str!("../resources/prompts/guidance_adult.txt"),
                include_str!("../resources/prompts/examples_adult.txt"),
            ),
            AgeGroup::Child => (
                include_str!("../resources/prompts/guidance_child.txt"),
                include_str!("../resources/prompts/examples_child.txt"),
            ),
            AgeGroup::Neonate => (
                include_str!("../resources/prompts/guidance_neonate.txt"),
                include_str!("../resources/prompts/examples_neonate.txt"),
            ),
        };
        PromptTemplate {
            age_group,
            base_text: BASE_PROMPT.to_owned(),
            guidance: guidance.trim_end().to_owned(),
            examples: examples.trim_end().to_owned(),
            output_format: OUTPUT_FORMAT.trim_end().to_owned(),
            care_access_fields: DEFAULT_CARE_ACCESS_FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The system text for `codebook`.
    pub fn instantiate(&self, codebook: &CauseCodebook) -> Result<String> {
        if codebook.age_group() != self.age_group {
            return Err(Error::validation(format!(
                "template is for {} but codebook is for {}",
                self.age_group,
                codebook.age_group()
            )));
        }
        let cod_list = format!("{}.", codebook.labels().join("; "));
        let text = self
            .base_text
            .replace("{age_group_upper}", self.age_group.upper_plural())
            .replace("{age_group}", self.age_group.as_str())
            .replace("{cod_list}", &cod_list)
            .replace("{age_specific_guidance}", &self.guidance)
            .replace("{examples}", &self.examples);
        let text = format!("{}\n\n{}\n", text.trim_end(), self.output_format);
        if let Some(p) = unresolved_placeholders(&text).first() {
            return Err(Error::validation(format!("template leaves placeholder {p} unresolved")));
        }
        Ok(text)
    }
}

/// `{identifier}` tokens left in `text`.
pub fn unresolved_placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        let tail = &rest[start + 1..];
        let ident: String = tail.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
        if !ident.is_empty() && tail[ident.len()..].starts_with('}') {
            out.push(format!("{{{ident}}}"));
        }
        rest = tail;
    }
    out
}

fn symptom_answer(s: Symptom) -> Option<&'static str> {
    match s {
        Symptom::Yes => Some("yes"),
        Symptom::No => Some("no"),
        Symptom::Missing => None,
    }
}

/// Returns `(system text, user text)` for one record.
pub fn build_prompt(record: &VARecord, codebook: &CauseCodebook, template: &PromptTemplate) -> Result<(String, String)> {
    if record.age_group != template.age_group {
        return Err(Error::validation(format!(
            "record {} is {} but the template is for {}",
            record.id, record.age_group, template.age_group
        )));
    }
    let system = template.instantiate(codebook)?;
    let unit = if record.age_group == AgeGroup::Neonate { "day" } else { "y" };
    let sex = match record.sex {
        Sex::Unknown => "sex unknown".to_owned(),
        s => s.to_string(),
    };
    let mut user = format!("DEMOGRAPHICS: {}-{unit} {sex}, {}\n", record.age_value, record.site);
    let positives: Vec<&str> = record
        .symptoms
        .iter()
        .filter(|(k, v)| **v == Symptom::Yes && !template.care_access_fields.contains(k))
        .map(|(k, _)| k.as_str())
        .collect();
    if positives.is_empty() {
        user.push_str("QUESTIONNAIRE: no symptoms reported\n");
    } else {
        user.push_str(&format!("QUESTIONNAIRE: {}\n", positives.join(", ")));
    }
    match record.narrative.as_deref().map(str::trim).filter(|n| !n.is_empty()) {
        Some(n) => user.push_str(&format!("NARRATIVE: \"{n}\"\n")),
        None => user.push_str("NARRATIVE: not available\n"),
    }
    let care: Vec<String> = template
        .care_access_fields
        .iter()
        .filter_map(|f| record.symptoms.get(f).and_then(|s| symptom_answer(*s)).map(|a| format!("{f}: {a}")))
        .collect();
    if !care.is_empty() {
        user.push_str(&format!("CARE ACCESS: {}\n", care.join(", ")));
    }
    Ok((system, user))
}

pub fn normalize_label(raw: &str, codebook: &CauseCodebook) -> Option<CauseIndex> {
    codebook.resolve(raw)
}

fn entries_of(value: &Value) -> Option<&Vec<Value>> {
    value.as_object()?.get("predictions")?.as_array()
}

/// Parses the first JSON object carrying a `predictions` array.
pub fn parse_response(text: &str, codebook: &CauseCodebook) -> Result<RankedPrediction> {
    let mut found = None;
    for (start, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            if entries_of(&value).is_some() {
                found = Some(value);
                break;
            }
        }
    }
    let value = found.ok_or_else(|| Error::Parse("no JSON object with a predictions list".into()))?;
    let mut entries: Vec<RankedCause> = Vec::new();
    for item in entries_of(&value).into_iter().flatten() {
        let (label, confidence) = match item {
            Value::String(s) => (s.as_str(), None),
            Value::Object(m) => match m.get("cause").and_then(Value::as_str) {
                Some(c) => (c, m.get("confidence").and_then(Value::as_str)),
                None => continue,
            },
            _ => continue,
        };
        let Some(cause) = normalize_label(label, codebook) else {
            log::debug!("dropping unresolved label {label:?}");
            continue;
        };
        if entries.iter().any(|e| e.cause == cause) {
            continue;
        }
        let confidence = confidence.and_then(Confidence::parse_lenient).unwrap_or(Confidence::Medium);
        entries.push(RankedCause { cause, confidence });
        if entries.len() == MAX_RANKED {
            break;
        }
    }
    if entries.is_empty() {
        return Err(Error::Parse("no prediction resolved to an allowed cause".into()));
    }
    RankedPrediction::new(entries)
}

/// The structured form `parse_response` reads.
pub fn serialize_ranked(pred: &RankedPrediction, codebook: &CauseCodebook) -> Result<String> {
    let items = pred
        .entries()
        .iter()
        .map(|e| {
            let label = codebook
                .label(e.cause)
                .ok_or_else(|| Error::validation(format!("cause index {} out of range", e.cause)))?;
            Ok(serde_json::json!({"cause": label, "confidence": e.confidence.as_str()}))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(serde_json::json!({ "predictions": items }).to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmClientConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}

fn default_model() -> String {
    "gpt-5".into()
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> u64 {
    500
}

fn default_concurrency() -> usize {
    4
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("llm_cache")
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: default_endpoint(),
            model: default_model(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff(),
            max_concurrency: default_concurrency(),
            cache_dir: default_cache_dir(),
            api_key_env: default_key_env(),
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_concurrency == 0 {
            return Err(Error::validation("max_concurrency must be at least 1"));
        }
        if self.model.trim().is_empty() || self.endpoint.trim().is_empty() {
            return Err(Error::validation("endpoint and model must be set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
}

impl ChatRequest {
    /// Hex SHA-256 of the JSON array `[model, system, user]`.
    pub fn cache_key(&self) -> String {
        let bytes = serde_json::to_vec(&[&self.model, &self.system, &self.user]).expect("strings serialize");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Sends one chat request and returns the assistant text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// OpenAI-style `chat/completions` over HTTPS.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(config: &LlmClientConfig, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport { agent, endpoint: config.endpoint.clone(), api_key }
    }

    /// Reads the key from the configured environment variable.
    pub fn from_env(config: &LlmClientConfig) -> Result<Self> {
        match std::env::var(&config.api_key_env) {
            Ok(k) if !k.trim().is_empty() => Ok(Self::new(config, k)),
            _ => Err(Error::MissingApiKey { var: config.api_key_env.clone() }),
        }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = serde_json::json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| Error::Transport(e.to_string()))?;
        if status == 401 || status == 403 {
            return Err(Error::Auth { status, body: text });
        }
        if !(200..300).contains(&status) {
            return Err(Error::Transport(format!("HTTP {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::json("chat completion body", e))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Transport("response has no choices[0].message.content".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: ChatRequest,
    pub response: String,
}

/// Answers requests from a recorded transcript, keyed by cache key.
#[derive(Debug, Default)]
pub struct ReplayTransport {
    responses: BTreeMap<String, String>,
    calls: AtomicUsize,
}

impl ReplayTransport {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        ReplayTransport {
            responses: entries.into_iter().map(|e| (e.request.cache_key(), e.response)).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    /// One `TranscriptEntry` per line.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e)))
            .collect::<Result<Vec<TranscriptEntry>>>()?;
        Ok(Self::new(entries))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(&request.cache_key())
            .cloned()
            .ok_or_else(|| Error::Transport("no recorded response for request".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: ChatRequest,
    /// The request actually sent, when a corrective retry changed it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent: Option<ChatRequest>,
    pub response: String,
}

/// Directory of `{key}.json` files.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ResponseCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, request: &ChatRequest) -> Result<Option<CacheEntry>> {
        let path = self.path_for(&request.cache_key());
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let entry: CacheEntry =
                    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
                Ok((entry.request == *request).then_some(entry))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path_for(&entry.request.cache_key());
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let bytes = serde_json::to_vec_pretty(entry).map_err(|e| Error::json("cache entry", e))?;
        tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub id: String,
    pub attempts: u32,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub predictions: PredictionSet,
    pub failures: Vec<CaseFailure>,
    pub cache_hits: usize,
    pub requests: usize,
}

pub fn write_failure_manifest(path: &Path, failures: &[CaseFailure]) -> Result<()> {
    let mut out = String::new();
    for f in failures {
        out.push_str(&serde_json::to_string(f).map_err(|e| Error::json("failure", e))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

enum CaseResult {
    Done(RankedPrediction),
    Failed(CaseFailure),
}

fn run_case(
    id: &str,
    request: &ChatRequest,
    codebook: &CauseCodebook,
    config: &LlmClientConfig,
    transport: &dyn ChatTransport,
    cache: &ResponseCache,
    requests: &AtomicUsize,
) -> Result<CaseResult> {
    let mut last_error = String::new();
    for attempt in 0..=config.max_retries {
        if attempt > 0 && config.backoff_base_ms > 0 {
            std::thread::sleep(Duration::from_millis(config.backoff_base_ms << (attempt - 1).min(16)));
        }
        let sent = if attempt == 0 {
            request.clone()
        } else {
            ChatRequest { user: format!("{}{CORRECTIVE_SUFFIX}", request.user), ..request.clone() }
        };
        requests.fetch_add(1, Ordering::SeqCst);
        let reply = match transport.complete(&sent) {
            Ok(r) => r,
            Err(e @ Error::Auth { .. }) => return Err(e),
            Err(e) => {
                log::warn!("record {id}: attempt {} failed: {e}", attempt + 1);
                last_error = e.to_string();
                continue;
            }
        };
        match parse_response(&reply, codebook) {
            Ok(pred) => {
                let entry = CacheEntry {
                    request: request.clone(),
                    sent: (attempt > 0).then_some(sent),
                    response: reply,
                };
                cache.put(&entry)?;
                return Ok(CaseResult::Done(pred));
            }
            Err(e) => {
                log::warn!("record {id}: attempt {} unparseable: {e}", attempt + 1);
                last_error = e.to_string();
            }
        }
    }
    Ok(CaseResult::Failed(CaseFailure { id: id.to_owned(), attempts: config.max_retries + 1, error: last_error }))
}

/// Predicts every record, consulting the cache first. The transport is
/// only constructed when some case misses the cache, and the first miss is
/// sent alone so a rejected key stops the batch before any other request.
pub fn predict_batch<F>(
    records: &[VARecord],
    codebook: &CauseCodebook,
    template: &PromptTemplate,
    config: &LlmClientConfig,
    method: &str,
    make_transport: F,
) -> Result<BatchOutcome>
where
    F: FnOnce() -> Result<Box<dyn ChatTransport>>,
{
    config.validate()?;
    crate::domain::check_unique_ids(records)?;
    let cache = ResponseCache::new(&config.cache_dir);
    let mut predictions = PredictionSet::new(method, codebook.len());
    let mut misses: Vec<(&str, ChatRequest)> = Vec::new();
    let mut cache_hits = 0;
    for r in records {
        let (system, user) = build_prompt(r, codebook, template)?;
        let request = ChatRequest { model: config.model.clone(), system, user };
        let cached = cache.get(&request)?.and_then(|entry| parse_response(&entry.response, codebook).ok());
        match cached {
            Some(pred) => {
                cache_hits += 1;
                predictions.insert(r.id.clone(), Prediction::from_ranked(pred))?;
            }
            None => misses.push((r.id.as_str(), request)),
        }
    }
    let requests = AtomicUsize::new(0);
    let mut failures = Vec::new();
    if !misses.is_empty() {
        let transport = make_transport()?;
        let transport = transport.as_ref();
        let (first, rest) = misses.split_first().expect("nonempty");
        let mut results = vec![run_case(first.0, &first.1, codebook, config, transport, &cache, &requests)?];
        let tail = par::with_max_threads(config.max_concurrency, || {
            par::map(rest, |(id, req)| run_case(id, req, codebook, config, transport, &cache, &requests))
        });
        for r in tail {
            results.push(r?);
        }
        for ((id, _), result) in misses.iter().zip(results) {
            match result {
                CaseResult::Done(pred) => predictions.insert(*id, Prediction::from_ranked(pred))?,
                CaseResult::Failed(f) => failures.push(f),
            }
        }
    }
    Ok(BatchOutcome { predictions, failures, cache_hits, requests: requests.into_inner() })
}
