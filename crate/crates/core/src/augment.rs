//! LLM-based generative data augmentation over the training split.
//!
//! Three strategies: `rewriteQA` paraphrases existing records, `newQA`
//! asks the backend for novel pairs, and `combinedQA` is the union of the
//! two. Backends are pluggable: a remote chat-completion client (with
//! retries) and a deterministic offline mock, both usually wrapped in the
//! content-addressed disk cache so identical requests never hit the remote
//! service twice. Failed parses are dropped and counted, never fatal;
//! transport failure aborts the batch after writing a progress manifest
//! (re-running the same config resumes through the cache).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Label, PubMedQARecord};
use crate::eval::normalize_for_match;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after retries: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {message}")]
    Api { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("rewriteQA needs a source record")]
    MissingSource,
    #[error("no source records to augment")]
    EmptySources,
    #[error("invalid augment settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenParseError {
    #[error("generation is missing the {0} field")]
    MissingField(&'static str),
    #[error("generation decision {0:?} is not yes/no/maybe")]
    InvalidLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentStrategy {
    #[serde(rename = "rewriteQA")]
    RewriteQA,
    #[serde(rename = "newQA")]
    NewQA,
    #[serde(rename = "combinedQA")]
    CombinedQA,
}

impl AugmentStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentStrategy::RewriteQA => "rewriteQA",
            AugmentStrategy::NewQA => "newQA",
            AugmentStrategy::CombinedQA => "combinedQA",
        }
    }
}

impl std::fmt::Display for AugmentStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl GenerationRequest {
    /// Content address: SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("request serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

// ── prompt construction ──────────────────────────────────────────────

const FORMAT_INSTRUCTION: &str = "Respond with exactly four lines labeled \
QUESTION:, CONTEXT:, LONG_ANSWER:, and DECISION: (decision must be yes, no, or maybe).";

const SOURCE_MARKER: &str = "Source record:";

/// Renders a record in the delimited four-line exchange format.
pub fn render_generation(question: &str, context: &str, long_answer: &str, label: Label) -> String {
    format!("QUESTION: {question}\nCONTEXT: {context}\nLONG_ANSWER: {long_answer}\nDECISION: {label}\n")
}

#[derive(Debug, Clone)]
pub struct PromptSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            model_id: "mock".into(),
            temperature: 1.0,
            max_tokens: 256,
        }
    }
}

/// Builds the zero-shot request for one generation. `variant`
/// disambiguates repeated requests for the same source (or, for newQA,
/// the request index) so each prompt is unique and cacheable on its own.
pub fn build_prompt_variant(
    strategy: AugmentStrategy,
    source: Option<&PubMedQARecord>,
    topic: Option<&str>,
    variant: usize,
    settings: &PromptSettings,
) -> Result<GenerationRequest, AugmentError> {
    let prompt = match strategy {
        AugmentStrategy::RewriteQA => {
            let src = source.ok_or(AugmentError::MissingSource)?;
            format!(
                "You are expanding a biomedical question-answering dataset.\n\
                 Produce a faithful paraphrase of the source record below: reword the \
                 question, restate the context and long answer, and keep the DECISION \
                 unchanged.\n{FORMAT_INSTRUCTION}\n\n{SOURCE_MARKER}\n{}\nVariant: {variant}\n",
                render_generation(
                    &src.question,
                    &src.contexts.join(" "),
                    &src.long_answer,
                    src.final_decision,
                )
            )
        }
        AugmentStrategy::NewQA => {
            let topic_line = topic
                .map(|t| format!("Focus on the topic: {t}.\n"))
                .unwrap_or_default();
            format!(
                "You are expanding a biomedical question-answering dataset.\n\
                 Invent one new biomedical research question with a short context \
                 passage, a long answer, and a final decision.\n{topic_line}\
                 {FORMAT_INSTRUCTION}\n\nRequest: {variant}\n"
            )
        }
        AugmentStrategy::CombinedQA => {
            return Err(AugmentError::InvalidSettings(
                "combinedQA composes the other two strategies; build their prompts directly"
                    .into(),
            ));
        }
    };
    Ok(GenerationRequest {
        prompt,
        model_id: settings.model_id.clone(),
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
    })
}

/// Spec-shaped convenience: the zeroth variant with no topic hint.
pub fn build_prompt(
    strategy: AugmentStrategy,
    source: Option<&PubMedQARecord>,
    settings: &PromptSettings,
) -> Result<GenerationRequest, AugmentError> {
    build_prompt_variant(strategy, source, None, 0, settings)
}

// ── parsing ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedGeneration {
    pub question: String,
    pub context: String,
    pub long_answer: String,
    pub decision: Label,
}

fn extract_field(text: &str, marker: &str) -> Option<String> {
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest.trim().to_string());
        }
    }
    None
}

/// Extracts the four delimited fields, normalizing DECISION to lowercase.
pub fn parse_generation(text: &str) -> Result<ParsedGeneration, GenParseError> {
    let question =
        extract_field(text, "QUESTION:").ok_or(GenParseError::MissingField("QUESTION"))?;
    let context = extract_field(text, "CONTEXT:").ok_or(GenParseError::MissingField("CONTEXT"))?;
    let long_answer =
        extract_field(text, "LONG_ANSWER:").ok_or(GenParseError::MissingField("LONG_ANSWER"))?;
    let raw = extract_field(text, "DECISION:").ok_or(GenParseError::MissingField("DECISION"))?;
    let decision =
        Label::parse_normalized(&raw).ok_or_else(|| GenParseError::InvalidLabel(raw.clone()))?;
    if question.is_empty() {
        return Err(GenParseError::MissingField("QUESTION"));
    }
    Ok(ParsedGeneration {
        question,
        context,
        long_answer,
        decision,
    })
}

// ── offline mock backend ─────────────────────────────────────────────

/// Deterministic offline stand-in for the remote service. Rewrite prompts
/// get a rule-based paraphrase of the embedded source (clause-reversed
/// question, hash-keyed sentence shuffle of the context, decision
/// preserved); newQA prompts draw from a built-in pool keyed by the
/// request hash.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

const MOCK_POOL: [(&str, &str, &str, &str); 8] = [
    (
        "does routine screening shorten recovery time",
        "a registry study tracked recovery across screened cohorts.",
        "screened cohorts recovered faster on average.",
        "yes",
    ),
    (
        "is adjuvant therapy linked to fewer relapses",
        "relapse counts were compared between therapy arms.",
        "relapse rates did not separate between arms.",
        "no",
    ),
    (
        "can dietary intervention stabilize biomarkers",
        "biomarker drift was measured under controlled diets.",
        "stabilization appeared only in a subset of patients.",
        "maybe",
    ),
    (
        "does early mobilization reduce complications",
        "complication rates were audited after early mobilization.",
        "complication rates fell in the mobilized group.",
        "yes",
    ),
    (
        "is telemetry monitoring associated with better outcomes",
        "outcomes were pooled across monitored wards.",
        "no consistent outcome benefit was detected.",
        "no",
    ),
    (
        "can combination dosing extend remission",
        "remission duration was followed under combination dosing.",
        "remission extension varied widely between centers.",
        "maybe",
    ),
    (
        "does targeted physiotherapy improve mobility scores",
        "mobility scores were assessed after targeted physiotherapy.",
        "mobility scores improved against the control arm.",
        "yes",
    ),
    (
        "is supplemental oxygen tied to shorter stays",
        "length of stay was reviewed for supplemented patients.",
        "stays were not measurably shorter.",
        "no",
    ),
];

fn hash_to_u64(hash_hex: &str) -> u64 {
    u64::from_str_radix(&hash_hex[..16], 16).expect("hex hash")
}

fn shuffle_sentences(text: &str, key: u64) -> String {
    let mut sentences: Vec<&str> = text
        .split_inclusive('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    use rand::seq::SliceRandom;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(key);
    sentences.shuffle(&mut rng);
    sentences.join(" ")
}

fn reverse_clauses(question: &str) -> String {
    let stripped = question.trim().trim_end_matches('?');
    let clauses: Vec<&str> = if stripped.contains(", ") {
        stripped.split(", ").collect()
    } else if let Some(pos) = stripped.rfind(" in ") {
        vec![&stripped[pos + 4..], &stripped[..pos]]
    } else {
        vec![stripped]
    };
    let reversed: Vec<&str> = clauses.iter().rev().copied().collect();
    format!("It is asked whether {}", reversed.join(", "))
}

impl GenerationBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let key = hash_to_u64(&request.hash());
        if let Some(pos) = request.prompt.find(SOURCE_MARKER) {
            let source_block = &request.prompt[pos + SOURCE_MARKER.len()..];
            let parsed = parse_generation(source_block)
                .map_err(|e| BackendError::BadResponse(format!("mock saw bad prompt: {e}")))?;
            Ok(render_generation(
                &reverse_clauses(&parsed.question),
                &shuffle_sentences(&parsed.context, key),
                &shuffle_sentences(&parsed.long_answer, key.rotate_left(17)),
                parsed.decision,
            ))
        } else {
            let (q, ctx, la, decision) = MOCK_POOL[(key % MOCK_POOL.len() as u64) as usize];
            let label = Label::parse_normalized(decision).expect("pool labels valid");
            Ok(render_generation(
                &format!("{q} (case {})", &request.hash()[..8]),
                ctx,
                la,
                label,
            ))
        }
    }
}

// ── remote chat-completion backend ───────────────────────────────────

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ChatResponseMessage {
    content: String,
}

/// Chat-completion client: single user message, first choice taken,
/// three retries with exponential backoff on transport errors and 429/5xx.
pub struct RemoteBackend {
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff: Duration,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn attempt(&self, request: &GenerationRequest) -> Result<String, RetryClass> {
        let body = ChatRequest {
            model: &request.model_id,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| RetryClass::Retryable(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(RetryClass::Retryable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(RetryClass::Fatal(BackendError::Api {
                status: status.as_u16(),
                message: response.text().unwrap_or_default(),
            }));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| RetryClass::Fatal(BackendError::BadResponse(e.to_string())))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| RetryClass::Fatal(BackendError::BadResponse("no choices".into())))
    }
}

enum RetryClass {
    Retryable(String),
    Fatal(BackendError),
}

impl GenerationBackend for RemoteBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(RetryClass::Fatal(e)) => return Err(e),
                Err(RetryClass::Retryable(msg)) => {
                    last = msg;
                    if attempt < self.max_retries {
                        std::thread::sleep(self.initial_backoff * 2u32.pow(attempt));
                    }
                }
            }
        }
        Err(BackendError::Transport(last))
    }
}

// ── caching and counting wrappers ────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request: GenerationRequest,
    response: String,
}

/// Content-addressed disk cache: one JSON file per request hash. A hit
/// never touches the inner backend.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: GenerationBackend> CachedBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn cache_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.json"))
    }
}

impl<B: GenerationBackend> GenerationBackend for CachedBackend<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let path = self.cache_path(&request.hash());
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let entry: CacheEntry = serde_json::from_str(&text)
                .map_err(|e| BackendError::BadResponse(format!("cache entry: {e}")))?;
            return Ok(entry.response);
        }
        let response = self.inner.generate(request)?;
        let entry = CacheEntry {
            request: request.clone(),
            response: response.clone(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&entry).expect("entry serializes"))?;
        std::fs::rename(&tmp, &path)?;
        Ok(response)
    }
}

/// Counts calls that reach the wrapped backend; used to assert cache hits.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: GenerationBackend> GenerationBackend for CountingBackend<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(request)
    }
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(request)
    }
}

// ── the augmentation run ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: AugmentStrategy,
    /// Empty for newQA generations.
    pub source_id: String,
    pub backend_model: String,
    pub request_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    #[serde(flatten)]
    pub record: PubMedQARecord,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyStats {
    pub requests: u64,
    pub parse_failures: u64,
    pub label_mismatches: u64,
    pub dedup_dropped: u64,
    pub kept: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub strategy: AugmentStrategy,
    pub per_strategy: Vec<(AugmentStrategy, StrategyStats)>,
}

#[derive(Debug)]
pub struct AugmentRun {
    pub records: Vec<AugmentedRecord>,
    pub summary: AugmentSummary,
}

#[derive(Debug, Clone)]
pub struct AugmentSettings {
    pub prompt: PromptSettings,
    pub n_per_source: usize,
    pub concurrency: usize,
    /// Where to drop the progress manifest if the batch aborts.
    pub progress_dir: Option<PathBuf>,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        Self {
            prompt: PromptSettings::default(),
            n_per_source: 1,
            concurrency: 4,
            progress_dir: None,
        }
    }
}

/// "lowercased, punctuation-stripped, whitespace-collapsed" question key
/// used for deduplication.
pub fn normalize_question(q: &str) -> String {
    normalize_for_match(q)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

struct PlannedRequest {
    strategy: AugmentStrategy,
    source_id: String,
    request: GenerationRequest,
}

fn plan_requests(
    sources: &[PubMedQARecord],
    strategy: AugmentStrategy,
    settings: &AugmentSettings,
) -> Result<Vec<PlannedRequest>, AugmentError> {
    let mut plan = Vec::new();
    let strategies: &[AugmentStrategy] = match strategy {
        AugmentStrategy::CombinedQA => &[AugmentStrategy::RewriteQA, AugmentStrategy::NewQA],
        AugmentStrategy::RewriteQA => &[AugmentStrategy::RewriteQA],
        AugmentStrategy::NewQA => &[AugmentStrategy::NewQA],
    };
    for &sub in strategies {
        match sub {
            AugmentStrategy::RewriteQA => {
                for source in sources {
                    for variant in 0..settings.n_per_source {
                        plan.push(PlannedRequest {
                            strategy: sub,
                            source_id: source.id.clone(),
                            request: build_prompt_variant(
                                sub,
                                Some(source),
                                None,
                                variant,
                                &settings.prompt,
                            )?,
                        });
                    }
                }
            }
            AugmentStrategy::NewQA => {
                // one independent request per source slot per n
                for i in 0..sources.len() * settings.n_per_source {
                    plan.push(PlannedRequest {
                        strategy: sub,
                        source_id: String::new(),
                        request: build_prompt_variant(sub, None, None, i, &settings.prompt)?,
                    });
                }
            }
            AugmentStrategy::CombinedQA => unreachable!(),
        }
    }
    Ok(plan)
}

#[derive(Debug, Serialize)]
struct ProgressManifest<'a> {
    total: usize,
    completed: usize,
    failed: Vec<&'a str>,
}

/// Runs the full augmentation batch. Responses are gathered with up to
/// `concurrency` worker threads but parsed and deduplicated in plan order,
/// so the output is independent of completion order.
pub fn augment<B: GenerationBackend>(
    sources: &[PubMedQARecord],
    strategy: AugmentStrategy,
    backend: &B,
    settings: &AugmentSettings,
) -> Result<AugmentRun, AugmentError> {
    if sources.is_empty() {
        return Err(AugmentError::EmptySources);
    }
    if settings.n_per_source == 0 {
        return Err(AugmentError::InvalidSettings("n_per_source must be >= 1".into()));
    }
    let plan = plan_requests(sources, strategy, settings)?;

    // fan out
    let next = AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<String, BackendError>>>> =
        (0..plan.len()).map(|_| std::sync::Mutex::new(None)).collect();
    let workers = settings.concurrency.max(1).min(plan.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= plan.len() {
                    break;
                }
                let outcome = backend.generate(&plan[idx].request);
                *results[idx].lock().unwrap() = Some(outcome);
            });
        }
    });

    // abort on transport failure, leaving a resumable progress manifest
    let mut failed_hashes: Vec<String> = Vec::new();
    let mut completed = 0usize;
    let mut first_error: Option<BackendError> = None;
    for (planned, result) in plan.iter().zip(&results) {
        match result.lock().unwrap().as_ref() {
            Some(Ok(_)) => completed += 1,
            Some(Err(_)) | None => failed_hashes.push(planned.request.hash()),
        }
        if first_error.is_none() {
            if let Some(Err(_)) = result.lock().unwrap().as_ref() {
                let taken = result.lock().unwrap().take();
                if let Some(Err(e)) = taken {
                    first_error = Some(e);
                }
            }
        }
    }
    if let Some(error) = first_error {
        if let Some(dir) = &settings.progress_dir {
            std::fs::create_dir_all(dir)?;
            let manifest = ProgressManifest {
                total: plan.len(),
                completed,
                failed: failed_hashes.iter().map(String::as_str).collect(),
            };
            let mut text =
                serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            text.push('\n');
            std::fs::write(dir.join("augment_progress.json"), text)?;
        }
        return Err(error.into());
    }

    // parse, validate, dedup in plan order
    let mut seen_questions: BTreeSet<String> =
        sources.iter().map(|s| normalize_question(&s.question)).collect();
    let source_labels: std::collections::BTreeMap<&str, Label> = sources
        .iter()
        .map(|s| (s.id.as_str(), s.final_decision))
        .collect();
    let mut stats: Vec<(AugmentStrategy, StrategyStats)> = Vec::new();
    fn stat_of(stats: &mut Vec<(AugmentStrategy, StrategyStats)>, s: AugmentStrategy) -> usize {
        if let Some(pos) = stats.iter().position(|(k, _)| *k == s) {
            pos
        } else {
            stats.push((s, StrategyStats::default()));
            stats.len() - 1
        }
    }
    let mut records: Vec<AugmentedRecord> = Vec::new();
    for (planned, result) in plan.iter().zip(&results) {
        let slot = stat_of(&mut stats, planned.strategy);
        stats[slot].1.requests += 1;
        let guard = result.lock().unwrap();
        let text = match guard.as_ref() {
            Some(Ok(t)) => t,
            _ => unreachable!("errors aborted above"),
        };
        let parsed = match parse_generation(text) {
            Ok(p) => p,
            Err(_) => {
                stats[slot].1.parse_failures += 1;
                continue;
            }
        };
        if planned.strategy == AugmentStrategy::RewriteQA {
            let source_label = source_labels[planned.source_id.as_str()];
            if parsed.decision != source_label {
                stats[slot].1.label_mismatches += 1;
                continue;
            }
        }
        let key = normalize_question(&parsed.question);
        if key.is_empty() || !seen_questions.insert(key) {
            stats[slot].1.dedup_dropped += 1;
            continue;
        }
        let hash = planned.request.hash();
        records.push(AugmentedRecord {
            record: PubMedQARecord {
                id: format!("aug-{}", &hash[..16]),
                question: parsed.question,
                contexts: vec![parsed.context],
                long_answer: parsed.long_answer,
                final_decision: parsed.decision,
            },
            provenance: Provenance {
                strategy: planned.strategy,
                source_id: planned.source_id.clone(),
                backend_model: planned.request.model_id.clone(),
                request_hash: hash,
            },
        });
        stats[slot].1.kept += 1;
    }

    Ok(AugmentRun {
        records,
        summary: AugmentSummary {
            strategy,
            per_strategy: stats,
        },
    })
}

/// One JSON object per line, provenance included.
pub fn write_augmented(records: &[AugmentedRecord], path: &Path) -> Result<(), AugmentError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_augmented(path: &Path) -> Result<Vec<AugmentedRecord>, AugmentError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| AugmentError::InvalidSettings(format!("augmented file: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::synthetic_records;

    fn settings() -> AugmentSettings {
        AugmentSettings::default()
    }

    #[test]
    fn rewrite_prompt_embeds_source_and_asks_for_paraphrase() {
        let source = &synthetic_records(1, 0)[0];
        let req = build_prompt(AugmentStrategy::RewriteQA, Some(source), &settings().prompt)
            .unwrap();
        assert!(req.prompt.contains(&source.question));
        assert!(req.prompt.contains("paraphrase"));
    }

    #[test]
    fn new_prompt_has_no_source_text() {
        let source = &synthetic_records(1, 0)[0];
        let req =
            build_prompt(AugmentStrategy::NewQA, Some(source), &settings().prompt).unwrap();
        assert!(!req.prompt.contains(&source.question));
    }

    #[test]
    fn prompts_are_byte_deterministic() {
        let source = &synthetic_records(1, 0)[0];
        let a = build_prompt(AugmentStrategy::RewriteQA, Some(source), &settings().prompt)
            .unwrap();
        let b = build_prompt(AugmentStrategy::RewriteQA, Some(source), &settings().prompt)
            .unwrap();
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn rewrite_without_source_is_a_contract_error() {
        assert!(matches!(
            build_prompt(AugmentStrategy::RewriteQA, None, &settings().prompt),
            Err(AugmentError::MissingSource)
        ));
    }

    #[test]
    fn render_then_parse_round_trips() {
        let text = render_generation(
            "is this a question?",
            "some context.",
            "a long answer.",
            Label::Maybe,
        );
        let parsed = parse_generation(&text).unwrap();
        assert_eq!(parsed.question, "is this a question?");
        assert_eq!(parsed.context, "some context.");
        assert_eq!(parsed.long_answer, "a long answer.");
        assert_eq!(parsed.decision, Label::Maybe);
    }

    #[test]
    fn missing_decision_names_the_field() {
        let text = "QUESTION: q?\nCONTEXT: c.\nLONG_ANSWER: a.\n";
        assert_eq!(
            parse_generation(text).unwrap_err(),
            GenParseError::MissingField("DECISION")
        );
    }

    #[test]
    fn decision_is_case_normalized() {
        let text = "QUESTION: q?\nCONTEXT: c.\nLONG_ANSWER: a.\nDECISION: Maybe\n";
        assert_eq!(parse_generation(text).unwrap().decision, Label::Maybe);
    }

    #[test]
    fn mock_is_deterministic_and_preserves_decision() {
        let source = &synthetic_records(3, 1)[2];
        let req = build_prompt(AugmentStrategy::RewriteQA, Some(source), &settings().prompt)
            .unwrap();
        let mock = MockBackend;
        let a = mock.generate(&req).unwrap();
        let b = mock.generate(&req).unwrap();
        assert_eq!(a, b);
        let parsed = parse_generation(&a).unwrap();
        assert_eq!(parsed.decision, source.final_decision);
        assert!(parsed.question.starts_with("It is asked whether"));
        assert_ne!(
            normalize_question(&parsed.question),
            normalize_question(&source.question)
        );
    }

    #[test]
    fn mock_new_records_differ_across_requests() {
        let mock = MockBackend;
        let a = build_prompt_variant(AugmentStrategy::NewQA, None, None, 0, &settings().prompt)
            .unwrap();
        let b = build_prompt_variant(AugmentStrategy::NewQA, None, None, 1, &settings().prompt)
            .unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_ne!(mock.generate(&a).unwrap(), mock.generate(&b).unwrap());
    }

    #[test]
    fn augment_rewrite_keeps_labels_and_bounds_count() {
        let sources = synthetic_records(12, 5);
        let run = augment(&sources, AugmentStrategy::RewriteQA, &MockBackend, &settings())
            .unwrap();
        assert!(run.records.len() <= sources.len());
        for r in &run.records {
            let source = sources
                .iter()
                .find(|s| s.id == r.provenance.source_id)
                .expect("provenance source exists");
            assert_eq!(r.record.final_decision, source.final_decision);
        }
        let (_, stats) = run.summary.per_strategy[0];
        assert_eq!(stats.requests, 12);
        assert_eq!(stats.kept as usize, run.records.len());
    }

    /// A backend that parrots the source question back, so every output
    /// collides with its source under normalization.
    struct EchoBackend;

    impl GenerationBackend for EchoBackend {
        fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
            let pos = request.prompt.find(SOURCE_MARKER).expect("rewrite prompt");
            let parsed = parse_generation(&request.prompt[pos..]).unwrap();
            Ok(render_generation(
                &parsed.question,
                &parsed.context,
                &parsed.long_answer,
                parsed.decision,
            ))
        }
    }

    #[test]
    fn echoed_questions_are_deduplicated_to_nothing() {
        let sources = synthetic_records(6, 2);
        let run =
            augment(&sources, AugmentStrategy::RewriteQA, &EchoBackend, &settings()).unwrap();
        assert!(run.records.is_empty());
        let (_, stats) = run.summary.per_strategy[0];
        assert_eq!(stats.dedup_dropped, 6);
    }

    #[test]
    fn combined_is_the_union_of_both_strategies() {
        let sources = synthetic_records(5, 7);
        let rewrite =
            augment(&sources, AugmentStrategy::RewriteQA, &MockBackend, &settings()).unwrap();
        let new =
            augment(&sources, AugmentStrategy::NewQA, &MockBackend, &settings()).unwrap();
        let combined =
            augment(&sources, AugmentStrategy::CombinedQA, &MockBackend, &settings()).unwrap();

        let hashes = |run: &AugmentRun| -> Vec<String> {
            run.records
                .iter()
                .map(|r| r.provenance.request_hash.clone())
                .collect()
        };
        let mut union = hashes(&rewrite);
        union.extend(hashes(&new));
        assert_eq!(hashes(&combined), union);
        assert_eq!(combined.summary.per_strategy.len(), 2);
    }

    #[test]
    fn cache_prevents_repeat_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let counting = CountingBackend::new(MockBackend);
        let cached = CachedBackend::new(&counting, dir.path()).unwrap();
        let sources = synthetic_records(4, 3);

        let first = augment(&sources, AugmentStrategy::CombinedQA, &cached, &settings()).unwrap();
        let calls_after_first = counting.calls();
        assert_eq!(calls_after_first, 8);

        let second = augment(&sources, AugmentStrategy::CombinedQA, &cached, &settings()).unwrap();
        assert_eq!(counting.calls(), calls_after_first, "cache missed");
        assert_eq!(first.records, second.records);

        // provenance completeness: every kept record maps to a cache file
        for r in &first.records {
            assert!(cached.cache_path(&r.provenance.request_hash).exists());
        }
    }

    #[test]
    fn augmented_questions_never_collide() {
        let sources = synthetic_records(10, 11);
        let run =
            augment(&sources, AugmentStrategy::CombinedQA, &MockBackend, &settings()).unwrap();
        let mut keys = BTreeSet::new();
        for s in &sources {
            keys.insert(normalize_question(&s.question));
        }
        for r in &run.records {
            assert!(
                keys.insert(normalize_question(&r.record.question)),
                "duplicate question survived dedup"
            );
        }
    }

    #[test]
    fn transport_failure_aborts_with_progress_manifest() {
        struct FailingBackend;
        impl GenerationBackend for FailingBackend {
            fn generate(&self, _request: &GenerationRequest) -> Result<String, BackendError> {
                Err(BackendError::Transport("connection refused".into()))
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let sources = synthetic_records(3, 0);
        let mut s = settings();
        s.progress_dir = Some(dir.path().to_path_buf());
        let err = augment(&sources, AugmentStrategy::RewriteQA, &FailingBackend, &s).unwrap_err();
        assert!(matches!(err, AugmentError::Backend(BackendError::Transport(_))));
        let manifest = std::fs::read_to_string(dir.path().join("augment_progress.json")).unwrap();
        assert!(manifest.contains("\"total\": 3"));
    }

    #[test]
    fn jsonl_round_trip() {
        let sources = synthetic_records(4, 13);
        let run =
            augment(&sources, AugmentStrategy::RewriteQA, &MockBackend, &settings()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("augmented.jsonl");
        write_augmented(&run.records, &path).unwrap();
        let loaded = read_augmented(&path).unwrap();
        assert_eq!(loaded, run.records);
    }
}
