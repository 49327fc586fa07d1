//! Two-stage generation against a chat-completion endpoint.
//!
//! Each admission is handled by one worker: the BHC is generated first and its text is fed into
//! the DI prompt. Completed results go through a channel to a single journal writer, so a killed
//! batch can be resumed without re-requesting finished work.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assemble::{reference_target, Assembler};
use crate::corpus::{Corpus, DischargeRecord, RadiologyReport};
use crate::prompt::{GenerationTask, PromptBundle, PromptVariant};

pub const DEFAULT_API_KEY_ENV: &str = "DISCHARGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Server root (`http://host:port/v1`) or the full chat-completions URL.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. The key itself is never stored.
    pub api_key_env: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub backoff_base_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "mistral".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            max_new_tokens: 1024,
            temperature: 0.0,
            request_timeout_secs: 300,
            max_retries: 3,
            max_concurrency: 4,
            backoff_base_ms: 1000,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("temperature must be a finite value >= 0, got {0}")]
    Temperature(f64),
    #[error("max_concurrency must be at least 1")]
    Concurrency,
    #[error("base_url `{0}` is not an http(s) URL")]
    Url(String),
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::Temperature(self.temperature));
        }
        if self.max_concurrency == 0 {
            return Err(ConfigError::Concurrency);
        }
        host_port(&self.base_url).ok_or_else(|| ConfigError::Url(self.base_url.clone()))?;
        Ok(())
    }

    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty())
    }

    pub fn chat_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    /// Ceiling of the randomized delay before retry number `retry` (0-based).
    pub fn backoff_ceiling(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(20)))
    }
}

fn host_port(url: &str) -> Option<(String, u16)> {
    let (rest, default_port) = if let Some(r) = url.strip_prefix("http://") {
        (r, 80)
    } else if let Some(r) = url.strip_prefix("https://") {
        (r, 443)
    } else {
        return None;
    };
    let authority = rest.split(['/', '?', '#']).next().unwrap_or("");
    let authority = authority.rsplit('@').next().unwrap_or(authority);
    if authority.is_empty() {
        return None;
    }
    if let Some(v6) = authority.strip_prefix('[') {
        let (host, tail) = v6.split_once(']')?;
        let port = match tail.strip_prefix(':') {
            Some(p) => p.parse().ok()?,
            None => default_port,
        };
        return Some((host.to_string(), port));
    }
    match authority.rsplit_once(':') {
        Some((host, port)) => Some((host.to_string(), port.parse().ok()?)),
        None => Some((authority.to_string(), default_port)),
    }
}

/// Opens and closes a TCP connection to the endpoint host.
pub fn probe(config: &EndpointConfig, timeout: Duration) -> Result<(), String> {
    let (host, port) = host_port(&config.base_url).ok_or_else(|| format!("bad URL `{}`", config.base_url))?;
    let addrs: Vec<_> = (host.as_str(), port)
        .to_socket_addrs()
        .map_err(|e| format!("{host}:{port}: {e}"))?
        .collect();
    let mut last = format!("{host}:{port}: no addresses");
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(_) => return Ok(()),
            Err(e) => last = format!("{addr}: {e}"),
        }
    }
    Err(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn single_turn(prompt: &str, config: &EndpointConfig) -> Self {
        Self {
            model: config.model_name.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt.to_string(),
            }],
            temperature: config.temperature,
            max_tokens: config.max_new_tokens,
        }
    }

    pub fn prompt(&self) -> &str {
        self.messages.first().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub content: String,
    pub finish_reason: Option<String>,
}

/// Which admission and stage a request belongs to; useful to scripted transports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    pub hadm_id: String,
    pub task: GenerationTask,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("transport: {0}")]
    Network(String),
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("bad response: {0}")]
    Protocol(String),
}

impl TransportError {
    pub fn retryable(&self) -> bool {
        match self {
            TransportError::Network(_) => true,
            TransportError::Status { code, .. } => *code == 429 || *code >= 500,
            TransportError::Protocol(_) => false,
        }
    }
}

pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest, ctx: &RequestContext) -> Result<ChatReply, TransportError>;
}

/// JSON-over-HTTP chat-completions client.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Self {
        Self {
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(config.request_timeout_secs))
                .build(),
            url: config.chat_url(),
            api_key: config.api_key(),
        }
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

const BODY_EXCERPT: usize = 300;

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest, _ctx: &RequestContext) -> Result<ChatReply, TransportError> {
        let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::to_string(request).expect("request serializes");
        let resp = match call.send_string(&body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let body: String = r.into_string().unwrap_or_default().chars().take(BODY_EXCERPT).collect();
                return Err(TransportError::Status { code, body });
            }
            Err(e) => return Err(TransportError::Network(e.to_string())),
        };
        let text = resp.into_string().map_err(|e| TransportError::Network(e.to_string()))?;
        let parsed: CompletionBody =
            serde_json::from_str(&text).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Protocol("no choices".into()))?;
        Ok(ChatReply {
            content: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCause {
    /// The endpoint errored or kept failing.
    Endpoint,
    /// The endpoint answered with an empty completion.
    Empty,
    /// The prompt could not be built.
    Prompt,
    /// DI had neither a generated nor a reference BHC to condition on.
    Upstream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub hadm_id: String,
    pub task: GenerationTask,
    pub prompt_hash: String,
    pub output_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    pub attempts: u32,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cause: Option<FailureCause>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationResult {
    fn failed(hadm_id: &str, task: GenerationTask, prompt_hash: String, cause: FailureCause, error: String) -> Self {
        Self {
            hadm_id: hadm_id.to_string(),
            task,
            prompt_hash,
            output_text: String::new(),
            latency_ms: None,
            attempts: 0,
            status: Status::Failed,
            cause: Some(cause),
            error: Some(error),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

pub fn prompt_hash(rendered: &str) -> String {
    hex::encode(Sha256::digest(rendered.as_bytes()))
}

/// Endpoint settings plus the transport they are sent through.
pub struct Generator<'t> {
    pub config: EndpointConfig,
    pub transport: &'t dyn ChatTransport,
}

impl<'t> Generator<'t> {
    pub fn new(config: EndpointConfig, transport: &'t dyn ChatTransport) -> Self {
        Self { config, transport }
    }

    /// Sends one single-turn request, retrying transient failures with full-jitter backoff.
    pub fn generate(&self, hadm_id: &str, prompt: &PromptBundle) -> GenerationResult {
        let ctx = RequestContext {
            hadm_id: hadm_id.to_string(),
            task: prompt.task,
        };
        let request = ChatRequest::single_turn(&prompt.rendered, &self.config);
        let hash = prompt_hash(&prompt.rendered);
        let start = Instant::now();
        let mut attempts = 0;
        let outcome = loop {
            attempts += 1;
            match self.transport.send(&request, &ctx) {
                Ok(reply) => break Ok(reply),
                Err(e) if e.retryable() && attempts <= self.config.max_retries => {
                    let ceiling = self.config.backoff_ceiling(attempts - 1).as_millis() as u64;
                    let delay = rand::thread_rng().gen_range(0..=ceiling);
                    log::debug!("{hadm_id}/{}: attempt {attempts} failed ({e}); retrying in {delay} ms", prompt.task);
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(e) => break Err(e),
            }
        };
        let latency_ms = Some(start.elapsed().as_millis() as u64);
        let mut result = match outcome {
            Ok(reply) if reply.content.trim().is_empty() => GenerationResult::failed(
                hadm_id,
                prompt.task,
                hash,
                FailureCause::Empty,
                "empty completion".into(),
            ),
            Ok(reply) => {
                let truncated = reply.finish_reason.as_deref() == Some("length");
                GenerationResult {
                    hadm_id: hadm_id.to_string(),
                    task: prompt.task,
                    prompt_hash: hash,
                    output_text: reply.content,
                    latency_ms: None,
                    attempts: 0,
                    status: if truncated { Status::Truncated } else { Status::Ok },
                    cause: None,
                    error: None,
                }
            }
            Err(e) => GenerationResult::failed(hadm_id, prompt.task, hash, FailureCause::Endpoint, e.to_string()),
        };
        result.attempts = attempts;
        result.latency_ms = latency_ms;
        result
    }
}

/// Prompts actually sent for one admission, kept for inspection.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub bhc: GenerationResult,
    pub di: GenerationResult,
    pub di_prompt: Option<PromptBundle>,
}

/// BHC then DI for one admission.
pub fn run_pipeline(
    record: &DischargeRecord,
    reports: &[RadiologyReport],
    variant: PromptVariant,
    assembler: &Assembler,
    generator: &Generator<'_>,
) -> PipelineOutcome {
    let prepared = assembler.prepare(record, reports);
    let bhc = bhc_stage(record, &prepared, variant, assembler, generator);
    let (di, di_prompt) = di_stage(record, &prepared, &bhc, variant, assembler, generator);
    PipelineOutcome { bhc, di, di_prompt }
}

fn bhc_stage(
    record: &DischargeRecord,
    prepared: &crate::assemble::PreparedRecord,
    variant: PromptVariant,
    assembler: &Assembler,
    generator: &Generator<'_>,
) -> GenerationResult {
    match assembler.prompt(prepared, GenerationTask::Bhc, variant, None) {
        Ok(p) => generator.generate(&record.hadm_id, &p),
        Err(e) => GenerationResult::failed(
            &record.hadm_id,
            GenerationTask::Bhc,
            String::new(),
            FailureCause::Prompt,
            format!("bhc: {e}"),
        ),
    }
}

fn di_stage(
    record: &DischargeRecord,
    prepared: &crate::assemble::PreparedRecord,
    bhc: &GenerationResult,
    variant: PromptVariant,
    assembler: &Assembler,
    generator: &Generator<'_>,
) -> (GenerationResult, Option<PromptBundle>) {
    let prior = if bhc.status == Status::Failed {
        match reference_target(record, &prepared.parsed, GenerationTask::Bhc) {
            Some(r) => {
                log::info!("{}: BHC generation failed, conditioning DI on the reference BHC", record.hadm_id);
                r
            }
            None => {
                let err = format!("di: no BHC available ({})", bhc.error.as_deref().unwrap_or("bhc failed"));
                let r = GenerationResult::failed(
                    &record.hadm_id,
                    GenerationTask::Di,
                    String::new(),
                    FailureCause::Upstream,
                    err,
                );
                return (r, None);
            }
        }
    } else {
        bhc.output_text.clone()
    };
    match assembler.prompt(prepared, GenerationTask::Di, variant, Some(&prior)) {
        Ok(p) => (generator.generate(&record.hadm_id, &p), Some(p)),
        Err(e) => (
            GenerationResult::failed(
                &record.hadm_id,
                GenerationTask::Di,
                String::new(),
                FailureCause::Prompt,
                format!("di: {e}"),
            ),
            None,
        ),
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> BatchError + '_ {
    move |source| BatchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn journal_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".journal.jsonl");
    PathBuf::from(s)
}

/// Latest journal entry per (hadm_id, task). A torn trailing line is ignored.
pub fn read_journal(path: &Path) -> io::Result<BTreeMap<(String, GenerationTask), GenerationResult>> {
    let mut out = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(e),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GenerationResult>(&line) {
            Ok(r) => {
                out.insert((r.hadm_id.clone(), r.task), r);
            }
            Err(e) => log::warn!("{}:{}: skipping unreadable journal line ({e})", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn open_journal(path: &Path) -> io::Result<File> {
    let mut f = OpenOptions::new().create(true).read(true).append(true).open(path)?;
    let len = f.metadata()?.len();
    if len > 0 {
        f.seek(SeekFrom::Start(len - 1))?;
        let mut last = [0u8];
        f.read_exact(&mut last)?;
        if last[0] != b'\n' {
            f.write_all(b"\n")?;
        }
    }
    Ok(f)
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions<'a> {
    /// Once set, workers stop taking admissions and stop between an admission's two stages.
    pub cancel: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BatchSummary {
    pub admissions: usize,
    /// Admissions whose results were all already ok in the journal.
    pub skipped: usize,
    /// Stage generations attempted in this run.
    pub generated: usize,
    pub ok: usize,
    pub failed: usize,
    pub truncated: usize,
    pub cancelled: bool,
}

impl BatchSummary {
    pub fn reconciles(&self) -> bool {
        self.cancelled || self.ok + self.failed + self.truncated == 2 * self.admissions
    }
}

enum Work<'a> {
    Full(&'a DischargeRecord),
    DiOnly(&'a DischargeRecord, GenerationResult),
}

/// Runs every admission of `corpus` and writes the results, sorted by (hadm_id, task), to `out`.
///
/// Progress goes to `<out>.journal.jsonl` as results complete. Rerunning with the same `out`
/// skips admissions already ok there and reuses an ok BHC. The sorted file leaves out latency so
/// it depends only on the endpoint's answers.
pub fn run_batch(
    corpus: &Corpus,
    variant: PromptVariant,
    assembler: &Assembler,
    generator: &Generator<'_>,
    out: &Path,
    options: &BatchOptions<'_>,
) -> Result<BatchSummary, BatchError> {
    generator.config.validate()?;
    let jpath = journal_path(out);
    let journal = read_journal(&jpath).map_err(io_err(&jpath))?;
    let mut summary = BatchSummary {
        admissions: corpus.len(),
        ..BatchSummary::default()
    };

    let mut work = Vec::new();
    for record in corpus.records() {
        let id = &record.hadm_id;
        let bhc = journal.get(&(id.clone(), GenerationTask::Bhc)).filter(|r| r.is_ok());
        let di = journal.get(&(id.clone(), GenerationTask::Di)).filter(|r| r.is_ok());
        match (bhc, di) {
            (Some(_), Some(_)) => summary.skipped += 1,
            (Some(b), None) => work.push(Work::DiOnly(record, b.clone())),
            _ => work.push(Work::Full(record)),
        }
    }

    let mut file = open_journal(&jpath).map_err(io_err(&jpath))?;
    let next = AtomicUsize::new(0);
    let generated = AtomicUsize::new(0);
    let workers = generator.config.max_concurrency.min(work.len()).max(1);
    let cancelled = || options.cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    let (tx, rx) = mpsc::channel::<GenerationResult>();

    let mut fresh: BTreeMap<(String, GenerationTask), GenerationResult> = BTreeMap::new();
    let write_result = std::thread::scope(|scope| -> io::Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (work, next, generated) = (&work, &next, &generated);
            scope.spawn(move || loop {
                if cancelled() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = work.get(i) else { return };
                let (record, reuse) = match item {
                    Work::Full(r) => (*r, None),
                    Work::DiOnly(r, b) => (*r, Some(b.clone())),
                };
                let reports = corpus.reports_for(&record.hadm_id);
                let prepared = assembler.prepare(record, reports);
                let bhc = match reuse {
                    Some(b) => b,
                    None => {
                        generated.fetch_add(1, Ordering::SeqCst);
                        let b = bhc_stage(record, &prepared, variant, assembler, generator);
                        if tx.send(b.clone()).is_err() {
                            return;
                        }
                        b
                    }
                };
                if cancelled() {
                    return;
                }
                generated.fetch_add(1, Ordering::SeqCst);
                let (di, _) = di_stage(record, &prepared, &bhc, variant, assembler, generator);
                if tx.send(di).is_err() {
                    return;
                }
            });
        }
        drop(tx);
        let mut w = BufWriter::new(&mut file);
        for result in rx {
            serde_json::to_writer(&mut w, &result)?;
            w.write_all(b"\n")?;
            w.flush()?;
            fresh.insert((result.hadm_id.clone(), result.task), result);
        }
        Ok(())
    });
    write_result.map_err(io_err(&jpath))?;
    file.sync_all().map_err(io_err(&jpath))?;
    summary.generated = generated.load(Ordering::SeqCst);

    if cancelled() {
        summary.cancelled = true;
        return Ok(summary);
    }

    let mut merged = journal;
    merged.extend(fresh);
    let mut tmp_name = out.as_os_str().to_owned();
    tmp_name.push(".tmp");
    let tmp = PathBuf::from(tmp_name);
    {
        let f = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(f);
        for record in corpus.records() {
            for task in GenerationTask::ALL {
                let Some(r) = merged.get(&(record.hadm_id.clone(), task)) else {
                    continue;
                };
                match r.status {
                    Status::Ok => summary.ok += 1,
                    Status::Failed => summary.failed += 1,
                    Status::Truncated => summary.truncated += 1,
                }
                let mut r = r.clone();
                r.latency_ms = None;
                serde_json::to_writer(&mut w, &r).map_err(|e| io_err(&tmp)(e.into()))?;
                w.write_all(b"\n").map_err(io_err(&tmp))?;
            }
        }
        w.flush().map_err(io_err(&tmp))?;
        w.get_ref().sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, out).map_err(io_err(out))?;
    Ok(summary)
}

/// Reads a results JSONL file.
pub fn read_results(path: &Path) -> io::Result<Vec<GenerationResult>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}
