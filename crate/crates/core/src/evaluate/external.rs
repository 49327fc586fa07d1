//! Model-based scorers (BERTScore, AlignScore, MEDCON) behind an out-of-process adapter.
//!
//! Request: `{"metric": "...", "pairs": [{"id", "candidate", "reference"}]}` on stdin or as a POST
//! body. Reply: `{"scores": [{"id", "score"}]}`. A non-zero exit or HTTP status >= 400 means the
//! metric is unavailable; a reply that breaks the contract is a protocol error.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Metric;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AdapterSpec {
    Command { command: Vec<String> },
    Http { url: String },
}

/// Adapter per model-based metric, read from a TOML table keyed by metric name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    #[serde(default)]
    pub bertscore: Option<AdapterSpec>,
    #[serde(default)]
    pub alignscore: Option<AdapterSpec>,
    #[serde(default)]
    pub medcon: Option<AdapterSpec>,
}

impl AdapterConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AdapterError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| AdapterError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| AdapterError::Config(format!("{}: {e}", path.display())))
    }

    pub fn get(&self, metric: Metric) -> Option<&AdapterSpec> {
        match metric {
            Metric::BertScore => self.bertscore.as_ref(),
            Metric::AlignScore => self.alignscore.as_ref(),
            Metric::Medcon => self.medcon.as_ref(),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter for {metric} unavailable: {reason}")]
    Unavailable { metric: Metric, reason: String },
    #[error("adapter for {metric} broke the protocol: {message} (reply: {excerpt})")]
    Protocol {
        metric: Metric,
        message: String,
        excerpt: String,
    },
    #[error("adapter config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorePair {
    pub id: String,
    pub candidate: String,
    pub reference: String,
}

#[derive(Serialize)]
struct Request<'a> {
    metric: &'a str,
    pairs: &'a [ScorePair],
}

#[derive(Deserialize)]
struct Reply {
    scores: Vec<ReplyScore>,
}

#[derive(Deserialize)]
struct ReplyScore {
    id: String,
    score: f64,
}

const EXCERPT_CHARS: usize = 200;
const HTTP_TIMEOUT: Duration = Duration::from_secs(600);

fn excerpt(s: &str) -> String {
    let mut e: String = s.chars().take(EXCERPT_CHARS).collect();
    if s.chars().count() > EXCERPT_CHARS {
        e.push_str("...");
    }
    e
}

/// Scores `pairs` with the adapter for `metric`; results follow the order of `pairs`.
pub fn external_score(metric: Metric, pairs: &[ScorePair], spec: &AdapterSpec) -> Result<Vec<f64>, AdapterError> {
    let body = serde_json::to_string(&Request {
        metric: metric.key(),
        pairs,
    })
    .expect("request serializes");
    let reply = match spec {
        AdapterSpec::Command { command } => run_command(metric, command, &body)?,
        AdapterSpec::Http { url } => post(metric, url, &body)?,
    };
    parse_reply(metric, pairs, &reply)
}

fn unavailable(metric: Metric, reason: impl Into<String>) -> AdapterError {
    AdapterError::Unavailable {
        metric,
        reason: reason.into(),
    }
}

fn run_command(metric: Metric, command: &[String], body: &str) -> Result<String, AdapterError> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| AdapterError::Config(format!("empty command for {metric}")))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| unavailable(metric, format!("cannot start `{program}`: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let payload = body.to_string();
    // Write on a separate thread so a chatty adapter cannot deadlock on a full stdout pipe.
    let writer = std::thread::spawn(move || stdin.write_all(payload.as_bytes()));
    let output = child
        .wait_with_output()
        .map_err(|e| unavailable(metric, e.to_string()))?;
    let _ = writer.join();
    if !output.status.success() {
        return Err(unavailable(
            metric,
            format!(
                "`{program}` exited with {}: {}",
                output.status,
                excerpt(String::from_utf8_lossy(&output.stderr).trim())
            ),
        ));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn post(metric: Metric, url: &str, body: &str) -> Result<String, AdapterError> {
    let agent = ureq::AgentBuilder::new().timeout(HTTP_TIMEOUT).build();
    match agent
        .post(url)
        .set("Content-Type", "application/json")
        .send_string(body)
    {
        Ok(resp) => resp
            .into_string()
            .map_err(|e| unavailable(metric, format!("reading reply: {e}"))),
        Err(ureq::Error::Status(code, _)) => Err(unavailable(metric, format!("HTTP {code}"))),
        Err(e) => Err(unavailable(metric, e.to_string())),
    }
}

fn parse_reply(metric: Metric, pairs: &[ScorePair], reply: &str) -> Result<Vec<f64>, AdapterError> {
    let protocol = |message: String| AdapterError::Protocol {
        metric,
        message,
        excerpt: excerpt(reply.trim()),
    };
    let parsed: Reply = serde_json::from_str(reply).map_err(|e| protocol(format!("malformed JSON: {e}")))?;
    if parsed.scores.len() != pairs.len() {
        return Err(protocol(format!(
            "expected {} scores, got {}",
            pairs.len(),
            parsed.scores.len()
        )));
    }
    let mut by_id: HashMap<&str, f64> = HashMap::new();
    for s in &parsed.scores {
        if !(0.0..=1.0).contains(&s.score) {
            return Err(protocol(format!("score {} for `{}` outside [0, 1]", s.score, s.id)));
        }
        by_id.insert(s.id.as_str(), s.score);
    }
    pairs
        .iter()
        .map(|p| {
            by_id
                .get(p.id.as_str())
                .copied()
                .ok_or_else(|| protocol(format!("no score for id `{}`", p.id)))
        })
        .collect()
}

/// Runs every configured adapter; unavailable ones are left out and reported.
pub fn score_all(
    pairs: &[ScorePair],
    config: &AdapterConfig,
) -> Result<(BTreeMap<Metric, Vec<f64>>, Vec<(Metric, String)>), AdapterError> {
    let mut scores = BTreeMap::new();
    let mut missing = Vec::new();
    for metric in Metric::EXTERNAL {
        let Some(spec) = config.get(metric) else {
            missing.push((metric, "no adapter configured".to_string()));
            continue;
        };
        if pairs.is_empty() {
            scores.insert(metric, Vec::new());
            continue;
        }
        match external_score(metric, pairs, spec) {
            Ok(s) => {
                scores.insert(metric, s);
            }
            Err(AdapterError::Unavailable { reason, .. }) => {
                log::warn!("{metric} unavailable: {reason}");
                missing.push((metric, reason));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((scores, missing))
}
