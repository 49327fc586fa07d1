//! Radiology impressions as a stand-in for the Pertinent Results section.
//!
//! Each report of an admission is scored by how much of its impression is already contained in
//! the summary's Pertinent Results. Reports whose impression is largely duplicated there are the
//! ones selected to replace that section in the prompt.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DischargeRecord, RadiologyReport};
use crate::sections::{ParsedSummary, SectionName};

/// Token limit applied to Pertinent Results when no report clears the threshold.
pub const FALLBACK_TOKEN_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub threshold: f64,
    pub max_reports: usize,
    pub ngram_order: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_reports: 5,
            ngram_order: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("max_reports must be at least 1")]
    MaxReports,
    #[error("ngram_order must be at least 1")]
    NgramOrder,
}

impl SelectionConfig {
    pub fn new(threshold: f64, max_reports: usize, ngram_order: usize) -> Result<Self, ConfigError> {
        let cfg = Self {
            threshold,
            max_reports,
            ngram_order,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Threshold(self.threshold));
        }
        if self.max_reports == 0 {
            return Err(ConfigError::MaxReports);
        }
        if self.ngram_order == 0 {
            return Err(ConfigError::NgramOrder);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionMatch {
    pub note_id: String,
    pub similarity: f64,
    pub impression: String,
    pub selected: bool,
}

fn impression_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*IMPRESSION[ \t]*:").unwrap())
}

/// An all-caps line opening with a label and colon, e.g. `NOTIFICATION:` or `RECOMMENDATION(S):`.
fn caps_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*[A-Z][A-Z0-9 ()/&'-]*[A-Z)][ \t]*:").unwrap())
}

/// Body of the first `IMPRESSION:` block, up to the next all-caps header line.
pub fn extract_impression(report_text: &str) -> Option<String> {
    let header = impression_header().find(report_text)?;
    let rest = &report_text[header.end()..];
    let end = caps_header().find(rest).map_or(rest.len(), |m| m.start());
    let body = rest[..end].trim();
    Some(body.to_string())
}

/// Lowercased alphanumeric tokens; punctuation separates tokens and `___` placeholders drop out.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty() && !t.chars().all(|c| c == '_'))
        .map(str::to_string)
        .collect()
}

fn distinct_ngrams(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

/// Fraction of the impression's distinct n-grams that also occur in `pertinent_results`.
pub fn containment_similarity(impression: &str, pertinent_results: &str, ngram_order: usize) -> f64 {
    assert!(ngram_order >= 1, "ngram_order must be at least 1");
    let imp = normalize_tokens(impression);
    let pr = normalize_tokens(pertinent_results);
    let imp_grams = distinct_ngrams(&imp, ngram_order);
    if imp_grams.is_empty() {
        return 0.0;
    }
    let pr_grams = distinct_ngrams(&pr, ngram_order);
    let shared = imp_grams.iter().filter(|g| pr_grams.contains(*g)).count();
    shared as f64 / imp_grams.len() as f64
}

/// Scores every report of the record's admission and marks the selected ones.
///
/// Output is ordered by similarity (descending) then `note_id`. When the summary has no
/// Pertinent Results every score is 0 and the first `max_reports` by `note_id` are selected.
pub fn select_reports(
    record: &DischargeRecord,
    parsed: &ParsedSummary,
    reports: &[RadiologyReport],
    config: &SelectionConfig,
) -> Vec<ImpressionMatch> {
    let pertinent = parsed
        .all(SectionName::PertinentResults)
        .next()
        .map(|o| o.body());
    let mut matches: Vec<ImpressionMatch> = reports
        .iter()
        .filter(|r| r.hadm_id == record.hadm_id)
        .map(|r| {
            let impression = extract_impression(&r.text).unwrap_or_default();
            let similarity = pertinent
                .map(|pr| containment_similarity(&impression, pr, config.ngram_order))
                .unwrap_or(0.0);
            ImpressionMatch {
                note_id: r.note_id.clone(),
                similarity,
                impression,
                selected: false,
            }
        })
        .collect();
    matches.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.note_id.cmp(&b.note_id))
    });
    let fallback = pertinent.is_none();
    for m in matches.iter_mut().take(config.max_reports) {
        m.selected = fallback || m.similarity >= config.threshold;
    }
    matches
}

/// What goes into the prompt at the Pertinent Results position.
#[derive(Debug, Clone, PartialEq)]
pub enum PertinentSubstitute {
    /// Selected impressions, in selection order.
    Impressions(Vec<ImpressionMatch>),
    /// No report cleared the threshold: Pertinent Results cut to its first whitespace tokens.
    Truncated(String),
    /// Neither reports nor Pertinent Results.
    Nothing,
}

pub fn substitute(parsed: &ParsedSummary, matches: &[ImpressionMatch]) -> PertinentSubstitute {
    let selected: Vec<ImpressionMatch> = matches.iter().filter(|m| m.selected).cloned().collect();
    if !selected.is_empty() {
        return PertinentSubstitute::Impressions(selected);
    }
    match parsed.all(SectionName::PertinentResults).next() {
        Some(pr) => PertinentSubstitute::Truncated(leading_tokens(pr.body(), FALLBACK_TOKEN_LIMIT).to_string()),
        None => PertinentSubstitute::Nothing,
    }
}

/// Prefix of `text` holding at most `limit` whitespace-separated tokens, layout preserved.
pub fn leading_tokens(text: &str, limit: usize) -> &str {
    let mut count = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            count += 1;
            if count > limit {
                return text[..i].trim_end();
            }
        }
    }
    text
}

/// Applies a substitute to an input bundle, returning the section list the prompt should show.
pub fn apply_substitute(
    bundle: &[(SectionName, String)],
    substitute: &PertinentSubstitute,
) -> (Vec<(SectionName, String)>, Vec<ImpressionMatch>) {
    match substitute {
        PertinentSubstitute::Impressions(selected) => (bundle.to_vec(), selected.clone()),
        PertinentSubstitute::Truncated(text) => {
            let sections = bundle
                .iter()
                .map(|(n, body)| {
                    if *n == SectionName::PertinentResults {
                        (*n, text.clone())
                    } else {
                        (*n, body.clone())
                    }
                })
                .collect();
            (sections, Vec::new())
        }
        PertinentSubstitute::Nothing => (bundle.to_vec(), Vec::new()),
    }
}
