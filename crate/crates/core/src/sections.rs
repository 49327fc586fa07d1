//! Header-driven segmentation of discharge summaries.
//!
//! A section opens at a line that starts with (at most three spaces or tabs and) one of the
//! sixteen canonical names, matched case-insensitively and followed by a colon. The body runs
//! to the next recognized header or to the end of the text. Anything else that looks like a
//! header (`IMPRESSION:`, `Labs:`) is body content.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Split};

/// The closed set of discharge-summary sections, in canonical row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SectionName {
    #[serde(rename = "Allergies")]
    Allergies,
    #[serde(rename = "Chief Complaint")]
    ChiefComplaint,
    #[serde(rename = "Major Surgical or Invasive Procedure")]
    MajorSurgicalOrInvasiveProcedure,
    #[serde(rename = "History of Present Illness")]
    HistoryOfPresentIllness,
    #[serde(rename = "Past Medical History")]
    PastMedicalHistory,
    #[serde(rename = "Social History")]
    SocialHistory,
    #[serde(rename = "Family History")]
    FamilyHistory,
    #[serde(rename = "Physical Exam")]
    PhysicalExam,
    #[serde(rename = "Pertinent Results")]
    PertinentResults,
    #[serde(rename = "Brief Hospital Course")]
    BriefHospitalCourse,
    #[serde(rename = "Medications on Admission")]
    MedicationsOnAdmission,
    #[serde(rename = "Discharge Medications")]
    DischargeMedications,
    #[serde(rename = "Discharge Disposition")]
    DischargeDisposition,
    #[serde(rename = "Discharge Diagnosis")]
    DischargeDiagnosis,
    #[serde(rename = "Discharge Condition")]
    DischargeCondition,
    #[serde(rename = "Discharge Instructions")]
    DischargeInstructions,
}

impl SectionName {
    pub const ALL: [SectionName; 16] = [
        SectionName::Allergies,
        SectionName::ChiefComplaint,
        SectionName::MajorSurgicalOrInvasiveProcedure,
        SectionName::HistoryOfPresentIllness,
        SectionName::PastMedicalHistory,
        SectionName::SocialHistory,
        SectionName::FamilyHistory,
        SectionName::PhysicalExam,
        SectionName::PertinentResults,
        SectionName::BriefHospitalCourse,
        SectionName::MedicationsOnAdmission,
        SectionName::DischargeMedications,
        SectionName::DischargeDisposition,
        SectionName::DischargeDiagnosis,
        SectionName::DischargeCondition,
        SectionName::DischargeInstructions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionName::Allergies => "Allergies",
            SectionName::ChiefComplaint => "Chief Complaint",
            SectionName::MajorSurgicalOrInvasiveProcedure => "Major Surgical or Invasive Procedure",
            SectionName::HistoryOfPresentIllness => "History of Present Illness",
            SectionName::PastMedicalHistory => "Past Medical History",
            SectionName::SocialHistory => "Social History",
            SectionName::FamilyHistory => "Family History",
            SectionName::PhysicalExam => "Physical Exam",
            SectionName::PertinentResults => "Pertinent Results",
            SectionName::BriefHospitalCourse => "Brief Hospital Course",
            SectionName::MedicationsOnAdmission => "Medications on Admission",
            SectionName::DischargeMedications => "Discharge Medications",
            SectionName::DischargeDisposition => "Discharge Disposition",
            SectionName::DischargeDiagnosis => "Discharge Diagnosis",
            SectionName::DischargeCondition => "Discharge Condition",
            SectionName::DischargeInstructions => "Discharge Instructions",
        }
    }

    /// Brief Hospital Course and Discharge Instructions are generation targets.
    pub fn is_target(self) -> bool {
        matches!(
            self,
            SectionName::BriefHospitalCourse | SectionName::DischargeInstructions
        )
    }

    /// Position in canonical row order.
    pub fn rank(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// The fourteen non-target sections in canonical order.
    pub fn inputs() -> impl Iterator<Item = SectionName> {
        Self::ALL.into_iter().filter(|s| !s.is_target())
    }
}

impl fmt::Display for SectionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("unknown section name `{0}`")]
pub struct UnknownSection(pub String);

impl FromStr for SectionName {
    type Err = UnknownSection;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|n| n.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| UnknownSection(s.to_string()))
    }
}

/// One header occurrence and its body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionOccurrence {
    pub name: SectionName,
    /// 0 for the first occurrence of `name`, 1 for the second, and so on.
    pub occurrence: usize,
    /// Header text exactly as it appears in the source, including leading indentation and colon.
    pub header: String,
    /// Byte offsets of the header in the source.
    pub header_span: (usize, usize),
    /// Untrimmed body.
    pub raw_body: String,
    /// Byte offsets of the untrimmed body in the source.
    pub span: (usize, usize),
}

impl SectionOccurrence {
    pub fn body(&self) -> &str {
        self.raw_body.trim()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSummary {
    pub unmatched_prefix: String,
    pub occurrences: Vec<SectionOccurrence>,
}

impl ParsedSummary {
    /// First-occurrence view: canonical order, trimmed bodies.
    pub fn sections(&self) -> BTreeMap<SectionName, &str> {
        let mut map = BTreeMap::new();
        for occ in &self.occurrences {
            map.entry(occ.name).or_insert_with(|| occ.body());
        }
        map
    }

    pub fn contains(&self, name: SectionName) -> bool {
        self.occurrences.iter().any(|o| o.name == name)
    }

    pub fn all(&self, name: SectionName) -> impl Iterator<Item = &SectionOccurrence> {
        self.occurrences.iter().filter(move |o| o.name == name)
    }

    /// Rebuilds the source text from the prefix, headers and untrimmed bodies.
    pub fn reconstruct(&self) -> String {
        let mut out = self.unmatched_prefix.clone();
        for occ in &self.occurrences {
            out.push_str(&occ.header);
            out.push_str(&occ.raw_body);
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum AliasError {
    #[error("cannot read alias table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("alias table line {line}: {message}")]
    Syntax { line: usize, message: String },
}

/// Compiled header grammar, optionally extended with aliases.
#[derive(Debug, Clone)]
pub struct SectionParser {
    pattern: Regex,
    lookup: Vec<(String, SectionName)>,
}

impl Default for SectionParser {
    fn default() -> Self {
        Self::with_aliases(&[])
    }
}

impl SectionParser {
    /// `aliases` maps extra header spellings to canonical names (e.g. `HPI` to History of
    /// Present Illness).
    pub fn with_aliases(aliases: &[(String, SectionName)]) -> Self {
        let mut lookup: Vec<(String, SectionName)> = SectionName::ALL
            .iter()
            .map(|n| (n.as_str().to_lowercase(), *n))
            .collect();
        for (alias, name) in aliases {
            let key = alias.trim().to_lowercase();
            if !key.is_empty() && !lookup.iter().any(|(k, _)| *k == key) {
                lookup.push((key, *name));
            }
        }
        // Longest first so a name never shadows a longer one sharing its prefix.
        lookup.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let alternation = lookup
            .iter()
            .map(|(k, _)| {
                let words: Vec<String> = k.split_whitespace().map(regex::escape).collect();
                format!("({})", words.join(r"[ \t]+"))
            })
            .collect::<Vec<_>>()
            .join("|");
        let pattern = RegexBuilder::new(&format!(r"^[ \t]{{0,3}}(?:{alternation})[ \t]*:"))
            .case_insensitive(true)
            .multi_line(true)
            .build()
            .expect("header grammar compiles");
        Self { pattern, lookup }
    }

    /// Reads an alias table: one `alias: Canonical Name` per line, `#` comments allowed.
    pub fn from_alias_file(path: impl AsRef<Path>) -> Result<Self, AliasError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| AliasError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::with_aliases(&parse_alias_table(&text)?))
    }

    fn resolve(&self, caps: &regex::Captures<'_>) -> SectionName {
        // Group i + 1 belongs to lookup entry i.
        let idx = (1..caps.len())
            .find(|&g| caps.get(g).is_some())
            .expect("one alternative matched");
        self.lookup[idx - 1].1
    }

    pub fn parse(&self, text: &str) -> ParsedSummary {
        let mut headers = Vec::new();
        for caps in self.pattern.captures_iter(text) {
            let whole = caps.get(0).unwrap();
            let name = self.resolve(&caps);
            headers.push((whole.start(), whole.end(), name));
        }
        let first = headers.first().map_or(text.len(), |h| h.0);
        let mut counts: BTreeMap<SectionName, usize> = BTreeMap::new();
        let occurrences = headers
            .iter()
            .enumerate()
            .map(|(i, &(start, end, name))| {
                let body_end = headers.get(i + 1).map_or(text.len(), |h| h.0);
                let occurrence = counts.entry(name).or_insert(0);
                let occ = SectionOccurrence {
                    name,
                    occurrence: *occurrence,
                    header: text[start..end].to_string(),
                    header_span: (start, end),
                    raw_body: text[end..body_end].to_string(),
                    span: (end, body_end),
                };
                *occurrence += 1;
                occ
            })
            .collect();
        ParsedSummary {
            unmatched_prefix: text[..first].to_string(),
            occurrences,
        }
    }
}

pub fn parse_alias_table(text: &str) -> Result<Vec<(String, SectionName)>, AliasError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (alias, target) = line.split_once(':').ok_or_else(|| AliasError::Syntax {
            line: i + 1,
            message: "expected `alias: Canonical Name`".into(),
        })?;
        let name = target.parse::<SectionName>().map_err(|e| AliasError::Syntax {
            line: i + 1,
            message: e.to_string(),
        })?;
        if alias.trim().is_empty() {
            return Err(AliasError::Syntax {
                line: i + 1,
                message: "empty alias".into(),
            });
        }
        out.push((alias.trim().to_string(), name));
    }
    Ok(out)
}

/// Parses with the default (canonical-names-only) grammar.
pub fn parse_summary(text: &str) -> ParsedSummary {
    thread_local! {
        static PARSER: SectionParser = SectionParser::default();
    }
    PARSER.with(|p| p.parse(text))
}

pub fn extract_section(parsed: &ParsedSummary, name: SectionName) -> Option<&str> {
    parsed.all(name).next().map(SectionOccurrence::body)
}

/// Non-target sections present in the parse, first occurrence each, in canonical order.
pub fn input_bundle(parsed: &ParsedSummary) -> Vec<(SectionName, String)> {
    let view = parsed.sections();
    SectionName::inputs()
        .filter_map(|n| view.get(&n).map(|body| (n, body.to_string())))
        .collect()
}

/// Presence fraction of each section per split; `None` where a split has no records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageTable {
    pub rows: Vec<(SectionName, [Option<f64>; 4])>,
    pub split_sizes: [usize; 4],
}

impl CoverageTable {
    pub fn fraction(&self, name: SectionName, split: Split) -> Option<f64> {
        let col = Split::ALL.iter().position(|&s| s == split).unwrap();
        self.rows.iter().find(|(n, _)| *n == name).and_then(|(_, f)| f[col])
    }

    pub fn write_csv(&self, out: impl Write) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["Section", "train", "valid", "test (phase 1)", "test (phase 2)"])?;
        for (name, fractions) in &self.rows {
            let mut row = vec![name.as_str().to_string()];
            row.extend(fractions.iter().map(|f| f.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()
    }
}

/// Published per-section presence fractions on the training split.
pub const SHARED_TASK_TRAIN_COVERAGE: [(SectionName, f64); 16] = [
    (SectionName::Allergies, 0.999941669),
    (SectionName::ChiefComplaint, 0.999956252),
    (SectionName::MajorSurgicalOrInvasiveProcedure, 0.518607636),
    (SectionName::HistoryOfPresentIllness, 0.980386152),
    (SectionName::PastMedicalHistory, 0.960203576),
    (SectionName::SocialHistory, 0.97414472),
    (SectionName::FamilyHistory, 0.967567883),
    (SectionName::PhysicalExam, 0.978315397),
    (SectionName::PertinentResults, 0.981231954),
    (SectionName::BriefHospitalCourse, 1.0),
    (SectionName::MedicationsOnAdmission, 0.939787675),
    (SectionName::DischargeMedications, 0.980590311),
    (SectionName::DischargeDisposition, 0.989121241),
    (SectionName::DischargeDiagnosis, 0.991950302),
    (SectionName::DischargeCondition, 0.999970834),
    (SectionName::DischargeInstructions, 1.0),
];

pub fn coverage_stats(corpus: &Corpus) -> CoverageTable {
    coverage_with(corpus, &SectionParser::default())
}

pub fn coverage_with(corpus: &Corpus, parser: &SectionParser) -> CoverageTable {
    let mut hits = [[0usize; 4]; 16];
    let mut sizes = [0usize; 4];
    for record in corpus.records() {
        let col = Split::ALL.iter().position(|&s| s == record.split).unwrap();
        sizes[col] += 1;
        let parsed = parser.parse(&record.text);
        for name in SectionName::ALL {
            if parsed.contains(name) {
                hits[name.rank()][col] += 1;
            }
        }
    }
    let rows = SectionName::ALL
        .iter()
        .map(|&name| {
            let mut f = [None; 4];
            for col in 0..4 {
                if sizes[col] > 0 {
                    f[col] = Some(hits[name.rank()][col] as f64 / sizes[col] as f64);
                }
            }
            (name, f)
        })
        .collect();
    CoverageTable {
        rows,
        split_sizes: sizes,
    }
}
