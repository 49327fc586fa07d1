//! Ingestion of discharge summaries and radiology reports.
//!
//! Discharge files are RFC-4180 CSV (`hadm_id,text[,brief_hospital_course,discharge_instructions]`)
//! and radiology files are CSV (`note_id,hadm_id,text`). Files ending in `.jsonl` are read as one
//! JSON object per line with the same field names. A trailing `.gz` is decompressed transparently.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: duplicate {key}: {}", ids.join(", "))]
    DuplicateKey {
        path: PathBuf,
        key: &'static str,
        ids: Vec<String>,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("unknown split `{0}` (expected train, valid, test_phase1 or test_phase2)")]
    UnknownSplit(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    TestPhase1,
    TestPhase2,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::TestPhase1, Split::TestPhase2];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestPhase1 => "test_phase1",
            Split::TestPhase2 => "test_phase2",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test_phase1" | "test1" | "phase1" => Ok(Split::TestPhase1),
            "test_phase2" | "test2" | "phase2" => Ok(Split::TestPhase2),
            _ => Err(CorpusError::UnknownSplit(s.to_string())),
        }
    }
}

/// One hospital admission with its discharge summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DischargeRecord {
    pub hadm_id: String,
    pub text: String,
    pub reference_bhc: Option<String>,
    pub reference_di: Option<String>,
    pub split: Split,
}

impl DischargeRecord {
    pub fn new(hadm_id: impl Into<String>, text: impl Into<String>, split: Split) -> Self {
        Self {
            hadm_id: hadm_id.into(),
            text: text.into(),
            reference_bhc: None,
            reference_di: None,
            split,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadiologyReport {
    pub note_id: String,
    pub hadm_id: String,
    pub text: String,
}

/// Per-file ingestion statistics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub rows: usize,
    /// Number of invalid UTF-8 sequences replaced with U+FFFD.
    pub replacements: usize,
}

/// Immutable collection of admissions plus their radiology reports.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    records: Vec<DischargeRecord>,
    reports: BTreeMap<String, Vec<RadiologyReport>>,
    orphaned: BTreeSet<String>,
}

impl Corpus {
    /// Builds a corpus, sorting records by `hadm_id` and reports by `note_id`.
    pub fn new(mut records: Vec<DischargeRecord>, reports: Vec<RadiologyReport>) -> Result<Self> {
        records.sort_by(|a, b| a.hadm_id.cmp(&b.hadm_id));
        let dups = duplicates(records.iter().map(|r| r.hadm_id.as_str()));
        if !dups.is_empty() {
            return Err(CorpusError::DuplicateKey {
                path: PathBuf::from("<corpus>"),
                key: "hadm_id",
                ids: dups,
            });
        }
        let index = index_reports(reports);
        let known: BTreeSet<&str> = records.iter().map(|r| r.hadm_id.as_str()).collect();
        let orphaned = index
            .keys()
            .filter(|k| !known.contains(k.as_str()))
            .cloned()
            .collect();
        Ok(Self {
            records,
            reports: index,
            orphaned,
        })
    }

    pub fn records(&self) -> &[DischargeRecord] {
        &self.records
    }

    pub fn reports_for(&self, hadm_id: &str) -> &[RadiologyReport] {
        self.reports.get(hadm_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn report_index(&self) -> &BTreeMap<String, Vec<RadiologyReport>> {
        &self.reports
    }

    /// Admission ids referenced by radiology reports but absent from the records.
    pub fn orphaned(&self) -> impl Iterator<Item = &str> {
        self.orphaned.iter().map(String::as_str)
    }

    pub fn is_orphaned(&self, hadm_id: &str) -> bool {
        self.orphaned.contains(hadm_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &DischargeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Record counts per split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test_phase1: usize,
    pub test_phase2: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::TestPhase1 => self.test_phase1,
            Split::TestPhase2 => self.test_phase2,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.valid + self.test_phase1 + self.test_phase2
    }
}

/// Split sizes of the full shared-task release.
pub const SHARED_TASK_SPLITS: SplitCounts = SplitCounts {
    train: 68_785,
    valid: 14_719,
    test_phase1: 14_702,
    test_phase2: 10_962,
};

pub fn split_summary(corpus: &Corpus) -> SplitCounts {
    let mut counts = SplitCounts::default();
    for r in corpus.records() {
        match r.split {
            Split::Train => counts.train += 1,
            Split::Valid => counts.valid += 1,
            Split::TestPhase1 => counts.test_phase1 += 1,
            Split::TestPhase2 => counts.test_phase2 += 1,
        }
    }
    counts
}

fn duplicates<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            dups.insert(id.to_string());
        }
    }
    dups.into_iter().collect()
}

fn index_reports(reports: Vec<RadiologyReport>) -> BTreeMap<String, Vec<RadiologyReport>> {
    let mut index: BTreeMap<String, Vec<RadiologyReport>> = BTreeMap::new();
    for r in reports {
        index.entry(r.hadm_id.clone()).or_default().push(r);
    }
    for list in index.values_mut() {
        list.sort_by(|a, b| a.note_id.cmp(&b.note_id));
    }
    index
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    Ok(if is_gz {
        Box::new(MultiGzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

fn is_jsonl(path: &Path) -> bool {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let name = name.strip_suffix(".gz").unwrap_or(&name);
    name.ends_with(".jsonl") || name.ends_with(".ndjson")
}

/// Decodes bytes as UTF-8, replacing invalid sequences and counting them.
fn decode(bytes: &[u8], replacements: &mut usize) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => {
            let mut out = String::with_capacity(bytes.len());
            for chunk in bytes.utf8_chunks() {
                out.push_str(chunk.valid());
                if !chunk.invalid().is_empty() {
                    out.push('\u{FFFD}');
                    *replacements += 1;
                }
            }
            out
        }
    }
}

/// Generic row source: a header-indexed table of decoded string cells.
struct Table {
    columns: Vec<String>,
    rows: Vec<(u64, Vec<Option<String>>)>,
    stats: IngestStats,
}

impl Table {
    fn column(&self, name: &str, path: &Path) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CorpusError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    }

    fn optional_column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

fn read_csv_table(reader: impl Read, path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let malformed = |e: csv::Error| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        CorpusError::Malformed {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        }
    };
    let mut stats = IngestStats::default();
    let headers = rdr.byte_headers().map_err(malformed)?.clone();
    let columns = headers
        .iter()
        .map(|h| decode(h, &mut stats.replacements).trim().to_string())
        .collect();
    let mut rows = Vec::new();
    let mut record = csv::ByteRecord::new();
    loop {
        let more = rdr.read_byte_record(&mut record).map_err(malformed)?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cells = record
            .iter()
            .map(|cell| Some(decode(cell, &mut stats.replacements)))
            .collect();
        rows.push((line, cells));
    }
    stats.rows = rows.len();
    Ok(Table {
        columns,
        rows,
        stats,
    })
}

fn read_jsonl_table(reader: impl Read, path: &Path, wanted: &[&str]) -> Result<Table> {
    let mut stats = IngestStats::default();
    let mut rows = Vec::new();
    let mut buf = Vec::new();
    let mut reader = BufReader::new(reader);
    let mut line_no = 0u64;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = decode(&buf, &mut stats.replacements);
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        let cells: Vec<Option<String>> = wanted
            .iter()
            .map(|k| match value.get(*k) {
                Some(serde_json::Value::String(s)) => Some(s.clone()),
                Some(serde_json::Value::Null) | None => None,
                Some(other) => Some(other.to_string()),
            })
            .collect();
        rows.push((line_no, cells));
    }
    stats.rows = rows.len();
    // A field counts as a column when any row carries it; an empty file has every column.
    let present: Vec<bool> = wanted
        .iter()
        .enumerate()
        .map(|(i, _)| rows.is_empty() || rows.iter().any(|(_, cells)| cells[i].is_some()))
        .collect();
    let columns = wanted
        .iter()
        .zip(&present)
        .filter(|(_, p)| **p)
        .map(|(k, _)| k.to_string())
        .collect();
    let rows = rows
        .into_iter()
        .map(|(line, cells)| {
            let kept = cells
                .into_iter()
                .zip(&present)
                .filter(|(_, p)| **p)
                .map(|(c, _)| c)
                .collect();
            (line, kept)
        })
        .collect();
    Ok(Table {
        columns,
        rows,
        stats,
    })
}

fn read_table(reader: impl Read, path: &Path, wanted: &[&str]) -> Result<Table> {
    let table = if is_jsonl(path) {
        read_jsonl_table(reader, path, wanted)?
    } else {
        read_csv_table(reader, path)?
    };
    if table.stats.replacements > 0 {
        log::warn!(
            "{}: replaced {} invalid UTF-8 sequence(s)",
            path.display(),
            table.stats.replacements
        );
    }
    Ok(table)
}

fn nonempty(cell: Option<&Option<String>>) -> Option<String> {
    cell.and_then(|c| c.clone()).filter(|s| !s.trim().is_empty())
}

fn cell(row: &[Option<String>], idx: usize) -> String {
    row.get(idx).cloned().flatten().unwrap_or_default()
}

/// Reads discharge records from any reader; `path` is used for format detection and messages.
pub fn read_discharge(
    reader: impl Read,
    path: &Path,
    split: Split,
) -> Result<(Vec<DischargeRecord>, IngestStats)> {
    const FIELDS: [&str; 4] = ["hadm_id", "text", "brief_hospital_course", "discharge_instructions"];
    let table = read_table(reader, path, &FIELDS)?;
    let id = table.column("hadm_id", path)?;
    let text = table.column("text", path)?;
    let bhc = table.optional_column("brief_hospital_course");
    let di = table.optional_column("discharge_instructions");
    let mut records = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let hadm_id = cell(row, id).trim().to_string();
        if hadm_id.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: *line,
                message: "empty hadm_id".into(),
            });
        }
        let body = cell(row, text);
        if body.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: *line,
                message: format!("empty text for hadm_id {hadm_id}"),
            });
        }
        records.push(DischargeRecord {
            hadm_id,
            text: body,
            reference_bhc: bhc.and_then(|i| nonempty(row.get(i))),
            reference_di: di.and_then(|i| nonempty(row.get(i))),
            split,
        });
    }
    let dups = duplicates(records.iter().map(|r| r.hadm_id.as_str()));
    if !dups.is_empty() {
        return Err(CorpusError::DuplicateKey {
            path: path.to_path_buf(),
            key: "hadm_id",
            ids: dups,
        });
    }
    records.sort_by(|a, b| a.hadm_id.cmp(&b.hadm_id));
    Ok((records, table.stats))
}

pub fn load_discharge(path: impl AsRef<Path>, split: Split) -> Result<Vec<DischargeRecord>> {
    let path = path.as_ref();
    read_discharge(open(path)?, path, split).map(|(records, _)| records)
}

pub fn read_radiology(reader: impl Read, path: &Path) -> Result<(Vec<RadiologyReport>, IngestStats)> {
    const FIELDS: [&str; 3] = ["note_id", "hadm_id", "text"];
    let table = read_table(reader, path, &FIELDS)?;
    let note = table.column("note_id", path)?;
    let id = table.column("hadm_id", path)?;
    let text = table.column("text", path)?;
    let mut reports = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let note_id = cell(row, note).trim().to_string();
        if note_id.is_empty() {
            return Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                line: *line,
                message: "empty note_id".into(),
            });
        }
        reports.push(RadiologyReport {
            note_id,
            hadm_id: cell(row, id).trim().to_string(),
            text: cell(row, text),
        });
    }
    let dups = duplicates(reports.iter().map(|r| r.note_id.as_str()));
    if !dups.is_empty() {
        return Err(CorpusError::DuplicateKey {
            path: path.to_path_buf(),
            key: "note_id",
            ids: dups,
        });
    }
    reports.sort_by(|a, b| (&a.hadm_id, &a.note_id).cmp(&(&b.hadm_id, &b.note_id)));
    Ok((reports, table.stats))
}

/// Loads radiology reports sorted by `(hadm_id, note_id)`.
pub fn load_radiology(path: impl AsRef<Path>) -> Result<Vec<RadiologyReport>> {
    let path = path.as_ref();
    read_radiology(open(path)?, path).map(|(reports, _)| reports)
}

/// Groups reports by admission, each list ordered by `note_id`.
pub fn index_by_admission(reports: Vec<RadiologyReport>) -> BTreeMap<String, Vec<RadiologyReport>> {
    index_reports(reports)
}

pub fn write_discharge_csv(records: &[DischargeRecord], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["hadm_id", "text", "brief_hospital_course", "discharge_instructions"])?;
    for r in records {
        w.write_record([
            r.hadm_id.as_str(),
            r.text.as_str(),
            r.reference_bhc.as_deref().unwrap_or(""),
            r.reference_di.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()
}

pub fn write_radiology_csv(reports: &[RadiologyReport], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["note_id", "hadm_id", "text"])?;
    for r in reports {
        w.write_record([r.note_id.as_str(), r.hadm_id.as_str(), r.text.as_str()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(name: &str) -> PathBuf {
        PathBuf::from(name)
    }

    #[test]
    fn two_rows_sorted_by_id() {
        let data = "hadm_id,text\n200,second\n100,first\n";
        let (records, stats) = read_discharge(data.as_bytes(), &p("d.csv"), Split::Train).unwrap();
        assert_eq!(stats.rows, 2);
        assert_eq!(records[0].hadm_id, "100");
        assert_eq!(records[1].text, "second");
    }

    #[test]
    fn quoted_newlines_preserved() {
        let text = "Chief Complaint:\r\n\"cough\"\n\nAllergies: ___\n";
        let rec = DischargeRecord::new("1", text, Split::Valid);
        let mut buf = Vec::new();
        write_discharge_csv(std::slice::from_ref(&rec), &mut buf).unwrap();
        let (back, _) = read_discharge(buf.as_slice(), &p("d.csv"), Split::Valid).unwrap();
        assert_eq!(back[0].text.as_bytes(), text.as_bytes());
    }

    #[test]
    fn missing_text_column() {
        let err = read_discharge("hadm_id,body\n1,x\n".as_bytes(), &p("d.csv"), Split::Train).unwrap_err();
        match err {
            CorpusError::MissingColumn { column, .. } => assert_eq!(column, "text"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_hadm_ids_listed() {
        let data = "hadm_id,text\n1,a\n2,b\n1,c\n2,d\n";
        let err = read_discharge(data.as_bytes(), &p("d.csv"), Split::Train).unwrap_err();
        match err {
            CorpusError::DuplicateKey { ids, key, .. } => {
                assert_eq!(key, "hadm_id");
                assert_eq!(ids, vec!["1", "2"]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn radiology_grouping() {
        let data = "note_id,hadm_id,text\nr3,A,x\nr1,A,y\nr2,B,z\n";
        let (reports, _) = read_radiology(data.as_bytes(), &p("r.csv")).unwrap();
        let index = index_by_admission(reports);
        assert_eq!(index.len(), 2);
        assert_eq!(index["A"].len(), 2);
        assert_eq!(index["A"][0].note_id, "r1");
        assert_eq!(index["B"].len(), 1);
    }

    #[test]
    fn radiology_header_only() {
        let (reports, _) = read_radiology("note_id,hadm_id,text\n".as_bytes(), &p("r.csv")).unwrap();
        assert!(index_by_admission(reports).is_empty());
    }

    #[test]
    fn radiology_duplicate_note() {
        let data = "note_id,hadm_id,text\nr1,A,x\nr1,B,y\n";
        assert!(matches!(
            read_radiology(data.as_bytes(), &p("r.csv")),
            Err(CorpusError::DuplicateKey { key: "note_id", .. })
        ));
    }

    #[test]
    fn invalid_utf8_replaced_and_counted() {
        let mut data = b"hadm_id,text\n1,ab".to_vec();
        data.extend_from_slice(&[0xff, 0xfe]);
        data.extend_from_slice(b"cd\n");
        let (records, stats) = read_discharge(data.as_slice(), &p("d.csv"), Split::Train).unwrap();
        assert_eq!(stats.replacements, 2);
        assert_eq!(records[0].text, "ab\u{FFFD}\u{FFFD}cd");
    }

    #[test]
    fn jsonl_fixture_format() {
        let data = "{\"hadm_id\":\"9\",\"text\":\"line1\\nline2\",\"discharge_instructions\":\"Dear Mr. ___\"}\n\n";
        let (records, _) = read_discharge(data.as_bytes(), &p("d.jsonl"), Split::Train).unwrap();
        assert_eq!(records[0].text, "line1\nline2");
        assert_eq!(records[0].reference_di.as_deref(), Some("Dear Mr. ___"));
        assert_eq!(records[0].reference_bhc, None);
        let err = read_discharge("{\"hadm_id\":\"9\"}\n".as_bytes(), &p("d.jsonl"), Split::Train);
        assert!(matches!(err, Err(CorpusError::MissingColumn { .. })));
    }

    #[test]
    fn split_counts() {
        let mut records = Vec::new();
        for i in 0..3 {
            records.push(DischargeRecord::new(format!("t{i}"), "x", Split::Train));
        }
        for i in 0..2 {
            records.push(DischargeRecord::new(format!("v{i}"), "x", Split::Valid));
        }
        let corpus = Corpus::new(records, vec![]).unwrap();
        let counts = split_summary(&corpus);
        assert_eq!(
            counts,
            SplitCounts {
                train: 3,
                valid: 2,
                test_phase1: 0,
                test_phase2: 0
            }
        );
        assert_eq!(split_summary(&Corpus::default()).total(), 0);
        assert_eq!(SHARED_TASK_SPLITS.total(), 109_168);
    }

    #[test]
    fn orphans_flagged_not_rejected() {
        let records = vec![DischargeRecord::new("A", "x", Split::Train)];
        let reports = vec![
            RadiologyReport {
                note_id: "r1".into(),
                hadm_id: "A".into(),
                text: "t".into(),
            },
            RadiologyReport {
                note_id: "r2".into(),
                hadm_id: "Z".into(),
                text: "t".into(),
            },
        ];
        let corpus = Corpus::new(records, reports).unwrap();
        assert_eq!(corpus.orphaned().collect::<Vec<_>>(), vec!["Z"]);
        assert_eq!(corpus.reports_for("A").len(), 1);
        assert!(corpus.reports_for("missing").is_empty());
    }
}
