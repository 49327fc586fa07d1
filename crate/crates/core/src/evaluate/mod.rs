//! Scoring of generated sections against references.
//!
//! ROUGE-1/2/L (F1), BLEU-4 and METEOR are computed here over a shared tokenizer. BERTScore,
//! AlignScore and MEDCON come from external adapters and are simply absent when no adapter is
//! configured. The Overall figure averages each metric over the two tasks, then averages the
//! metrics that are present.

mod external;
mod lexical;
mod tokenize;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{external_score, score_all, AdapterConfig, AdapterError, AdapterSpec, ScorePair};
pub use lexical::{
    align, bleu4, brevity_penalty, corpus_bleu, count_chunks, lcs_len, meteor, meteor_detail, meteor_from_alignment,
    rouge_l, rouge_n, BleuStats, MeteorDetail, Prf, BLEU_EPSILON, BLEU_MAX_ORDER,
};
pub use tokenize::TokenSeq;

use crate::prompt::GenerationTask;

/// Reported metrics, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "R-1")]
    Rouge1,
    #[serde(rename = "R-2")]
    Rouge2,
    #[serde(rename = "R-L")]
    RougeL,
    #[serde(rename = "BLEU")]
    Bleu,
    #[serde(rename = "BERTScore")]
    BertScore,
    #[serde(rename = "Meteor")]
    Meteor,
    #[serde(rename = "AlignScore")]
    AlignScore,
    #[serde(rename = "MEDCON")]
    Medcon,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Rouge1,
        Metric::Rouge2,
        Metric::RougeL,
        Metric::Bleu,
        Metric::BertScore,
        Metric::Meteor,
        Metric::AlignScore,
        Metric::Medcon,
    ];
    pub const LEXICAL: [Metric; 5] = [Metric::Rouge1, Metric::Rouge2, Metric::RougeL, Metric::Bleu, Metric::Meteor];
    pub const EXTERNAL: [Metric; 3] = [Metric::BertScore, Metric::AlignScore, Metric::Medcon];

    /// Column header.
    pub fn column(self) -> &'static str {
        match self {
            Metric::Rouge1 => "R-1",
            Metric::Rouge2 => "R-2",
            Metric::RougeL => "R-L",
            Metric::Bleu => "BLEU",
            Metric::BertScore => "BERTScore",
            Metric::Meteor => "Meteor",
            Metric::AlignScore => "AlignScore",
            Metric::Medcon => "MEDCON",
        }
    }

    /// Lowercase identifier used in adapter requests and config keys.
    pub fn key(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge1",
            Metric::Rouge2 => "rouge2",
            Metric::RougeL => "rougel",
            Metric::Bleu => "bleu",
            Metric::BertScore => "bertscore",
            Metric::Meteor => "meteor",
            Metric::AlignScore => "alignscore",
            Metric::Medcon => "medcon",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.key().eq_ignore_ascii_case(s) || m.column().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// Lexical scores of one candidate against one reference.
pub fn lexical_scores(candidate: &str, reference: &str) -> BTreeMap<Metric, f64> {
    let c = TokenSeq::from_text(candidate);
    let r = TokenSeq::from_text(reference);
    BTreeMap::from([
        (Metric::Rouge1, rouge_n(&c, &r, 1).f1),
        (Metric::Rouge2, rouge_n(&c, &r, 2).f1),
        (Metric::RougeL, rouge_l(&c, &r).f1),
        (Metric::Bleu, bleu4(&c, std::slice::from_ref(&r))),
        (Metric::Meteor, meteor(&c, &r)),
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub hadm_id: String,
    pub task: GenerationTask,
    pub candidate: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub hadm_id: String,
    pub task: GenerationTask,
    pub scores: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Native,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleScores>,
    /// Per-task mean of each present metric.
    pub aggregates: BTreeMap<GenerationTask, BTreeMap<Metric, f64>>,
    pub sources: BTreeMap<Metric, ScoreSource>,
    /// Metrics left out, with the reason.
    pub absent: BTreeMap<Metric, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub value: f64,
    /// Task-averaged value of each metric that entered the mean.
    pub per_metric: BTreeMap<Metric, f64>,
    pub complete: bool,
    pub note: String,
}

/// Average each metric over the tasks that report it, then average across metrics.
pub fn overall(report: &MetricReport) -> Option<Overall> {
    let mut per_metric = BTreeMap::new();
    for metric in Metric::ALL {
        let values: Vec<f64> = report
            .aggregates
            .values()
            .filter_map(|m| m.get(&metric).copied())
            .collect();
        if !values.is_empty() {
            per_metric.insert(metric, values.iter().sum::<f64>() / values.len() as f64);
        }
    }
    if per_metric.is_empty() {
        return None;
    }
    let value = per_metric.values().sum::<f64>() / per_metric.len() as f64;
    let tasks_complete = GenerationTask::ALL
        .iter()
        .all(|t| report.aggregates.get(t).is_some_and(|m| m.len() == Metric::ALL.len()));
    let complete = per_metric.len() == Metric::ALL.len() && tasks_complete;
    let note = if complete {
        "mean of 8 metrics, each averaged over BHC and DI".to_string()
    } else {
        let missing: Vec<&str> = Metric::ALL
            .iter()
            .filter(|m| !per_metric.contains_key(m))
            .map(|m| m.column())
            .collect();
        let tasks: Vec<&str> = report.aggregates.keys().map(|t| t.as_str()).collect();
        format!(
            "partial coverage: mean of {} metric(s) over task(s) [{}]; missing [{}]",
            per_metric.len(),
            tasks.join(", "),
            missing.join(", ")
        )
    };
    Some(Overall {
        value,
        per_metric,
        complete,
        note,
    })
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("empty input")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Scores every pair natively and through whichever adapters are available.
pub fn evaluate(pairs: &[EvalPair], adapters: &AdapterConfig) -> Result<MetricReport, EvalError> {
    let mut samples: Vec<SampleScores> = pairs
        .iter()
        .map(|p| SampleScores {
            hadm_id: p.hadm_id.clone(),
            task: p.task,
            scores: lexical_scores(&p.candidate, &p.reference),
        })
        .collect();
    let mut sources: BTreeMap<Metric, ScoreSource> =
        Metric::LEXICAL.iter().map(|&m| (m, ScoreSource::Native)).collect();

    let score_pairs: Vec<ScorePair> = pairs
        .iter()
        .map(|p| ScorePair {
            id: format!("{}:{}", p.hadm_id, p.task),
            candidate: p.candidate.clone(),
            reference: p.reference.clone(),
        })
        .collect();
    let (external, missing) = score_all(&score_pairs, adapters)?;
    for (metric, values) in external {
        for (sample, v) in samples.iter_mut().zip(values) {
            sample.scores.insert(metric, v);
        }
        sources.insert(metric, ScoreSource::Adapter);
    }

    let mut sums: BTreeMap<GenerationTask, BTreeMap<Metric, (f64, usize)>> = BTreeMap::new();
    for s in &samples {
        let task = sums.entry(s.task).or_default();
        for (&m, &v) in &s.scores {
            let e = task.entry(m).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let aggregates = sums
        .into_iter()
        .map(|(t, m)| (t, m.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()))
        .collect();
    Ok(MetricReport {
        samples,
        aggregates,
        sources,
        absent: missing.into_iter().collect(),
    })
}

impl MetricReport {
    /// Per-sample CSV: `hadm_id,task` then one column per metric; absent metrics stay blank.
    pub fn write_samples_csv(&self, out: impl Write) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["hadm_id".to_string(), "task".to_string()];
        header.extend(Metric::ALL.iter().map(|m| m.column().to_string()));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.hadm_id.clone(), s.task.to_string()];
            row.extend(
                Metric::ALL
                    .iter()
                    .map(|m| s.scores.get(m).map(|v| format!("{v:.6}")).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        w.flush()
    }

    pub fn aggregate_json(&self) -> serde_json::Value {
        let tasks: serde_json::Map<String, serde_json::Value> = self
            .aggregates
            .iter()
            .map(|(t, m)| {
                let metrics: serde_json::Map<String, serde_json::Value> =
                    m.iter().map(|(k, v)| (k.column().to_string(), (*v).into())).collect();
                (t.to_string(), metrics.into())
            })
            .collect();
        let overall = overall(self);
        serde_json::json!({
            "columns": Metric::ALL.iter().map(|m| m.column()).collect::<Vec<_>>(),
            "tasks": tasks,
            "sources": self.sources.iter().map(|(k, v)| (k.column().to_string(), serde_json::to_value(v).unwrap())).collect::<serde_json::Map<_, _>>(),
            "absent": self.absent.iter().map(|(k, v)| (k.column().to_string(), serde_json::Value::from(v.clone()))).collect::<serde_json::Map<_, _>>(),
            "overall": overall.as_ref().map(|o| o.value),
            "overall_complete": overall.as_ref().map(|o| o.complete),
            "overall_note": overall.as_ref().map(|o| o.note.clone()),
            "overall_definition": "mean over metrics of the BHC/DI average of each metric",
        })
    }
}

/// Word-count summary: lower median for even counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthStats {
    pub min: usize,
    pub median: usize,
    pub mean: f64,
    pub max: usize,
    pub count: usize,
}

pub fn length_stats<S: AsRef<str>>(texts: &[S]) -> Result<LengthStats, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts: Vec<usize> = texts.iter().map(|t| t.as_ref().split_whitespace().count()).collect();
    counts.sort_unstable();
    let n = counts.len();
    Ok(LengthStats {
        min: counts[0],
        median: counts[(n - 1) / 2],
        mean: counts.iter().sum::<usize>() as f64 / n as f64,
        max: counts[n - 1],
        count: n,
    })
}

/// `(bin start, bin end exclusive, count)` over word counts, bins of `width` words from 0.
pub fn length_histogram<S: AsRef<str>>(texts: &[S], width: usize) -> Vec<(usize, usize, usize)> {
    assert!(width > 0, "bin width must be positive");
    let counts: Vec<usize> = texts.iter().map(|t| t.as_ref().split_whitespace().count()).collect();
    let Some(&max) = counts.iter().max() else {
        return Vec::new();
    };
    let mut bins = vec![0usize; max / width + 1];
    for c in counts {
        bins[c / width] += 1;
    }
    bins.into_iter()
        .enumerate()
        .map(|(i, n)| (i * width, (i + 1) * width, n))
        .collect()
}

pub fn write_histogram_csv(bins: &[(usize, usize, usize)], out: impl Write) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_start", "bin_end", "count"])?;
    for (a, b, n) in bins {
        w.write_record([a.to_string(), b.to_string(), n.to_string()])?;
    }
    w.flush()
}

/// Published reference-length statistics of the phase-2 test set: (min, median, mean, max).
pub const PHASE2_BHC_LENGTHS: (usize, usize, usize, usize) = (22, 367, 425, 2439);
pub const PHASE2_DI_LENGTHS: (usize, usize, usize, usize) = (10, 153, 201, 2900);

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_report(values: &[f64; 8]) -> MetricReport {
        let row: BTreeMap<Metric, f64> = Metric::ALL.iter().copied().zip(values.iter().copied()).collect();
        MetricReport {
            aggregates: BTreeMap::from([(GenerationTask::Bhc, row.clone()), (GenerationTask::Di, row)]),
            ..MetricReport::default()
        }
    }

    #[test]
    fn overall_of_constant_report() {
        let o = overall(&uniform_report(&[0.4; 8])).unwrap();
        assert!((o.value - 0.4).abs() < 1e-12);
        assert!(o.complete);
    }

    #[test]
    fn overall_with_missing_metrics_is_flagged() {
        let pairs = vec![EvalPair {
            hadm_id: "1".into(),
            task: GenerationTask::Bhc,
            candidate: "the cat sat".into(),
            reference: "the cat sat".into(),
        }];
        let report = evaluate(&pairs, &AdapterConfig::default()).unwrap();
        assert_eq!(report.absent.len(), 3);
        let o = overall(&report).unwrap();
        assert!(!o.complete);
        assert_eq!(o.per_metric.len(), 5);
        assert!(o.note.contains("BERTScore"));
        assert!(overall(&MetricReport::default()).is_none());
    }

    #[test]
    fn length_examples() {
        let s = length_stats(&["a b", "a b c d"]).unwrap();
        assert_eq!((s.min, s.median, s.max), (2, 2, 4));
        assert_eq!(s.mean, 3.0);
        assert!(matches!(length_stats::<&str>(&[]), Err(EvalError::Empty)));
        let h = length_histogram(&["a b", "a b c d", "a"], 2);
        assert_eq!(h, vec![(0, 2, 1), (2, 4, 1), (4, 6, 1)]);
    }

    #[test]
    fn csv_columns_follow_report_layout() {
        let pairs = vec![EvalPair {
            hadm_id: "7".into(),
            task: GenerationTask::Di,
            candidate: "a b".into(),
            reference: "a b".into(),
        }];
        let report = evaluate(&pairs, &AdapterConfig::default()).unwrap();
        let mut buf = Vec::new();
        report.write_samples_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "hadm_id,task,R-1,R-2,R-L,BLEU,BERTScore,Meteor,AlignScore,MEDCON");
        assert_eq!(lines.next().unwrap(), "7,di,1.000000,1.000000,1.000000,1.000000,,0.937500,,");
        let json = report.aggregate_json();
        assert_eq!(json["tasks"]["di"]["R-1"], 1.0);
    }
}
