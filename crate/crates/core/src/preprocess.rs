//! Training-sample selection and instruction-tuning export.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assemble::{reference_target, Assembler};
use crate::corpus::{DischargeRecord, RadiologyReport};
use crate::prompt::{GenerationTask, PromptError, PromptVariant};
use crate::sections::{SectionName, SectionParser};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("need at least 4 lengths for quartiles, got {0}")]
    InsufficientData(usize),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("prompt for {id}: {source}")]
    Prompt {
        id: String,
        #[source]
        source: PromptError,
    },
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// First and third quartiles by linear interpolation between order statistics.
pub fn iqr_bounds(lengths: &[usize]) -> Result<(f64, f64), PreprocessError> {
    if lengths.len() < 4 {
        return Err(PreprocessError::InsufficientData(lengths.len()));
    }
    let mut sorted: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    sorted.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75)))
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    LengthIqr,
    MissingSections,
    TargetFormat,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total_in: usize,
    pub kept: usize,
    pub length_iqr: usize,
    pub missing_sections: usize,
    pub target_format: usize,
}

impl FilterReport {
    pub fn rejected(&self, reason: RejectReason) -> usize {
        match reason {
            RejectReason::LengthIqr => self.length_iqr,
            RejectReason::MissingSections => self.missing_sections,
            RejectReason::TargetFormat => self.target_format,
        }
    }

    pub fn reconciles(&self) -> bool {
        self.kept + self.length_iqr + self.missing_sections + self.target_format == self.total_in
    }

    pub fn to_table(&self) -> String {
        format!(
            "total_in          {:>8}\nkept              {:>8}\nlength_iqr        {:>8}\nmissing_sections  {:>8}\ntarget_format     {:>8}\n",
            self.total_in, self.kept, self.length_iqr, self.missing_sections, self.target_format
        )
    }
}

/// Predicate on reference targets: BHC needs a minimum length, DI must open with a salutation.
#[derive(Debug, Clone)]
pub struct TargetFormat {
    pub bhc_min_words: usize,
    pub di_pattern: Regex,
}

impl Default for TargetFormat {
    fn default() -> Self {
        Self {
            bhc_min_words: 20,
            di_pattern: Regex::new(r"^Dear\b").unwrap(),
        }
    }
}

impl TargetFormat {
    pub fn accepts(&self, task: GenerationTask, target: &str) -> bool {
        let target = target.trim();
        if target.is_empty() {
            return false;
        }
        match task {
            GenerationTask::Bhc => word_count(target) >= self.bhc_min_words,
            GenerationTask::Di => self.di_pattern.is_match(target),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelectionRules {
    pub required_sections: BTreeSet<SectionName>,
    pub target_format: TargetFormat,
    pub parser: SectionParser,
}

impl Default for SelectionRules {
    fn default() -> Self {
        Self {
            required_sections: SectionName::inputs().collect(),
            target_format: TargetFormat::default(),
            parser: SectionParser::default(),
        }
    }
}

impl SelectionRules {
    pub fn with_required(required: impl IntoIterator<Item = SectionName>) -> Self {
        Self {
            required_sections: required.into_iter().collect(),
            ..Self::default()
        }
    }
}

/// Keeps records within the length IQR, with every required section and a well-formed target.
///
/// Rejections are attributed to the first failing rule in that order. Fewer than four records
/// leaves the length rule inactive.
pub fn select_training(
    records: &[DischargeRecord],
    task: GenerationTask,
    rules: &SelectionRules,
) -> (Vec<DischargeRecord>, FilterReport) {
    let mut report = FilterReport {
        total_in: records.len(),
        ..FilterReport::default()
    };
    let lengths: Vec<usize> = records.iter().map(|r| word_count(&r.text)).collect();
    let bounds = iqr_bounds(&lengths).ok();
    let mut kept = Vec::new();
    for (record, &len) in records.iter().zip(&lengths) {
        if let Some((q1, q3)) = bounds {
            let len = len as f64;
            if len < q1 || len > q3 {
                report.length_iqr += 1;
                continue;
            }
        }
        let parsed = rules.parser.parse(&record.text);
        if !rules.required_sections.iter().all(|&s| parsed.contains(s)) {
            report.missing_sections += 1;
            continue;
        }
        let target = reference_target(record, &parsed, task).unwrap_or_default();
        if !rules.target_format.accepts(task, &target) {
            report.target_format += 1;
            continue;
        }
        kept.push(record.clone());
    }
    report.kept = kept.len();
    (kept, report)
}

/// LoRA settings recorded for an external fine-tuning run; nothing here trains a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfigStub {
    pub base_model_name: String,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub learning_rate: f64,
    pub per_device_batch: u32,
    pub comment: String,
}

impl Default for TrainingConfigStub {
    fn default() -> Self {
        Self {
            base_model_name: "mistral".into(),
            lora_rank: 128,
            lora_alpha: 64,
            learning_rate: 2e-4,
            per_device_batch: 1,
            comment: "hand-off for an external LoRA trainer".into(),
        }
    }
}

impl TrainingConfigStub {
    pub fn render(&self, task: GenerationTask, variant: PromptVariant, dataset: &str) -> String {
        format!(
            "# instruction-tuning hand-off; emitted only, never executed\n\
             base_model_name={}\n\
             lora_rank={}\n\
             lora_alpha={}\n\
             learning_rate={:e}\n\
             per_device_batch={}\n\
             task={}\n\
             variant={}\n\
             dataset={}\n\
             comment={}\n",
            self.base_model_name,
            self.lora_rank,
            self.lora_alpha,
            self.learning_rate,
            self.per_device_batch,
            task,
            variant,
            dataset,
            self.comment
        )
    }
}

/// Path of the config stub written next to an exported dataset.
pub fn training_config_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".training.cfg");
    out.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportReport {
    pub written: usize,
    /// Records without a reference target for the task.
    pub skipped: Vec<String>,
}

/// Builds `{id, prompt, completion}` examples in `hadm_id` order.
///
/// DI prompts are conditioned on the reference BHC (teacher forcing).
pub fn training_examples(
    kept: &[DischargeRecord],
    reports_for: impl Fn(&str) -> Vec<RadiologyReport>,
    task: GenerationTask,
    variant: PromptVariant,
    assembler: &Assembler,
) -> Result<(Vec<TrainingExample>, Vec<String>), PreprocessError> {
    let mut sorted: Vec<&DischargeRecord> = kept.iter().collect();
    sorted.sort_by(|a, b| a.hadm_id.cmp(&b.hadm_id));
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for record in sorted {
        let reports = reports_for(&record.hadm_id);
        let prepared = assembler.prepare(record, &reports);
        let Some(completion) = reference_target(record, &prepared.parsed, task) else {
            skipped.push(record.hadm_id.clone());
            continue;
        };
        let prior = match task {
            GenerationTask::Bhc => None,
            GenerationTask::Di => reference_target(record, &prepared.parsed, GenerationTask::Bhc),
        };
        let bundle = assembler
            .prompt(&prepared, task, variant, prior.as_deref())
            .map_err(|source| PreprocessError::Prompt {
                id: record.hadm_id.clone(),
                source,
            });
        let bundle = match bundle {
            Ok(b) => b,
            Err(PreprocessError::Prompt {
                source: PromptError::MissingPriorBhc,
                ..
            }) => {
                skipped.push(record.hadm_id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        examples.push(TrainingExample {
            id: record.hadm_id.clone(),
            prompt: bundle.rendered,
            completion,
        });
    }
    Ok((examples, skipped))
}

pub fn write_jsonl<T: Serialize>(items: &[T], out: impl Write) -> io::Result<()> {
    let mut w = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Writes the dataset as JSONL plus its training-config stub; returns what was written and skipped.
pub fn export_jsonl(
    kept: &[DischargeRecord],
    reports_for: impl Fn(&str) -> Vec<RadiologyReport>,
    task: GenerationTask,
    variant: PromptVariant,
    assembler: &Assembler,
    stub: &TrainingConfigStub,
    out: &Path,
) -> Result<ExportReport, PreprocessError> {
    let (examples, skipped) = training_examples(kept, reports_for, task, variant, assembler)?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PreprocessError::Io { path, source }
    };
    let file = File::create(out).map_err(io_err(out))?;
    write_jsonl(&examples, file).map_err(io_err(out))?;
    let cfg = training_config_path(out);
    let dataset = out.file_name().unwrap_or_default().to_string_lossy();
    std::fs::write(&cfg, stub.render(task, variant, &dataset)).map_err(io_err(&cfg))?;
    if !skipped.is_empty() {
        log::warn!("skipped {} record(s) without a reference {}", skipped.len(), task);
    }
    Ok(ExportReport {
        written: examples.len(),
        skipped,
    })
}
