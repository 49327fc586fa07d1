//! From a discharge record to a rendered prompt.

use crate::corpus::{DischargeRecord, RadiologyReport};
use crate::prompt::{build_prompt, GenerationTask, PromptBundle, PromptError, PromptInput, PromptTemplates, PromptVariant};
use crate::radiology::{apply_substitute, select_reports, substitute, ImpressionMatch, SelectionConfig};
use crate::sections::{extract_section, input_bundle, ParsedSummary, SectionParser};

/// Parser, radiology selection and templates used to turn records into prompts.
#[derive(Debug, Clone, Default)]
pub struct Assembler {
    pub parser: SectionParser,
    pub selection: SelectionConfig,
    pub templates: PromptTemplates,
}

/// A parsed record with its scored radiology reports.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub parsed: ParsedSummary,
    pub matches: Vec<ImpressionMatch>,
}

impl Assembler {
    pub fn prepare(&self, record: &DischargeRecord, reports: &[RadiologyReport]) -> PreparedRecord {
        let parsed = self.parser.parse(&record.text);
        let matches = select_reports(record, &parsed, reports, &self.selection);
        PreparedRecord { parsed, matches }
    }

    pub fn prompt(
        &self,
        prepared: &PreparedRecord,
        task: GenerationTask,
        variant: PromptVariant,
        prior_bhc: Option<&str>,
    ) -> Result<PromptBundle, PromptError> {
        let bundle = input_bundle(&prepared.parsed);
        let sub = substitute(&prepared.parsed, &prepared.matches);
        let (sections, radiology) = apply_substitute(&bundle, &sub);
        build_prompt(
            &PromptInput {
                task,
                variant,
                sections: &sections,
                radiology: &radiology,
                prior_bhc,
            },
            &self.templates,
        )
    }
}

/// Reference text for a target: the explicit column when present, else the section in the summary.
pub fn reference_target(record: &DischargeRecord, parsed: &ParsedSummary, task: GenerationTask) -> Option<String> {
    let explicit = match task {
        GenerationTask::Bhc => record.reference_bhc.as_deref(),
        GenerationTask::Di => record.reference_di.as_deref(),
    };
    explicit
        .or_else(|| extract_section(parsed, task.section()))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}
