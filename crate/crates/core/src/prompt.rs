//! Prompt assembly for the two generation tasks.
//!
//! A prompt is a list of parts joined by a blank line, each part opened by a `### LABEL` line:
//! context, task definition, output structure, guiding questions, then the input payload (and for
//! discharge instructions, the brief hospital course it builds on). The `Base` variant carries the
//! payload alone with no instruction text.

use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radiology::{leading_tokens, ImpressionMatch};
use crate::sections::SectionName;

pub const PART_DELIMITER: &str = "\n\n";
pub const DEFAULT_TOKEN_BUDGET: usize = 8192;
/// Header of the block that stands in for Pertinent Results when impressions are selected.
pub const RADIOLOGY_HEADER: &str = "Radiology Report Impressions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GenerationTask {
    #[serde(rename = "bhc")]
    Bhc,
    #[serde(rename = "di")]
    Di,
}

impl GenerationTask {
    pub const ALL: [GenerationTask; 2] = [GenerationTask::Bhc, GenerationTask::Di];

    pub fn as_str(self) -> &'static str {
        match self {
            GenerationTask::Bhc => "bhc",
            GenerationTask::Di => "di",
        }
    }

    pub fn section(self) -> SectionName {
        match self {
            GenerationTask::Bhc => SectionName::BriefHospitalCourse,
            GenerationTask::Di => SectionName::DischargeInstructions,
        }
    }
}

impl fmt::Display for GenerationTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GenerationTask {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bhc" => Ok(GenerationTask::Bhc),
            "di" => Ok(GenerationTask::Di),
            _ => Err(PromptError::Unknown(format!("task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    Base,
    Context,
    #[serde(rename = "cot")]
    CoT,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] = [PromptVariant::Base, PromptVariant::Context, PromptVariant::CoT];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::Base => "base",
            PromptVariant::Context => "context",
            PromptVariant::CoT => "cot",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(PromptVariant::Base),
            "context" => Ok(PromptVariant::Context),
            "cot" => Ok(PromptVariant::CoT),
            _ => Err(PromptError::Unknown(format!("variant `{s}`"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("discharge instructions prompts need the brief hospital course")]
    MissingPriorBhc,
    #[error("unknown {0}")]
    Unknown(String),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("question file {path}: {message}")]
    Questions { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionGroup {
    pub title: String,
    pub questions: Vec<String>,
}

fn group(title: &str, question: &str) -> QuestionGroup {
    QuestionGroup {
        title: title.to_string(),
        questions: vec![question.to_string()],
    }
}

/// The guiding questionnaire for a task: eight groups, one per output subsection.
pub fn questionnaire(task: GenerationTask) -> Vec<QuestionGroup> {
    match task {
        GenerationTask::Bhc => vec![
            group(
                "Patient Background and Presenting Complaint",
                "What is the patient's background including pre-existing medical conditions, and what symptoms or events led to their current hospital admission?",
            ),
            group(
                "Key Diagnoses and Evaluations",
                "What are the key diagnoses identified during the hospital stay? For each, how was the diagnosis reached, including any significant tests or evaluations conducted?",
            ),
            group(
                "Treatment and Management Strategies",
                "What were the main treatment strategies employed for the patient's conditions during their stay? Include medications adjusted, procedures performed, and any therapeutic interventions.",
            ),
            group(
                "Complications and Additional Diagnoses",
                "Were there any complications or additional diagnoses during the hospital stay? How were these addressed and managed?",
            ),
            group(
                "Progress and Monitoring",
                "How did the patient's condition progress throughout the hospital stay, including any monitoring of symptoms, response to treatments, and adjustments made to the treatment plan?",
            ),
            group(
                "Support and Consultation Services",
                "Which specialist services or support consultations were involved in the patient\u{2019}s care? How did these consultations impact the patient\u{2019}s treatment plan and recovery?",
            ),
            group(
                "Discharge Planning and Instructions",
                "What were the conditions and considerations for the patient\u{2019}s discharge? Include the discharge medications, any changes from previous medication regimens, and follow-up care or lifestyle recommendations.",
            ),
            group(
                "Follow-Up and Post-Discharge Care",
                "What are the specific follow-up care instructions and any scheduled tests or consultations? Highlight the importance of follow-up for managing ongoing conditions or monitoring recovery.",
            ),
        ],
        GenerationTask::Di => vec![
            group(
                "Initial Assessment and Diagnosis",
                "What led to the patient's admission to the hospital, and what were the initial symptoms? Based on the patient's symptoms, what diagnoses were considered and which was confirmed?",
            ),
            group(
                "Treatment and Hospital Stay",
                "What treatments were provided to address the patient's symptoms or condition during the hospital stay? Were any surgeries recommended or performed? If a surgery was recommended but not performed, what were the reasons? What were the outcomes of the treatments or interventions provided?",
            ),
            group(
                "Patient's Decisions and Care Preferences",
                "Did the patient make any specific requests regarding their care, such as refusing a treatment or requesting a transfer? How were these handled? How did the patient's decisions affect their treatment plan and discharge process?",
            ),
            group(
                "Comprehensive Post-Discharge Instructions",
                "What are the general care instructions for the patient after discharge, including diet, activity level, and medication management? Are there any specific symptoms or signs that the patient should monitor for which would require immediate medical attention? How should the patient manage their regular home medications in addition to any new medications prescribed at discharge?",
            ),
            group(
                "Activity and Lifestyle Recommendations",
                "What specific activity restrictions or recommendations are given to ensure a smooth recovery? (e.g., weight lifting limits, mobility advice) Are there any restrictions on driving or operating machinery, especially if the patient is taking new or continued pain medication?",
            ),
            group(
                "Follow-up Care and Monitoring",
                "What follow-up appointments or tests are recommended for the patient? With whom should these appointments be made? How should the patient approach symptom management, especially if they experience pain, dehydration, or other concerning symptoms?",
            ),
            group(
                "Communication with Healthcare Providers",
                "Under what circumstances should the patient immediately contact their healthcare provider or seek emergency care? What is the recommended way for the patient to communicate with their healthcare team (e.g., phone call, hospital return)?",
            ),
            group(
                "Encouragement and Support",
                "How can we encourage the patient to adhere to their discharge instructions and reassure them about their recovery process? What resources or support systems can we recommend to the patient for additional help or information post-discharge?",
            ),
        ],
    }
}

/// Instruction text for one task. Defaults are embedded; a template directory can override any file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTemplate {
    pub context: String,
    pub task_definition: String,
    pub output_structure: String,
    pub questions: Vec<QuestionGroup>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub bhc: TaskTemplate,
    pub di: TaskTemplate,
    pub token_budget: usize,
}

const BHC_CONTEXT: &str = "You are assisting with clinical documentation. The input below comes from the discharge summary of one hospital admission. Its clinical notes are grouped under their original section headers, and radiology report impressions replace the laboratory listing where a matching report was found. Personal identifiers appear as ___.";
const BHC_DEFINITION: &str = "Write the Brief Hospital Course section of this discharge summary. The Brief Hospital Course is read by the clinicians who take over the patient's care. It recounts the critical events of the stay: the reason for admission, the findings, how each problem was treated, and how the patient progressed until discharge. State only what the input supports.";
const BHC_STRUCTURE: &str = "Organize the Brief Hospital Course into the numbered parts below, in this order. Under each part, answer the guiding questions that carry the same number.";
const DI_CONTEXT: &str = "You are assisting with clinical documentation. The input below comes from the discharge summary of one hospital admission. Its clinical notes are grouped under their original section headers, and radiology report impressions replace the laboratory listing where a matching report was found. The Brief Hospital Course written for this admission follows the notes. Personal identifiers appear as ___.";
const DI_DEFINITION: &str = "Write the Discharge Instructions section of this discharge summary. Discharge Instructions are addressed to the patient and their caregivers in plain language. They explain why the patient was in the hospital and what was done, then tell the patient how to look after themselves at home: medications, activity, warning signs and follow-up. Open with a salutation such as \"Dear Mr. ___,\" and state only what the input supports.";
const DI_STRUCTURE: &str = "Organize the Discharge Instructions into the numbered parts below, in this order. Under each part, answer the guiding questions that carry the same number.";

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            bhc: TaskTemplate {
                context: BHC_CONTEXT.into(),
                task_definition: BHC_DEFINITION.into(),
                output_structure: BHC_STRUCTURE.into(),
                questions: questionnaire(GenerationTask::Bhc),
            },
            di: TaskTemplate {
                context: DI_CONTEXT.into(),
                task_definition: DI_DEFINITION.into(),
                output_structure: DI_STRUCTURE.into(),
                questions: questionnaire(GenerationTask::Di),
            },
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }
}

impl PromptTemplates {
    pub fn task(&self, task: GenerationTask) -> &TaskTemplate {
        match task {
            GenerationTask::Bhc => &self.bhc,
            GenerationTask::Di => &self.di,
        }
    }

    /// Overrides defaults with `{bhc,di}_{context,task_definition,output_structure,questions}.txt`
    /// files found in `dir`. Missing files keep the default.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let mut templates = Self::default();
        for task in GenerationTask::ALL {
            let t = match task {
                GenerationTask::Bhc => &mut templates.bhc,
                GenerationTask::Di => &mut templates.di,
            };
            for (part, slot) in [
                ("context", &mut t.context),
                ("task_definition", &mut t.task_definition),
                ("output_structure", &mut t.output_structure),
            ] {
                if let Some(text) = read_optional(&dir.join(format!("{task}_{part}.txt")))? {
                    *slot = text.trim().to_string();
                }
            }
            let qpath = dir.join(format!("{task}_questions.txt"));
            if let Some(text) = read_optional(&qpath)? {
                t.questions = parse_questions(&text).map_err(|message| PromptError::Questions {
                    path: qpath.display().to_string(),
                    message,
                })?;
            }
        }
        Ok(templates)
    }
}

fn read_optional(path: &Path) -> Result<Option<String>, PromptError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(PromptError::Io {
            path: path.display().to_string(),
            source,
        }),
    }
}

/// `# Title` lines open a group; every other non-blank line is a question of that group.
pub fn parse_questions(text: &str) -> Result<Vec<QuestionGroup>, String> {
    let mut groups: Vec<QuestionGroup> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(title) = line.strip_prefix('#') {
            groups.push(QuestionGroup {
                title: title.trim().to_string(),
                questions: Vec::new(),
            });
        } else {
            groups
                .last_mut()
                .ok_or_else(|| format!("line {}: question before the first `# Title`", i + 1))?
                .questions
                .push(line.to_string());
        }
    }
    if groups.is_empty() {
        return Err("no question groups".into());
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Context,
    TaskDefinition,
    OutputStructure,
    Questions,
    Payload,
    PriorBhc,
}

impl PartKind {
    pub fn label(self) -> &'static str {
        match self {
            PartKind::Context => "CONTEXT",
            PartKind::TaskDefinition => "TASK DEFINITION",
            PartKind::OutputStructure => "OUTPUT STRUCTURE",
            PartKind::Questions => "GUIDING QUESTIONS",
            PartKind::Payload => "DISCHARGE SUMMARY",
            PartKind::PriorBhc => "BRIEF HOSPITAL COURSE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPart {
    pub kind: PartKind,
    pub labeled: bool,
    pub body: String,
}

impl PromptPart {
    pub fn render(&self) -> String {
        if self.labeled {
            format!("### {}\n{}", self.kind.label(), self.body)
        } else {
            self.body.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task: GenerationTask,
    pub variant: PromptVariant,
    pub parts: Vec<PromptPart>,
    pub rendered: String,
    pub token_estimate: usize,
    /// Payload blocks shortened or dropped to fit the token budget, in the order they were cut.
    pub truncated: Vec<String>,
}

impl PromptBundle {
    pub fn part(&self, kind: PartKind) -> Option<&PromptPart> {
        self.parts.iter().find(|p| p.kind == kind)
    }

    pub fn is_truncated(&self) -> bool {
        !self.truncated.is_empty()
    }
}

pub fn token_estimate(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Everything a prompt is built from.
#[derive(Debug, Clone, Copy)]
pub struct PromptInput<'a> {
    pub task: GenerationTask,
    pub variant: PromptVariant,
    /// Non-target sections in canonical order.
    pub sections: &'a [(SectionName, String)],
    /// Selected radiology impressions; when nonempty they replace Pertinent Results.
    pub radiology: &'a [ImpressionMatch],
    pub prior_bhc: Option<&'a str>,
}

struct PayloadBlock {
    header: String,
    body: String,
}

impl PayloadBlock {
    fn render(&self) -> String {
        format!("{}:\n{}", self.header, self.body)
    }
}

fn payload_blocks(sections: &[(SectionName, String)], radiology: &[ImpressionMatch]) -> Vec<PayloadBlock> {
    let impressions = (!radiology.is_empty()).then(|| PayloadBlock {
        header: RADIOLOGY_HEADER.to_string(),
        body: radiology
            .iter()
            .map(|m| format!("[{}] {}", m.note_id, m.impression))
            .collect::<Vec<_>>()
            .join("\n"),
    });
    let mut blocks = Vec::new();
    let mut pending = impressions;
    for (name, body) in sections {
        if name.rank() >= SectionName::PertinentResults.rank() {
            if let Some(block) = pending.take() {
                blocks.push(block);
            }
        }
        if *name == SectionName::PertinentResults && !radiology.is_empty() {
            continue;
        }
        blocks.push(PayloadBlock {
            header: name.as_str().to_string(),
            body: body.clone(),
        });
    }
    blocks.extend(pending);
    blocks
}

/// Serializes sections (and impressions) the way the payload part shows them.
pub fn serialize_payload(sections: &[(SectionName, String)], radiology: &[ImpressionMatch]) -> String {
    render_blocks(&payload_blocks(sections, radiology))
}

fn render_blocks(blocks: &[PayloadBlock]) -> String {
    blocks
        .iter()
        .map(PayloadBlock::render)
        .collect::<Vec<_>>()
        .join(PART_DELIMITER)
}

fn numbered_titles(groups: &[QuestionGroup]) -> String {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| format!("{}. {}", i + 1, g.title))
        .collect::<Vec<_>>()
        .join("\n")
}

fn numbered_questions(groups: &[QuestionGroup]) -> String {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut s = format!("{}. {}", i + 1, g.title);
            for q in &g.questions {
                s.push_str("\n- ");
                s.push_str(q);
            }
            s
        })
        .collect::<Vec<_>>()
        .join(PART_DELIMITER)
}

fn render_parts(parts: &[PromptPart]) -> String {
    parts.iter().map(PromptPart::render).collect::<Vec<_>>().join(PART_DELIMITER)
}

pub fn build_prompt(input: &PromptInput<'_>, templates: &PromptTemplates) -> Result<PromptBundle, PromptError> {
    let prior_bhc = match (input.task, input.variant, input.prior_bhc) {
        (GenerationTask::Di, PromptVariant::Base, bhc) => bhc,
        (GenerationTask::Di, _, None) => return Err(PromptError::MissingPriorBhc),
        (GenerationTask::Di, _, bhc) => bhc,
        (GenerationTask::Bhc, _, _) => None,
    };
    let tpl = templates.task(input.task);
    let instructed = input.variant != PromptVariant::Base;
    let mut head = Vec::new();
    if instructed {
        head.push(PromptPart {
            kind: PartKind::Context,
            labeled: true,
            body: tpl.context.clone(),
        });
        head.push(PromptPart {
            kind: PartKind::TaskDefinition,
            labeled: true,
            body: tpl.task_definition.clone(),
        });
    }
    if input.variant == PromptVariant::CoT {
        head.push(PromptPart {
            kind: PartKind::OutputStructure,
            labeled: true,
            body: format!("{}\n{}", tpl.output_structure, numbered_titles(&tpl.questions)),
        });
        head.push(PromptPart {
            kind: PartKind::Questions,
            labeled: true,
            body: numbered_questions(&tpl.questions),
        });
    }
    let tail: Vec<PromptPart> = prior_bhc
        .map(|bhc| PromptPart {
            kind: PartKind::PriorBhc,
            labeled: true,
            body: bhc.to_string(),
        })
        .into_iter()
        .collect();

    let mut blocks = payload_blocks(input.sections, input.radiology);
    let mut truncated = Vec::new();
    let assemble = |blocks: &[PayloadBlock]| {
        let mut parts = head.clone();
        parts.push(PromptPart {
            kind: PartKind::Payload,
            labeled: instructed,
            body: render_blocks(blocks),
        });
        parts.extend(tail.iter().cloned());
        parts
    };
    let mut parts = assemble(&blocks);
    let mut rendered = render_parts(&parts);
    let mut estimate = token_estimate(&rendered);
    // Cut payload blocks from the end of the canonical order until the prompt fits.
    while estimate > templates.token_budget {
        let Some(last) = blocks.last_mut() else { break };
        let excess = estimate - templates.token_budget;
        let body_tokens = token_estimate(&last.body);
        if !truncated.contains(&last.header) {
            truncated.push(last.header.clone());
        }
        if body_tokens > excess {
            last.body = leading_tokens(&last.body, body_tokens - excess).to_string();
        } else {
            blocks.pop();
        }
        parts = assemble(&blocks);
        rendered = render_parts(&parts);
        estimate = token_estimate(&rendered);
    }
    if !truncated.is_empty() {
        log::debug!("{} {} prompt truncated: {}", input.task, input.variant, truncated.join(", "));
    }
    Ok(PromptBundle {
        task: input.task,
        variant: input.variant,
        parts,
        rendered,
        token_estimate: estimate,
        truncated,
    })
}

/// First line where two renderings differ: `(line number, expected, actual)`, 1-based.
pub fn first_difference(expected: &str, actual: &str) -> Option<(usize, String, String)> {
    let mut e = expected.split('\n');
    let mut a = actual.split('\n');
    let mut line = 1;
    loop {
        match (e.next(), a.next()) {
            (None, None) => return None,
            (x, y) if x == y => line += 1,
            (x, y) => {
                return Some((
                    line,
                    x.unwrap_or("<end of text>").to_string(),
                    y.unwrap_or("<end of text>").to_string(),
                ))
            }
        }
    }
}
