//! Deterministic synthetic data for tests, examples and demos.
//!
//! Nothing here resembles real patients. Text is assembled from small vocabularies with a seeded
//! ChaCha generator, so the same seed gives the same bytes on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, DischargeRecord, RadiologyReport, Split};
use crate::sections::SectionName;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WORDS: &[&str] = &[
    "patient", "presented", "with", "worsening", "dyspnea", "and", "chest", "pain", "was", "admitted",
    "to", "the", "floor", "for", "further", "management", "of", "acute", "on", "chronic", "heart",
    "failure", "diuresed", "iv", "furosemide", "creatinine", "stable", "afebrile", "hemodynamically",
    "tolerated", "diet", "ambulating", "independently", "home", "services", "follow", "up", "pcp",
    "cardiology", "within", "one", "week", "no", "events", "overnight", "pneumonia", "treated",
    "ceftriaxone", "azithromycin", "blood", "cultures", "negative", "sodium", "potassium", "repleted",
    "anticoagulation", "held", "restarted", "warfarin", "inr", "therapeutic", "pleural", "effusion",
    "small", "right", "left", "lower", "lobe", "consolidation", "edema", "mild", "moderate", "severe",
    "___",
];

const PSEUDO_HEADERS: &[&str] = &[
    "IMPRESSION:",
    "FINDINGS:",
    "Labs:",
    "Discharge Labs:",
    "Physical Exam on discharge:",
    "Allergies/ADRs:",
    "    Allergies: listed above",
    "Pertinent results reviewed, see chart: stable",
];

const IMPRESSIONS: &[&str] = &[
    "No acute cardiopulmonary process.",
    "Small right pleural effusion with adjacent atelectasis.",
    "Mild pulmonary edema, improved from prior.",
    "Left lower lobe consolidation concerning for pneumonia.",
    "No evidence of pulmonary embolism.",
    "Cardiomegaly without focal consolidation.",
    "Moderate hydronephrosis of the left kidney.",
    "No intracranial hemorrhage or mass effect.",
    "Interval placement of right internal jugular line terminating in the cavoatrial junction.",
    "Diffuse fatty infiltration of the liver.",
    "Nondisplaced fracture of the right fifth rib.",
    "Unremarkable abdominal ultrasound.",
];

const LAB_NAMES: &[&str] = &["WBC", "RBC", "Hgb", "Hct", "Plt", "Glucose", "UreaN", "Creat", "Na", "K", "Cl", "HCO3"];

fn sentence(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    let mut words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    if words[0] == "___" {
        words[0] = "patient";
    }
    let mut s = words.join(" ");
    s.push('.');
    s
}

fn lab_line(rng: &mut impl Rng) -> String {
    let labs: Vec<String> = LAB_NAMES
        .choose_multiple(rng, 4)
        .map(|l| format!("{l}-{}.{}", rng.gen_range(1..150), rng.gen_range(0..10)))
        .collect();
    format!("___ 07:{:02}AM BLOOD {}", rng.gen_range(0..60), labs.join(" "))
}

fn body_lines(rng: &mut impl Rng, lines: usize, pseudo_headers: bool) -> String {
    let mut out = String::new();
    for _ in 0..lines {
        if pseudo_headers && rng.gen_bool(0.2) {
            out.push_str(PSEUDO_HEADERS.choose(rng).unwrap());
            out.push(' ');
        }
        out.push_str(&sentence(rng, 4, 14));
        out.push('\n');
    }
    out
}

/// Expected parse of one header occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenSection {
    pub name: SectionName,
    pub occurrence: usize,
    pub header_span: (usize, usize),
    pub span: (usize, usize),
}

/// A generated summary with the parse it must produce.
#[derive(Debug, Clone)]
pub struct ParserCase {
    pub text: String,
    pub prefix_len: usize,
    pub sections: Vec<GoldenSection>,
}

fn header_spelling(rng: &mut impl Rng, name: SectionName) -> String {
    let base = name.as_str();
    let cased = match rng.gen_range(0..4) {
        0 => base.to_uppercase(),
        1 => base.to_lowercase(),
        _ => base.to_string(),
    };
    let indent = ["", "", " ", "  ", "   ", "\t"].choose(rng).unwrap();
    let pad = ["", "", " ", "  "].choose(rng).unwrap();
    format!("{indent}{cased}{pad}:")
}

const PREFIXES: &[&str] = &[
    "Name:  ___                     Unit No:   ___\n \nAdmission Date:  ___              Discharge Date:   ___\n \nDate of Birth:  ___             Sex:   F\n \nService: MEDICINE\n \n",
    "Attending: ___.\n \n",
    " \n",
];

/// `n` summaries exercising every header, case and indentation variants, repeated headers,
/// missing sections, pseudo-headers inside bodies and documents with no header at all.
///
/// Document 0 carries all sixteen sections; every tenth document from 9 on has none.
pub fn parser_corpus(seed: u64, n: usize) -> Vec<ParserCase> {
    let mut rng = rng(seed);
    (0..n).map(|i| parser_case(&mut rng, i)).collect()
}

fn parser_case(rng: &mut ChaCha8Rng, index: usize) -> ParserCase {
    if index % 10 == 9 {
        let lines = rng.gen_range(1..6);
        let mut text = body_lines(rng, lines, true);
        text.push_str("Seen for chest pain. Allergies: none. Physical Exam: benign\n");
        return ParserCase {
            prefix_len: text.len(),
            text,
            sections: Vec::new(),
        };
    }
    let mut names: Vec<SectionName> = if index == 0 {
        SectionName::ALL.to_vec()
    } else {
        let mut picked: Vec<SectionName> = SectionName::ALL
            .into_iter()
            .filter(|_| rng.gen_bool(0.7))
            .collect();
        if picked.is_empty() {
            picked.push(SectionName::BriefHospitalCourse);
        }
        picked
    };
    if index % 5 == 1 {
        // Admission and discharge exams, plus one more repeat.
        let pos = names.iter().position(|&s| s == SectionName::PhysicalExam).unwrap_or(0);
        names.insert((pos + 1).min(names.len()), SectionName::PhysicalExam);
        let extra = *SectionName::ALL.choose(rng).unwrap();
        names.push(extra);
    }
    if index % 7 == 3 {
        names.shuffle(rng);
    }

    let mut text = String::new();
    if index % 2 == 0 {
        text.push_str(PREFIXES.choose(rng).unwrap());
    }
    let prefix_len = text.len();
    let mut counts = [0usize; 16];
    let mut sections = Vec::new();
    for name in names {
        let header = header_spelling(rng, name);
        let start = text.len();
        text.push_str(&header);
        let header_end = text.len();
        match rng.gen_range(0..4) {
            0 => {
                text.push(' ');
                text.push_str(&sentence(rng, 1, 6));
                text.push('\n');
            }
            1 => text.push_str("\n"),
            _ => {
                let lines = rng.gen_range(1..5);
                text.push('\n');
                text.push_str(&body_lines(rng, lines, true));
            }
        }
        if rng.gen_bool(0.5) {
            text.push_str(" \n");
        }
        let occurrence = counts[name.rank()];
        counts[name.rank()] += 1;
        sections.push(GoldenSection {
            name,
            occurrence,
            header_span: (start, header_end),
            span: (header_end, text.len()),
        });
    }
    // Without a final newline the last body runs to end of text all the same.
    if rng.gen_bool(0.3) {
        text.pop();
        if let Some(last) = sections.last_mut() {
            last.span.1 = text.len();
        }
    }
    ParserCase {
        text,
        prefix_len,
        sections,
    }
}

fn section_body(rng: &mut impl Rng, name: SectionName, impressions: &[&str]) -> String {
    match name {
        SectionName::Allergies => ["No Known Allergies / Adverse Drug Reactions", "Penicillins", "Sulfa (Sulfonamide Antibiotics)"]
            .choose(rng)
            .unwrap()
            .to_string(),
        SectionName::ChiefComplaint => ["Dyspnea", "Chest pain", "Fever", "Abdominal pain", "Fall"]
            .choose(rng)
            .unwrap()
            .to_string(),
        SectionName::PertinentResults => {
            let mut s = String::from("ADMISSION LABS:\n");
            for _ in 0..rng.gen_range(2..5) {
                s.push_str(&lab_line(rng));
                s.push('\n');
            }
            for imp in impressions {
                s.push_str("\nIMAGING:\n");
                s.push_str(imp);
                s.push('\n');
            }
            s
        }
        SectionName::BriefHospitalCourse => {
            let mut s = format!("Mr. ___ is a ___ year old man admitted with {}.", ["heart failure", "pneumonia", "a fall"].choose(rng).unwrap());
            for _ in 0..rng.gen_range(3..7) {
                s.push(' ');
                s.push_str(&sentence(rng, 8, 16));
            }
            s
        }
        SectionName::DischargeInstructions => {
            let mut s = String::from("Dear Mr. ___,\n\nIt was a pleasure taking care of you.");
            for _ in 0..rng.gen_range(2..5) {
                s.push(' ');
                s.push_str(&sentence(rng, 6, 12));
            }
            s.push_str("\n\nSincerely,\nYour care team");
            s
        }
        SectionName::DischargeDisposition => ["Home", "Home With Service", "Extended Care"].choose(rng).unwrap().to_string(),
        SectionName::DischargeCondition => {
            "Mental Status: Clear and coherent.\nLevel of Consciousness: Alert and interactive.".to_string()
        }
        _ => {
            let lines = rng.gen_range(1..4);
            body_lines(rng, lines, false).trim_end().to_string()
        }
    }
}

/// Renders a summary with the given sections in canonical order.
pub fn summary_text(rng: &mut impl Rng, sections: &[SectionName], impressions: &[&str]) -> String {
    let mut text = String::from("Name:  ___  Unit No:  ___\n \n");
    for &name in sections {
        text.push_str(name.as_str());
        text.push_str(":\n");
        text.push_str(&section_body(rng, name, impressions));
        text.push_str("\n \n");
    }
    text
}

fn report_text(rng: &mut impl Rng, impression: &str) -> String {
    format!(
        "EXAMINATION:  CHEST (PA AND LAT)\n\nINDICATION:  ___ with {}\n\nFINDINGS: \n\n{}\n\nIMPRESSION: \n\n{}\n",
        sentence(rng, 3, 6),
        sentence(rng, 10, 20),
        impression
    )
}

/// Shape of one generated admission.
#[derive(Debug, Clone, Copy)]
pub struct AdmissionShape {
    /// Probability that each non-target section is present.
    pub section_rate: f64,
    pub max_reports: usize,
    /// Probability that a report's impression is copied into Pertinent Results.
    pub copy_rate: f64,
}

impl Default for AdmissionShape {
    fn default() -> Self {
        Self {
            section_rate: 1.0,
            max_reports: 4,
            copy_rate: 0.5,
        }
    }
}

/// One admission: the summary (targets included, no separate reference columns) and its reports.
pub fn admission(
    rng: &mut impl Rng,
    hadm_id: &str,
    split: Split,
    shape: &AdmissionShape,
) -> (DischargeRecord, Vec<RadiologyReport>) {
    let n_reports = rng.gen_range(0..=shape.max_reports);
    let impressions: Vec<&str> = IMPRESSIONS.choose_multiple(rng, n_reports).copied().collect();
    let copied: Vec<&str> = impressions
        .iter()
        .copied()
        .filter(|_| rng.gen_bool(shape.copy_rate))
        .collect();
    let sections: Vec<SectionName> = SectionName::ALL
        .into_iter()
        .filter(|s| s.is_target() || rng.gen_bool(shape.section_rate))
        .collect();
    let text = summary_text(rng, &sections, &copied);
    let reports = impressions
        .iter()
        .enumerate()
        .map(|(i, imp)| RadiologyReport {
            note_id: format!("{hadm_id}-RR-{:02}", i + 1),
            hadm_id: hadm_id.to_string(),
            text: report_text(rng, imp),
        })
        .collect();
    (DischargeRecord::new(hadm_id, text, split), reports)
}

/// `n` admissions with ids `20000000`, `20000001`, ... in one split.
pub fn corpus(seed: u64, n: usize, split: Split, shape: &AdmissionShape) -> Corpus {
    let mut rng = rng(seed);
    let mut records = Vec::with_capacity(n);
    let mut reports = Vec::new();
    for i in 0..n {
        let (r, rr) = admission(&mut rng, &format!("{}", 20_000_000 + i), split, shape);
        records.push(r);
        reports.extend(rr);
    }
    Corpus::new(records, reports).expect("synthetic ids are unique")
}

/// Words in the summaries of the in-range fixture records.
pub const FIXTURE_WORDS: usize = 800;

/// Eight records for the training filter: four pass, two fall outside the length IQR, one lacks
/// Social History and one has a malformed target for either task.
///
/// Ids: `f1`, `f2`, `f4`, `f7` pass; `f3` (short) and `f8` (long) fail on length; `f5` misses a
/// section; `f6` has a three-word course and a DI without salutation.
pub fn preprocess_fixture() -> Vec<DischargeRecord> {
    let mut rng = rng(8);
    let all: Vec<SectionName> = SectionName::ALL.to_vec();
    let no_social: Vec<SectionName> = all.iter().copied().filter(|&s| s != SectionName::SocialHistory).collect();
    let mut out = Vec::new();
    for i in 1..=8 {
        let sections = if i == 5 { &no_social } else { &all };
        let mut text = summary_text(&mut rng, sections, &[]);
        if i == 6 {
            text = malform_targets(&text);
        }
        let target = match i {
            3 => FIXTURE_WORDS / 4,
            8 => FIXTURE_WORDS * 3,
            _ => FIXTURE_WORDS,
        };
        let words = text.split_whitespace().count();
        if i == 3 {
            // Short record: only a few sections, still below the bound.
            text = summary_text(&mut rng, &[SectionName::ChiefComplaint, SectionName::BriefHospitalCourse], &[]);
        } else {
            assert!(words <= target, "fixture record {i} has {words} words, over {target}");
            pad_family_history(&mut text, target - words);
        }
        out.push(DischargeRecord::new(format!("f{i}"), text, Split::Train));
    }
    out
}

fn malform_targets(text: &str) -> String {
    let parsed = crate::sections::parse_summary(text);
    let mut out = parsed.unmatched_prefix.clone();
    for occ in &parsed.occurrences {
        out.push_str(&occ.header);
        match occ.name {
            SectionName::BriefHospitalCourse => out.push_str("\nUneventful stay.\n \n"),
            SectionName::DischargeInstructions => out.push_str("\nPlease take your medications.\n \n"),
            _ => out.push_str(&occ.raw_body),
        }
    }
    out
}

fn pad_family_history(text: &mut String, extra: usize) {
    if extra == 0 {
        return;
    }
    let filler = vec!["noncontributory"; extra].join(" ");
    let anchor = "Family History:\n";
    let at = text.find(anchor).expect("fixture has Family History") + anchor.len();
    text.insert_str(at, &format!("{filler}\n"));
}
