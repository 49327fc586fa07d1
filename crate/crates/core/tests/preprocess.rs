mod common;

use discharge_llm::assemble::Assembler;
use discharge_llm::corpus::{DischargeRecord, RadiologyReport, Split};
use discharge_llm::preprocess::{
    export_jsonl, iqr_bounds, select_training, training_config_path, word_count, FilterReport, RejectReason,
    SelectionRules, TrainingConfigStub, TrainingExample,
};
use discharge_llm::prompt::{GenerationTask, PromptVariant};
use discharge_llm::sections::SectionName;
use discharge_llm::synthetic::{preprocess_fixture, FIXTURE_WORDS};

const TASKS: [GenerationTask; 2] = [GenerationTask::Bhc, GenerationTask::Di];

fn fixture_report() -> FilterReport {
    FilterReport {
        total_in: 8,
        kept: 4,
        length_iqr: 2,
        missing_sections: 1,
        target_format: 1,
    }
}

#[test]
fn eight_record_fixture_accounting() {
    let records = preprocess_fixture();
    let lengths: Vec<usize> = records.iter().map(|r| word_count(&r.text)).collect();
    let in_range = lengths.iter().filter(|&&l| l == FIXTURE_WORDS).count();
    assert_eq!(in_range, 6, "{lengths:?}");
    assert_eq!(iqr_bounds(&lengths).unwrap(), (FIXTURE_WORDS as f64, FIXTURE_WORDS as f64));
    for task in TASKS {
        let (kept, report) = select_training(&records, task, &SelectionRules::default());
        assert_eq!(report, fixture_report(), "{task}");
        assert!(report.reconciles());
        assert_eq!(report.rejected(RejectReason::LengthIqr), 2);
        let ids: Vec<&str> = kept.iter().map(|r| r.hadm_id.as_str()).collect();
        assert_eq!(ids, ["f1", "f2", "f4", "f7"], "{task}");
        let table = report.to_table();
        for needle in ["total_in", "kept", "length_iqr", "missing_sections", "target_format"] {
            assert!(table.contains(needle));
        }
    }
}

#[test]
fn quartile_examples() {
    assert_eq!(iqr_bounds(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap(), (2.75, 6.25));
    assert_eq!(iqr_bounds(&[5, 5, 5, 5]).unwrap(), (5.0, 5.0));
    assert!(iqr_bounds(&[1, 2, 3]).is_err());
}

fn clean_record(id: &str, words: usize) -> DischargeRecord {
    let mut text: String = SectionName::ALL
        .iter()
        .filter(|n| !n.is_target())
        .map(|n| format!("{n}:\nitem\n"))
        .collect();
    text.push_str("Brief Hospital Course:\n");
    text.push_str(&vec!["stable"; words].join(" "));
    text.push_str("\nDischarge Instructions:\nDear Ms. ___, you did well.\n");
    DischargeRecord::new(id, text, Split::Train)
}

#[test]
fn equal_lengths_are_all_kept() {
    let records: Vec<_> = (0..5).map(|i| clean_record(&format!("c{i}"), 30)).collect();
    for task in TASKS {
        let (kept, report) = select_training(&records, task, &SelectionRules::default());
        assert_eq!(kept.len(), 5);
        assert_eq!(report.kept, 5);
        assert!(report.reconciles());
    }
}

#[test]
fn empty_corpus() {
    let (kept, report) = select_training(&[], GenerationTask::Di, &SelectionRules::default());
    assert!(kept.is_empty());
    assert_eq!(report, FilterReport::default());
}

#[test]
fn filtering_is_idempotent() {
    let records = preprocess_fixture();
    let rules = SelectionRules::default();
    let (kept, _) = select_training(&records, GenerationTask::Bhc, &rules);
    let (again, report) = select_training(&kept, GenerationTask::Bhc, &rules);
    assert_eq!(again, kept);
    assert_eq!(report.kept, kept.len());
}

#[test]
fn custom_required_sections() {
    let records = preprocess_fixture();
    let rules = SelectionRules::with_required([SectionName::ChiefComplaint]);
    let (_, report) = select_training(&records, GenerationTask::Bhc, &rules);
    assert_eq!(report.missing_sections, 0);
    assert_eq!(report.kept, 5);
}

#[test]
fn export_round_trip_and_di_skip() {
    let dir = tempfile::tempdir().unwrap();
    let records = preprocess_fixture();
    let (kept, _) = select_training(&records, GenerationTask::Di, &SelectionRules::default());
    let reports = |_: &str| Vec::<RadiologyReport>::new();
    let stub = TrainingConfigStub::default();
    let assembler = Assembler::default();
    for task in TASKS {
        let out = dir.path().join(format!("{task}.jsonl"));
        let summary = export_jsonl(&kept, reports, task, PromptVariant::CoT, &assembler, &stub, &out).unwrap();
        assert_eq!(summary.written, 4);
        assert!(summary.skipped.is_empty());
        let lines: Vec<TrainingExample> = std::fs::read_to_string(&out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 4);
        for ex in &lines {
            let rec = kept.iter().find(|r| r.hadm_id == ex.id).unwrap();
            let section = match task {
                GenerationTask::Bhc => "Brief Hospital Course",
                GenerationTask::Di => "Discharge Instructions",
            };
            assert!(rec.text.contains(&ex.completion), "completion comes from {section}");
            assert!(!ex.prompt.contains(&ex.completion));
        }
        let cfg = std::fs::read_to_string(training_config_path(&out)).unwrap();
        assert!(cfg.contains("lora_rank=128"));
    }

    // A DI export over records lacking a DI reference skips them.
    let mut bare = clean_record("z1", 25);
    bare.text = bare.text.split("Discharge Instructions:").next().unwrap().to_string();
    let out = dir.path().join("skip.jsonl");
    let summary = export_jsonl(
        &[bare, clean_record("z2", 25)],
        reports,
        GenerationTask::Di,
        PromptVariant::Base,
        &assembler,
        &stub,
        &out,
    )
    .unwrap();
    assert_eq!(summary.written, 1);
    assert_eq!(summary.skipped, vec!["z1"]);
}

#[test]
fn export_golden_line() {
    let dir = tempfile::tempdir().unwrap();
    let mut record = DischargeRecord::new(
        "10000001",
        "Allergies:\nPenicillins\n\nChief Complaint:\nshortness of breath\n\nPertinent Results:\nCXR as below\n",
        Split::Train,
    );
    record.reference_bhc = Some("Admitted with CHF exacerbation, diuresed with IV furosemide.".into());
    let reports = |_: &str| {
        vec![RadiologyReport {
            note_id: "10000001-RR-01".into(),
            hadm_id: "10000001".into(),
            text: "FINDINGS: x\nIMPRESSION: CXR as below".into(),
        }]
    };
    let out = dir.path().join("bhc.jsonl");
    export_jsonl(
        &[record],
        reports,
        GenerationTask::Bhc,
        PromptVariant::Context,
        &Assembler::default(),
        &TrainingConfigStub::default(),
        &out,
    )
    .unwrap();
    common::check_golden("export_bhc_context.jsonl", &std::fs::read_to_string(&out).unwrap());
}
