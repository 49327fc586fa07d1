//! Filters the eight-record fixture and exports both instruction-tuning datasets.

use discharge_llm::assemble::Assembler;
use discharge_llm::preprocess::{export_jsonl, select_training, training_config_path, SelectionRules, TrainingConfigStub};
use discharge_llm::prompt::{GenerationTask, PromptVariant};
use discharge_llm::synthetic::preprocess_fixture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let records = preprocess_fixture();
    let out_dir = std::env::temp_dir().join("discharge-prepare-example");
    std::fs::create_dir_all(&out_dir)?;
    for task in GenerationTask::ALL {
        let (kept, report) = select_training(&records, task, &SelectionRules::default());
        println!("{task}:\n{}", report.to_table());
        let out = out_dir.join(format!("{task}.jsonl"));
        let written = export_jsonl(
            &kept,
            |_| Vec::new(),
            task,
            PromptVariant::CoT,
            &Assembler::default(),
            &TrainingConfigStub::default(),
            &out,
        )?;
        println!("wrote {} examples to {}", written.written, out.display());
        println!("config stub: {}\n", training_config_path(&out).display());
    }
    Ok(())
}
