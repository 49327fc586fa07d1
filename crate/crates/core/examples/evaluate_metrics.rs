//! Scores a few candidate sections with the built-in lexical metrics.
//!
//! BERTScore, AlignScore and MEDCON need external adapters and show up as absent here.

use discharge_llm::evaluate::{evaluate, overall, AdapterConfig, EvalPair, Metric};
use discharge_llm::prompt::GenerationTask;

fn main() {
    let pairs = [
        ("1", GenerationTask::Bhc, "Admitted with CHF, diuresed and discharged home.", "Admitted with CHF exacerbation, diuresed with IV furosemide, discharged home."),
        ("2", GenerationTask::Bhc, "Pneumonia treated with antibiotics.", "Community acquired pneumonia treated with ceftriaxone and azithromycin."),
        ("1", GenerationTask::Di, "Dear Mr. ___, you were admitted for fluid in your lungs.", "Dear Mr. ___, you were admitted because fluid built up in your lungs."),
        ("2", GenerationTask::Di, "Dear Ms. ___, take your antibiotics.", "Dear Ms. ___, please finish your course of antibiotics."),
    ];
    let pairs: Vec<EvalPair> = pairs
        .iter()
        .map(|(id, task, cand, reference)| EvalPair {
            hadm_id: id.to_string(),
            task: *task,
            candidate: cand.to_string(),
            reference: reference.to_string(),
        })
        .collect();
    let report = evaluate(&pairs, &AdapterConfig::default()).unwrap();

    print!("{:<5}", "task");
    for m in Metric::LEXICAL {
        print!("{:>8}", m.column());
    }
    println!();
    for (task, scores) in &report.aggregates {
        print!("{:<5}", task.to_string());
        for m in Metric::LEXICAL {
            print!("{:>8.4}", scores[&m]);
        }
        println!();
    }
    for (m, why) in &report.absent {
        println!("{m}: {why}");
    }
    if let Some(o) = overall(&report) {
        println!("overall {:.4} ({})", o.value, o.note);
    }
}
