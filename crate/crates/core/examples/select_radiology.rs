//! Scores radiology impressions against Pertinent Results and shows which ones replace it.

use discharge_llm::corpus::Split;
use discharge_llm::radiology::{select_reports, substitute, PertinentSubstitute, SelectionConfig};
use discharge_llm::sections::parse_summary;
use discharge_llm::synthetic::{admission, rng, AdmissionShape};

fn main() {
    let shape = AdmissionShape {
        max_reports: 6,
        ..AdmissionShape::default()
    };
    let mut r = rng(3);
    let (record, reports) = loop {
        let (rec, reps) = admission(&mut r, "20000003", Split::Train, &shape);
        if reps.len() >= 3 {
            break (rec, reps);
        }
    };
    let parsed = parse_summary(&record.text);
    for threshold in [0.2, 0.5, 1.0] {
        let config = SelectionConfig::new(threshold, 5, 1).unwrap();
        let matches = select_reports(&record, &parsed, &reports, &config);
        println!("threshold {threshold}:");
        for m in &matches {
            println!("  {} {:.3} {}", if m.selected { "*" } else { " " }, m.similarity, m.note_id);
        }
        match substitute(&parsed, &matches) {
            PertinentSubstitute::Impressions(m) => println!("  -> {} impression(s) replace Pertinent Results\n", m.len()),
            PertinentSubstitute::Truncated(text) => {
                println!("  -> Pertinent Results kept, {} tokens\n", text.split_whitespace().count())
            }
            PertinentSubstitute::Nothing => println!("  -> nothing\n"),
        }
    }
}
