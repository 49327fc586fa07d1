//! Section coverage and target length statistics for a corpus.
//!
//! With no arguments a synthetic corpus is used; otherwise pass a discharge CSV and its split.

use discharge_llm::corpus::{load_discharge, Corpus, Split};
use discharge_llm::evaluate::{length_histogram, length_stats};
use discharge_llm::sections::{coverage_stats, extract_section, parse_summary, SectionName};
use discharge_llm::synthetic::{corpus, AdmissionShape};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let corpus = match args.as_slice() {
        [path, split] => Corpus::new(load_discharge(path, split.parse::<Split>()?)?, Vec::new())?,
        [path] => Corpus::new(load_discharge(path, Split::Train)?, Vec::new())?,
        _ => {
            let shape = AdmissionShape {
                section_rate: 0.85,
                ..AdmissionShape::default()
            };
            corpus(21, 300, Split::Train, &shape)
        }
    };

    let table = coverage_stats(&corpus);
    for name in SectionName::ALL {
        let cells: Vec<String> = Split::ALL
            .iter()
            .map(|&s| table.fraction(name, s).map_or("-".into(), |f| format!("{f:.3}")))
            .collect();
        println!("{:<38} {}", name.as_str(), cells.join("  "));
    }

    for section in [SectionName::BriefHospitalCourse, SectionName::DischargeInstructions] {
        let texts: Vec<String> = corpus
            .records()
            .iter()
            .filter_map(|r| extract_section(&parse_summary(&r.text), section).map(str::to_string))
            .collect();
        let Ok(stats) = length_stats(&texts) else { continue };
        println!("\n{section}: {stats:?}");
        for (lo, hi, n) in length_histogram(&texts, 100).into_iter().filter(|b| b.2 > 0) {
            println!("  {lo:>5}-{hi:<5} {n}");
        }
    }
    Ok(())
}
