//! Splits a discharge summary into its sections.
//!
//! `cargo run --example parse_sections [discharge.csv]` parses the first record of the file, or a
//! synthetic summary when no file is given.

use discharge_llm::corpus::{load_discharge, Split};
use discharge_llm::sections::{input_bundle, parse_summary};
use discharge_llm::synthetic::{admission, rng, AdmissionShape};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(path) => load_discharge(&path, Split::Train)?
            .into_iter()
            .next()
            .ok_or("no records in file")?
            .text,
        None => admission(&mut rng(1), "20000001", Split::Train, &AdmissionShape::default()).0.text,
    };
    let parsed = parse_summary(&text);
    println!("unmatched prefix: {} bytes", parsed.unmatched_prefix.len());
    for o in &parsed.occurrences {
        let first: String = o.body().lines().next().unwrap_or("").chars().take(50).collect();
        println!("{:<38} #{} {:>5}..{:<5} {}", o.name.as_str(), o.occurrence, o.span.0, o.span.1, first);
    }
    assert_eq!(parsed.reconstruct(), text);
    println!("\nprompt inputs: {}", input_bundle(&parsed).len());
    Ok(())
}
