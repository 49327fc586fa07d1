//! Renders the Base, Context and CoT prompts for one admission, then the CoT DI prompt.

use discharge_llm::assemble::{reference_target, Assembler};
use discharge_llm::corpus::Split;
use discharge_llm::prompt::{GenerationTask, PromptVariant};
use discharge_llm::synthetic::{admission, rng, AdmissionShape};

fn main() {
    let (record, reports) = admission(&mut rng(5), "20000005", Split::Valid, &AdmissionShape::default());
    let assembler = Assembler::default();
    let prepared = assembler.prepare(&record, &reports);

    for variant in PromptVariant::ALL {
        let bhc = assembler.prompt(&prepared, GenerationTask::Bhc, variant, None).unwrap();
        let kinds: Vec<_> = bhc.parts.iter().map(|p| p.kind.label()).collect();
        println!("{:<8} ~{:>5} tokens  parts: {}", variant.to_string(), bhc.token_estimate, kinds.join(" | "));
    }

    let prior = reference_target(&record, &prepared.parsed, GenerationTask::Bhc).unwrap_or_default();
    let di = assembler
        .prompt(&prepared, GenerationTask::Di, PromptVariant::CoT, Some(&prior))
        .unwrap();
    println!("\n{}", di.rendered);
}
