//! Runs the two-stage BHC -> DI batch against an in-process stand-in for the endpoint.
//!
//! Swap `Canned` for `HttpTransport::new(&config)` to talk to a real OpenAI-compatible server.

use discharge_llm::assemble::Assembler;
use discharge_llm::corpus::Split;
use discharge_llm::generation::{
    read_results, run_batch, BatchOptions, ChatReply, ChatRequest, ChatTransport, EndpointConfig, Generator,
    RequestContext, TransportError,
};
use discharge_llm::prompt::{GenerationTask, PromptVariant};
use discharge_llm::synthetic::{corpus, AdmissionShape};

struct Canned;

impl ChatTransport for Canned {
    fn send(&self, request: &ChatRequest, ctx: &RequestContext) -> Result<ChatReply, TransportError> {
        let words = request.prompt().split_whitespace().count();
        let content = match ctx.task {
            GenerationTask::Bhc => format!("Admission {} was uneventful ({words} prompt words).", ctx.hadm_id),
            GenerationTask::Di => "Dear patient, please follow up with your doctor.".to_string(),
        };
        Ok(ChatReply {
            content,
            finish_reason: Some("stop".into()),
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = corpus(9, 20, Split::TestPhase2, &AdmissionShape::default());
    let out = std::env::temp_dir().join("discharge-mock-pipeline.jsonl");
    let _ = std::fs::remove_file(discharge_llm::generation::journal_path(&out));
    let transport = Canned;
    let generator = Generator::new(EndpointConfig::default(), &transport);
    let summary = run_batch(
        &corpus,
        PromptVariant::CoT,
        &Assembler::default(),
        &generator,
        &out,
        &BatchOptions::default(),
    )?;
    println!("{summary:?}");
    for r in read_results(&out)?.iter().take(4) {
        println!("{} {:<3} {:?} {}", r.hadm_id, r.task.to_string(), r.status, r.output_text);
    }
    Ok(())
}
