//! Discharge summary documentation toolkit.
//!
//! The pipeline has three steps. Each summary is split into its canonical sections. Radiology
//! impressions that duplicate the summary's Pertinent Results are selected to stand in for that
//! section. Prompts are then rendered for the Brief Hospital Course and, from the generated
//! course, for the Discharge Instructions. Around that core sit dataset preparation for
//! instruction tuning and a lexical metric suite with adapters for model-based scorers.
//!
//! Each capability has a runnable program under `examples/`; `cargo run --example <name>`.

pub mod assemble;
pub mod cli;
pub mod corpus;
pub mod evaluate;
pub mod generation;
pub mod preprocess;
pub mod prompt;
pub mod radiology;
pub mod sections;
pub mod synthetic;

pub use corpus::{Corpus, DischargeRecord, RadiologyReport, Split};
pub use prompt::{GenerationTask, PromptBundle, PromptVariant};
pub use sections::{parse_summary, ParsedSummary, SectionName};
