//! Command-line front end: `parse`, `stats`, `select-radiology`, `prepare`, `generate`, `evaluate`.
//!
//! Files between subcommands are the contract, so each stage can be rerun on its own. Every
//! output gets a `*.manifest.json` next to it. Flags may also come from a TOML file given with
//! `--config`, one table per subcommand (`[generate]`, `[select-radiology]`, ...); flags given
//! on the command line win.
//!
//! Exit codes: 0 ok, 2 input or schema error, 3 empty result, 4 endpoint unreachable,
//! 5 scorer adapter protocol error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::assemble::{reference_target, Assembler};
use crate::corpus::{self, Corpus, DischargeRecord, Split};
use crate::evaluate::{self, AdapterConfig, AdapterError, EvalError, EvalPair};
use crate::generation::{self, EndpointConfig, Generator, HttpTransport};
use crate::preprocess::{self, SelectionRules, TrainingConfigStub};
use crate::prompt::{GenerationTask, PromptTemplates, PromptVariant};
use crate::radiology::{select_reports, substitute, PertinentSubstitute, SelectionConfig};
use crate::sections::{coverage_with, SectionName, SectionParser, SHARED_TASK_TRAIN_COVERAGE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_EMPTY: i32 = 3;
pub const EXIT_ENDPOINT: i32 = 4;
pub const EXIT_ADAPTER: i32 = 5;

const SUBCOMMANDS: [&str; 6] = ["parse", "stats", "select-radiology", "prepare", "generate", "evaluate"];

#[derive(Debug, Parser)]
#[command(name = "discharge", version, about = "Discharge summary section generation toolkit")]
#[command(args_override_self = true)]
pub struct Cli {
    /// TOML file with a table of flag values per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split summaries into their canonical sections (JSONL, one admission per line).
    Parse(ParseArgs),
    /// Section coverage per split and reference length statistics (CSV).
    Stats(StatsArgs),
    /// Score radiology impressions against each summary's Pertinent Results (JSONL).
    SelectRadiology(SelectArgs),
    /// Filter training records and export an instruction-tuning dataset.
    Prepare(PrepareArgs),
    /// Generate BHC then DI for every admission against a chat-completion endpoint.
    Generate(GenerateArgs),
    /// Score generated sections against references.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Discharge summaries (CSV, JSONL, optionally gzipped).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Header alias table (`alias: Canonical Name` per line).
    #[arg(long)]
    pub aliases: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectionArgs {
    /// Minimum containment similarity for a radiology impression to be selected.
    #[arg(long, default_value_t = 0.5)]
    pub rr_threshold: f64,
    /// Maximum number of selected reports per admission.
    #[arg(long, default_value_t = 5)]
    pub rr_max: usize,
    /// n-gram order of the similarity.
    #[arg(long, default_value_t = 1)]
    pub rr_ngram: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PromptArgs {
    #[arg(long, default_value = "cot")]
    pub variant: PromptVariant,
    /// Directory with template overrides (`{task}_{part}.txt`).
    #[arg(long)]
    pub prompt_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ParseArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StatsArgs {
    /// `SPLIT=PATH` or `PATH` (uses --split); repeat for several splits.
    #[arg(long, required = true)]
    pub input: Vec<String>,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub aliases: Option<PathBuf>,
    /// Width in words of the length histogram bins.
    #[arg(long, default_value_t = 50)]
    pub bin_width: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Radiology reports (note_id, hadm_id, text).
    #[arg(long)]
    pub radiology: PathBuf,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub radiology: Option<PathBuf>,
    #[arg(long)]
    pub task: GenerationTask,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Comma-separated sections every kept record must contain (default: the 14 input sections).
    #[arg(long)]
    pub required: Option<String>,
    /// Base model recorded in the training-config stub.
    #[arg(long, default_value = "mistral")]
    pub base_model: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EndpointArgs {
    /// Server root (e.g. http://127.0.0.1:8000/v1) or full chat-completions URL.
    #[arg(long, default_value = "http://127.0.0.1:8000/v1")]
    pub base_url: String,
    #[arg(long, default_value = "mistral")]
    pub model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = generation::DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
    #[arg(long, default_value_t = 1024)]
    pub max_new_tokens: u32,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 300)]
    pub timeout: u64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Base of the exponential retry backoff, in milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub backoff_ms: u64,
}

impl EndpointArgs {
    pub fn config(&self) -> EndpointConfig {
        EndpointConfig {
            base_url: self.base_url.clone(),
            model_name: self.model.clone(),
            api_key_env: self.api_key_env.clone(),
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            request_timeout_secs: self.timeout,
            max_retries: self.max_retries,
            max_concurrency: self.concurrency,
            backoff_base_ms: self.backoff_ms,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub radiology: Option<PathBuf>,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Results JSONL written by `generate`.
    #[arg(long)]
    pub generated: PathBuf,
    /// Discharge file holding the references (explicit columns or sections in the text).
    #[arg(long)]
    pub references: PathBuf,
    /// TOML file naming the BERTScore / AlignScore / MEDCON adapters.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed run: exit code plus message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn input(message: impl std::fmt::Display) -> Self {
        Self::new(EXIT_INPUT, message.to_string())
    }
}

type CmdResult = Result<Manifest, Failure>;

/// Provenance written next to each output.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub inputs: Vec<PathBuf>,
    pub config: serde_json::Value,
    pub tool_version: String,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn manifest<A: Serialize>(subcommand: &str, inputs: Vec<PathBuf>, args: &A, outputs: Vec<PathBuf>) -> Manifest {
    Manifest {
        subcommand: subcommand.into(),
        inputs,
        config: serde_json::to_value(args).unwrap_or_default(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_at_unix_ms: 0,
        finished_at_unix_ms: 0,
        outputs,
    }
}

/// Path of the manifest for an output file or directory.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        return out.join("manifest.json");
    }
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

/// Inserts flags from the `--config` file right after the subcommand name, so command-line flags,
/// which come later, override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            config = strs.get(i + 1).cloned();
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(v.to_string());
        }
    }
    let Some(config) = config else { return Ok(args) };
    let Some(pos) = strs.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let sub = strs[pos].as_str();
    let text = fs::read_to_string(&config).map_err(|e| Failure::input(format!("config {config}: {e}")))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Failure::input(format!("config {config}: {e}")))?;
    let mut injected = Vec::new();
    for (key, value) in &table {
        let toml::Value::Table(section) = value else {
            return Err(Failure::input(format!(
                "config {config}: `{key}` must sit under a [subcommand] table"
            )));
        };
        if key.replace('_', "-") != sub {
            if !SUBCOMMANDS.contains(&key.replace('_', "-").as_str()) {
                return Err(Failure::input(format!("config {config}: unknown table [{key}]")));
            }
            continue;
        }
        for (flag, v) in section {
            let flag = format!("--{}", flag.replace('_', "-"));
            let values = match v {
                toml::Value::Array(items) => items.clone(),
                other => vec![other.clone()],
            };
            for v in values {
                match v {
                    toml::Value::String(s) => injected.extend([flag.clone(), s]),
                    toml::Value::Integer(n) => injected.extend([flag.clone(), n.to_string()]),
                    toml::Value::Float(x) => injected.extend([flag.clone(), x.to_string()]),
                    toml::Value::Boolean(true) => injected.push(flag.clone()),
                    toml::Value::Boolean(false) => {}
                    other => {
                        return Err(Failure::input(format!(
                            "config {config}: unsupported value for {flag}: {other}"
                        )))
                    }
                }
            }
        }
    }
    let mut out: Vec<OsString> = args[..=pos].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(args[pos + 1..].iter().cloned());
    Ok(out)
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return f.code;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Entry point for the binary: sets up logging from `-v` and `RUST_LOG`.
pub fn main() -> i32 {
    let args: Vec<OsString> = std::env::args_os().collect();
    let verbose = args
        .iter()
        .filter_map(|a| a.to_str())
        .map(|a| match a {
            "--verbose" => 1,
            a if a.starts_with('-') && !a.starts_with("--") && a[1..].chars().all(|c| c == 'v') => a.len() - 1,
            _ => 0,
        })
        .sum::<usize>();
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    run(args)
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let started = now_ms();
    let (mut m, out) = match &cli.command {
        Command::Parse(a) => (cmd_parse(a)?, a.out.clone()),
        Command::Stats(a) => (cmd_stats(a)?, a.out.clone()),
        Command::SelectRadiology(a) => (cmd_select(a)?, a.out.clone()),
        Command::Prepare(a) => (cmd_prepare(a)?, a.out.clone()),
        Command::Generate(a) => (cmd_generate(a)?, a.out.clone()),
        Command::Evaluate(a) => (cmd_evaluate(a)?, a.out.clone()),
    };
    if let Some(c) = &cli.config {
        m.inputs.push(c.clone());
    }
    m.started_at_unix_ms = started;
    m.finished_at_unix_ms = now_ms();
    let bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
    write_atomic(&manifest_path(&out), &bytes)
}

fn parser(aliases: &Option<PathBuf>) -> Result<SectionParser, Failure> {
    match aliases {
        Some(p) => SectionParser::from_alias_file(p).map_err(Failure::input),
        None => Ok(SectionParser::default()),
    }
}

fn load_records(input: &InputArgs) -> Result<Vec<DischargeRecord>, Failure> {
    corpus::load_discharge(&input.input, input.split).map_err(Failure::input)
}

fn load_corpus(input: &InputArgs, radiology: Option<&Path>) -> Result<Corpus, Failure> {
    let records = load_records(input)?;
    let reports = match radiology {
        Some(p) => corpus::load_radiology(p).map_err(Failure::input)?,
        None => Vec::new(),
    };
    let corpus = Corpus::new(records, reports).map_err(Failure::input)?;
    let orphans = corpus.orphaned().count();
    if orphans > 0 {
        log::warn!("{orphans} radiology admission(s) have no discharge summary");
    }
    Ok(corpus)
}

fn selection(a: &SelectionArgs) -> Result<SelectionConfig, Failure> {
    SelectionConfig::new(a.rr_threshold, a.rr_max, a.rr_ngram).map_err(Failure::input)
}

fn templates(a: &PromptArgs) -> Result<PromptTemplates, Failure> {
    match &a.prompt_dir {
        Some(d) => PromptTemplates::from_dir(d).map_err(Failure::input),
        None => Ok(PromptTemplates::default()),
    }
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item).expect("serializable");
        buf.push(b'\n');
    }
    buf
}

#[derive(Serialize)]
struct ParsedLine<'a> {
    hadm_id: &'a str,
    sections: BTreeMap<SectionName, &'a str>,
    occurrences: Vec<OccurrenceLine>,
    unmatched_prefix: &'a str,
}

#[derive(Serialize)]
struct OccurrenceLine {
    name: SectionName,
    occurrence: usize,
    header_span: (usize, usize),
    span: (usize, usize),
}

pub fn cmd_parse(a: &ParseArgs) -> CmdResult {
    let parser = parser(&a.input.aliases)?;
    let records = load_records(&a.input)?;
    let parsed: Vec<_> = records.iter().map(|r| (r, parser.parse(&r.text))).collect();
    let lines = parsed.iter().map(|(r, p)| ParsedLine {
        hadm_id: &r.hadm_id,
        sections: p.sections(),
        occurrences: p
            .occurrences
            .iter()
            .map(|o| OccurrenceLine {
                name: o.name,
                occurrence: o.occurrence,
                header_span: o.header_span,
                span: o.span,
            })
            .collect(),
        unmatched_prefix: &p.unmatched_prefix,
    });
    write_atomic(&a.out, &jsonl(lines))?;
    println!("parsed {} summaries -> {}", records.len(), a.out.display());
    Ok(manifest("parse", vec![a.input.input.clone()], a, vec![a.out.clone()]))
}

fn stats_inputs(a: &StatsArgs) -> Result<Vec<(Split, PathBuf)>, Failure> {
    a.input
        .iter()
        .map(|spec| match spec.split_once('=') {
            Some((split, path)) if split.parse::<Split>().is_ok() => {
                Ok((split.parse::<Split>().unwrap(), PathBuf::from(path)))
            }
            _ => Ok((a.split, PathBuf::from(spec))),
        })
        .collect()
}

pub fn cmd_stats(a: &StatsArgs) -> CmdResult {
    let parser = parser(&a.aliases)?;
    let inputs = stats_inputs(a)?;
    let mut records = Vec::new();
    for (split, path) in &inputs {
        records.extend(corpus::load_discharge(path, *split).map_err(Failure::input)?);
    }
    let corpus = Corpus::new(records, Vec::new()).map_err(Failure::input)?;
    if corpus.is_empty() {
        return Err(Failure::new(EXIT_EMPTY, "corpus is empty"));
    }
    if a.bin_width == 0 {
        return Err(Failure::input("--bin-width must be positive"));
    }
    fs::create_dir_all(&a.out).map_err(|e| Failure::input(format!("{}: {e}", a.out.display())))?;
    let coverage = coverage_with(&corpus, &parser);
    let mut buf = Vec::new();
    coverage.write_csv(&mut buf).map_err(Failure::input)?;
    let coverage_path = a.out.join("coverage.csv");
    write_atomic(&coverage_path, &buf)?;
    let mut outputs = vec![coverage_path];

    if coverage.split_sizes[0] > 0 {
        println!("section coverage, train split vs published shared-task train split:");
        for (name, published) in SHARED_TASK_TRAIN_COVERAGE {
            let ours = coverage.fraction(name, Split::Train).unwrap_or(0.0);
            println!("  {:<38} {:>9.5} {:>9.5} {:>+9.5}", name.as_str(), ours, published, ours - published);
        }
    }

    let mut lengths = csv::Writer::from_writer(Vec::new());
    lengths
        .write_record(["target", "count", "min", "median", "mean", "max"])
        .map_err(Failure::input)?;
    for task in GenerationTask::ALL {
        let texts: Vec<String> = corpus
            .records()
            .iter()
            .filter_map(|r| reference_target(r, &parser.parse(&r.text), task))
            .collect();
        let Ok(s) = evaluate::length_stats(&texts) else {
            log::warn!("no {task} references found");
            continue;
        };
        lengths
            .write_record([
                task.to_string(),
                s.count.to_string(),
                s.min.to_string(),
                s.median.to_string(),
                format!("{:.2}", s.mean),
                s.max.to_string(),
            ])
            .map_err(Failure::input)?;
        let published = match task {
            GenerationTask::Bhc => evaluate::PHASE2_BHC_LENGTHS,
            GenerationTask::Di => evaluate::PHASE2_DI_LENGTHS,
        };
        println!(
            "{task} reference words: min {} median {} mean {:.1} max {} (published phase-2 test: {} / {} / {} / {})",
            s.min, s.median, s.mean, s.max, published.0, published.1, published.2, published.3
        );
        let mut hist = Vec::new();
        evaluate::write_histogram_csv(&evaluate::length_histogram(&texts, a.bin_width), &mut hist)
            .map_err(Failure::input)?;
        let hist_path = a.out.join(format!("length_hist_{task}.csv"));
        write_atomic(&hist_path, &hist)?;
        outputs.push(hist_path);
    }
    let lengths_path = a.out.join("lengths.csv");
    write_atomic(&lengths_path, &lengths.into_inner().map_err(|e| Failure::input(e.to_string()))?)?;
    outputs.push(lengths_path);
    Ok(manifest("stats", inputs.into_iter().map(|(_, p)| p).collect(), a, outputs))
}

#[derive(Serialize)]
struct SelectionLine<'a> {
    hadm_id: &'a str,
    pertinent_results: bool,
    substitute: &'static str,
    matches: Vec<crate::radiology::ImpressionMatch>,
}

pub fn cmd_select(a: &SelectArgs) -> CmdResult {
    let parser = parser(&a.input.aliases)?;
    let config = selection(&a.selection)?;
    let corpus = load_corpus(&a.input, Some(&a.radiology))?;
    let mut lines = Vec::new();
    let mut selected = 0;
    for record in corpus.records() {
        let parsed = parser.parse(&record.text);
        let matches = select_reports(record, &parsed, corpus.reports_for(&record.hadm_id), &config);
        let sub = match substitute(&parsed, &matches) {
            PertinentSubstitute::Impressions(_) => "impressions",
            PertinentSubstitute::Truncated(_) => "truncated",
            PertinentSubstitute::Nothing => "nothing",
        };
        selected += matches.iter().filter(|m| m.selected).count();
        lines.push(SelectionLine {
            hadm_id: &record.hadm_id,
            pertinent_results: parsed.contains(SectionName::PertinentResults),
            substitute: sub,
            matches,
        });
    }
    write_atomic(&a.out, &jsonl(&lines))?;
    println!(
        "{} admissions, {} reports selected -> {}",
        lines.len(),
        selected,
        a.out.display()
    );
    Ok(manifest(
        "select-radiology",
        vec![a.input.input.clone(), a.radiology.clone()],
        a,
        vec![a.out.clone()],
    ))
}

fn assembler(parser: SectionParser, selection: &SelectionArgs, prompt: &PromptArgs) -> Result<Assembler, Failure> {
    Ok(Assembler {
        parser,
        selection: self::selection(selection)?,
        templates: templates(prompt)?,
    })
}

pub fn cmd_prepare(a: &PrepareArgs) -> CmdResult {
    let parser = parser(&a.input.aliases)?;
    let corpus = load_corpus(&a.input, a.radiology.as_deref())?;
    let mut rules = SelectionRules {
        parser: parser.clone(),
        ..SelectionRules::default()
    };
    if let Some(list) = &a.required {
        let mut required = BTreeSet::new();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            required.insert(name.parse::<SectionName>().map_err(Failure::input)?);
        }
        rules.required_sections = required;
    }
    let (kept, report) = preprocess::select_training(corpus.records(), a.task, &rules);
    print!("{}", report.to_table());
    if kept.is_empty() {
        return Err(Failure::new(EXIT_EMPTY, "no records passed the filters"));
    }
    let assembler = assembler(parser, &a.selection, &a.prompt)?;
    let stub = TrainingConfigStub {
        base_model_name: a.base_model.clone(),
        ..TrainingConfigStub::default()
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    }
    let export = preprocess::export_jsonl(
        &kept,
        |id| corpus.reports_for(id).to_vec(),
        a.task,
        a.prompt.variant,
        &assembler,
        &stub,
        &a.out,
    )
    .map_err(Failure::input)?;
    println!(
        "wrote {} examples -> {} ({} skipped without reference)",
        export.written,
        a.out.display(),
        export.skipped.len()
    );
    if export.written == 0 {
        return Err(Failure::new(EXIT_EMPTY, "no examples written"));
    }
    let mut inputs = vec![a.input.input.clone()];
    inputs.extend(a.radiology.clone());
    Ok(manifest(
        "prepare",
        inputs,
        a,
        vec![a.out.clone(), preprocess::training_config_path(&a.out)],
    ))
}

const PROBE_TIMEOUT: Duration = Duration::from_secs(5);

pub fn cmd_generate(a: &GenerateArgs) -> CmdResult {
    let parser = parser(&a.input.aliases)?;
    let config = a.endpoint.config();
    config.validate().map_err(Failure::input)?;
    let corpus = load_corpus(&a.input, a.radiology.as_deref())?;
    let assembler = assembler(parser, &a.selection, &a.prompt)?;
    if !corpus.is_empty() {
        generation::probe(&config, PROBE_TIMEOUT)
            .map_err(|e| Failure::new(EXIT_ENDPOINT, format!("endpoint unreachable: {e}")))?;
    }
    let transport = HttpTransport::new(&config);
    let generator = Generator::new(config, &transport);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))?;
    }
    let summary = generation::run_batch(
        &corpus,
        a.prompt.variant,
        &assembler,
        &generator,
        &a.out,
        &generation::BatchOptions::default(),
    )
    .map_err(Failure::input)?;
    println!(
        "admissions {} (skipped {}), generations {}: ok {} truncated {} failed {} -> {}",
        summary.admissions,
        summary.skipped,
        summary.generated,
        summary.ok,
        summary.truncated,
        summary.failed,
        a.out.display()
    );
    let mut inputs = vec![a.input.input.clone()];
    inputs.extend(a.radiology.clone());
    Ok(manifest(
        "generate",
        inputs,
        a,
        vec![a.out.clone(), generation::journal_path(&a.out)],
    ))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    let generated = generation::read_results(&a.generated)
        .map_err(|e| Failure::input(format!("{}: {e}", a.generated.display())))?;
    let references = corpus::load_discharge(&a.references, Split::TestPhase2).map_err(Failure::input)?;
    let adapters = match &a.adapters {
        Some(p) => AdapterConfig::load(p).map_err(Failure::input)?,
        None => AdapterConfig::default(),
    };

    let by_id: BTreeMap<&str, &DischargeRecord> = references.iter().map(|r| (r.hadm_id.as_str(), r)).collect();
    let generated_ids: BTreeSet<&str> = generated.iter().map(|g| g.hadm_id.as_str()).collect();
    let mut mismatches: Vec<String> = generated_ids
        .iter()
        .filter(|id| !by_id.contains_key(*id))
        .map(|id| format!("{id}: generated, no reference"))
        .collect();
    mismatches.extend(
        by_id
            .keys()
            .filter(|id| !generated_ids.contains(*id))
            .map(|id| format!("{id}: reference, nothing generated")),
    );
    if !mismatches.is_empty() {
        let shown: Vec<&str> = mismatches.iter().take(10).map(String::as_str).collect();
        return Err(Failure::input(format!(
            "{} id mismatch(es) between generated and reference sets:\n  {}",
            mismatches.len(),
            shown.join("\n  ")
        )));
    }

    let parser = SectionParser::default();
    let mut pairs = Vec::new();
    for g in &generated {
        let record = by_id[g.hadm_id.as_str()];
        let Some(reference) = reference_target(record, &parser.parse(&record.text), g.task) else {
            log::warn!("{} {}: no reference text, pair left out", g.hadm_id, g.task);
            continue;
        };
        pairs.push(EvalPair {
            hadm_id: g.hadm_id.clone(),
            task: g.task,
            candidate: g.output_text.clone(),
            reference,
        });
    }
    if pairs.is_empty() {
        return Err(Failure::new(EXIT_EMPTY, "nothing to score"));
    }
    let report = evaluate::evaluate(&pairs, &adapters).map_err(|e| match e {
        EvalError::Adapter(AdapterError::Protocol { .. }) => Failure::new(EXIT_ADAPTER, e.to_string()),
        other => Failure::input(other),
    })?;

    fs::create_dir_all(&a.out).map_err(|e| Failure::input(format!("{}: {e}", a.out.display())))?;
    let mut csv_buf = Vec::new();
    report.write_samples_csv(&mut csv_buf).map_err(Failure::input)?;
    let samples = a.out.join("samples.csv");
    write_atomic(&samples, &csv_buf)?;
    let aggregate = a.out.join("aggregate.json");
    let mut json = serde_json::to_vec_pretty(&report.aggregate_json()).expect("serializes");
    json.push(b'\n');
    write_atomic(&aggregate, &json)?;

    for (metric, reason) in &report.absent {
        println!("{metric}: not scored ({reason})");
    }
    match evaluate::overall(&report) {
        Some(o) => println!("overall {:.4} ({})", o.value, o.note),
        None => println!("overall: no metrics"),
    }
    let mut inputs = vec![a.generated.clone(), a.references.clone()];
    inputs.extend(a.adapters.clone());
    Ok(manifest("evaluate", inputs, a, vec![samples, aggregate]))
}
