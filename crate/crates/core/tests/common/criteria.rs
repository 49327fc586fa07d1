//! One check per acceptance criterion. Each panics on failure and returns a short summary.
//! The focused integration tests call the same checks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use discharge_llm::assemble::{reference_target, Assembler};
use discharge_llm::corpus::{Corpus, DischargeRecord, RadiologyReport, Split};
use discharge_llm::evaluate::{
    bleu4, lcs_len, meteor, overall, rouge_l, rouge_n, Metric, MetricReport, TokenSeq, BLEU_EPSILON,
};
use discharge_llm::generation::{
    journal_path, read_results, run_batch, BatchOptions, BatchSummary, ChatReply, ChatRequest, ChatTransport,
    EndpointConfig, Generator, RequestContext, Status, TransportError,
};
use discharge_llm::preprocess::{iqr_bounds, select_training, FilterReport, SelectionRules};
use discharge_llm::prompt::{questionnaire, GenerationTask, PromptBundle, PromptVariant};
use discharge_llm::radiology::{select_reports, ImpressionMatch, SelectionConfig};
use discharge_llm::sections::{parse_summary, SectionName};
use discharge_llm::synthetic::{self, admission, parser_corpus, preprocess_fixture, AdmissionShape};
use rand::seq::SliceRandom;
use rand::Rng;

pub const TOL: f64 = 1e-9;

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

fn t(s: &str) -> TokenSeq {
    TokenSeq::from_text(s)
}

// ----- metric oracles -----

/// Hand-counted expectations for one pair; `None` where the pair does not pin a metric.
pub struct Fixture {
    pub cand: &'static str,
    pub reference: &'static str,
    pub r1: Option<(f64, f64, f64)>,
    pub r2: Option<(f64, f64, f64)>,
    pub rl: Option<(f64, f64, f64)>,
    pub bleu: Option<f64>,
    pub meteor: Option<f64>,
}

pub fn fixtures() -> Vec<Fixture> {
    let eps = BLEU_EPSILON;
    vec![
        Fixture {
            cand: "the cat",
            reference: "the cat sat",
            r1: Some((1.0, 2.0 / 3.0, 0.8)),
            r2: Some((1.0, 0.5, 2.0 / 3.0)),
            rl: Some((1.0, 2.0 / 3.0, 0.8)),
            bleu: None,
            meteor: None,
        },
        Fixture {
            cand: "the cat on mat",
            reference: "the cat sat on the mat",
            r1: None,
            r2: None,
            rl: Some((1.0, 2.0 / 3.0, 0.8)),
            bleu: None,
            meteor: None,
        },
        Fixture {
            cand: "a b c d",
            reference: "d c b a",
            r1: Some((1.0, 1.0, 1.0)),
            r2: Some((0.0, 0.0, 0.0)),
            rl: Some((0.25, 0.25, 0.25)),
            bleu: None,
            // four one-token chunks: 1 - 0.5 * 1
            meteor: Some(0.5),
        },
        Fixture {
            cand: "a b c d e",
            reference: "a b c d e f g h i j",
            r1: Some((1.0, 0.5, 2.0 / 3.0)),
            r2: None,
            rl: None,
            bleu: Some((-1.0f64).exp()),
            meteor: None,
        },
        Fixture {
            cand: "one two three four five six seven eight nine ten",
            reference: "one two three four five six seven eight nine ten",
            r1: Some((1.0, 1.0, 1.0)),
            r2: Some((1.0, 1.0, 1.0)),
            rl: Some((1.0, 1.0, 1.0)),
            bleu: Some(1.0),
            meteor: Some(1.0 - 0.5 / 1000.0),
        },
        Fixture {
            cand: "x",
            reference: "x",
            r1: Some((1.0, 1.0, 1.0)),
            r2: Some((0.0, 0.0, 0.0)),
            rl: Some((1.0, 1.0, 1.0)),
            bleu: Some(1.0),
            meteor: Some(0.5),
        },
        Fixture {
            cand: "a b c d",
            reference: "a b c d",
            r1: None,
            r2: None,
            rl: None,
            bleu: Some(1.0),
            meteor: Some(1.0 - 0.5 / 64.0),
        },
        Fixture {
            cand: "the cat sat on the mat",
            reference: "the cat lay on the mat",
            r1: Some((5.0 / 6.0, 5.0 / 6.0, 5.0 / 6.0)),
            r2: Some((0.6, 0.6, 0.6)),
            rl: Some((5.0 / 6.0, 5.0 / 6.0, 5.0 / 6.0)),
            // p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = eps/3, c = r
            bleu: Some((5.0 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0 * eps / 3.0).powf(0.25)),
            // m = 5, chunks = 2 ("the cat", "on the mat"), Fmean = 5/6
            meteor: Some(5.0 / 6.0 * (1.0 - 0.5 * (2.0f64 / 5.0).powi(3))),
        },
        Fixture {
            cand: "Dear Mr. ___,",
            reference: "dear mr ___",
            r1: Some((0.6, 1.0, 0.75)),
            r2: Some((0.25, 0.5, 1.0 / 3.0)),
            rl: Some((0.6, 1.0, 0.75)),
            bleu: None,
            meteor: None,
        },
        Fixture {
            cand: "alpha beta",
            reference: "gamma delta",
            r1: Some((0.0, 0.0, 0.0)),
            r2: Some((0.0, 0.0, 0.0)),
            rl: Some((0.0, 0.0, 0.0)),
            bleu: Some((eps / 2.0 * eps).sqrt()),
            meteor: Some(0.0),
        },
        Fixture {
            cand: "",
            reference: "anything at all",
            r1: Some((0.0, 0.0, 0.0)),
            r2: Some((0.0, 0.0, 0.0)),
            rl: Some((0.0, 0.0, 0.0)),
            bleu: Some(0.0),
            meteor: Some(0.0),
        },
        Fixture {
            cand: "b a",
            reference: "a b",
            r1: Some((1.0, 1.0, 1.0)),
            r2: Some((0.0, 0.0, 0.0)),
            rl: Some((0.5, 0.5, 0.5)),
            // p1 = 1, p2 = eps
            bleu: Some(eps.sqrt()),
            meteor: Some(0.5),
        },
        Fixture {
            cand: "the the the",
            reference: "the cat",
            r1: Some((1.0 / 3.0, 0.5, 0.4)),
            r2: Some((0.0, 0.0, 0.0)),
            rl: Some((1.0 / 3.0, 0.5, 0.4)),
            bleu: None,
            // m = 1, P = 1/3, R = 1/2, Fmean = 10PR / (R + 9P) = (5/3) / 3.5
            meteor: Some((5.0 / 3.0) / 3.5 * 0.5),
        },
        Fixture {
            cand: "no acute process seen",
            reference: "no acute cardiopulmonary process",
            r1: Some((0.75, 0.75, 0.75)),
            r2: Some((1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)),
            rl: Some((0.75, 0.75, 0.75)),
            bleu: None,
            // m = 3, chunks = 2, P = R = 3/4
            meteor: Some(0.75 * (1.0 - 0.5 * (2.0f64 / 3.0).powi(3))),
        },
    ]
}

pub const ALPHABET: [&str; 3] = ["a", "b", "c"];

/// All sequences of length 0..=max over the alphabet, shortest first.
pub fn all_sequences(max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in 0..ALPHABET.len() {
                let mut s2: Vec<usize> = s.clone();
                s2.push(sym);
                next.push(s2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn metric_fixtures() -> String {
    let fx = fixtures();
    assert!(fx.len() >= 12);
    let mut checked = 0;
    for f in &fx {
        let (c, r) = (t(f.cand), t(f.reference));
        let ctx = format!("{:?} vs {:?}", f.cand, f.reference);
        for (name, got, want) in [
            ("R-1", rouge_n(&c, &r, 1), f.r1),
            ("R-2", rouge_n(&c, &r, 2), f.r2),
            ("R-L", rouge_l(&c, &r), f.rl),
        ] {
            if let Some((p, rc, f1)) = want {
                assert!(
                    close(got.precision, p) && close(got.recall, rc) && close(got.f1, f1),
                    "{ctx}: {name} got {got:?}, want ({p}, {rc}, {f1})"
                );
                checked += 1;
            }
        }
        if let Some(b) = f.bleu {
            let got = bleu4(&c, std::slice::from_ref(&r));
            assert!(close(got, b), "{ctx}: bleu {got} want {b}");
            checked += 1;
        }
        if let Some(m) = f.meteor {
            let got = meteor(&c, &r);
            assert!(close(got, m), "{ctx}: meteor {got} want {m}");
            checked += 1;
        }
    }
    format!("{} pairs, {checked} values within {TOL:e}", fx.len())
}

/// LCS lengths against an exhaustive subsequence search over every pair of sequences of length
/// at most 6 on three symbols, plus rouge_l as a function of those lengths.
pub fn rouge_l_exhaustive() -> String {
    let start = Instant::now();
    let seqs = all_sequences(6);
    assert_eq!(seqs.len(), 1093);
    let index: HashMap<Vec<usize>, usize> = seqs.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let words = seqs.len().div_ceil(64);
    // Set of every subsequence of each sequence, found by enumerating all index subsets.
    let subseq_sets: Vec<Vec<u64>> = seqs
        .iter()
        .map(|s| {
            let mut bits = vec![0u64; words];
            for mask in 0u32..(1 << s.len()) {
                let sub: Vec<usize> = (0..s.len()).filter(|k| mask & (1 << k) != 0).map(|k| s[k]).collect();
                let id = index[&sub];
                bits[id / 64] |= 1 << (id % 64);
            }
            bits
        })
        .collect();
    // Sequences are ordered by length, so the highest common id has the longest length.
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let as_tokens = symbol_tokens(&seqs);
    let mut checked = 0u64;
    for (i, a) in subseq_sets.iter().enumerate() {
        for (j, b) in subseq_sets.iter().enumerate() {
            let mut best = 0;
            for w in (0..words).rev() {
                let both = a[w] & b[w];
                if both != 0 {
                    best = lengths[w * 64 + 63 - both.leading_zeros() as usize];
                    break;
                }
            }
            assert_eq!(lcs_len(&as_tokens[i], &as_tokens[j]), best, "{:?} {:?}", seqs[i], seqs[j]);
            checked += 1;
        }
    }
    assert_eq!(checked, 1093 * 1093);
    for a in as_tokens.iter().take(364) {
        for b in as_tokens.iter().take(364) {
            let (ca, cb) = (TokenSeq::from_tokens(a.clone()), TokenSeq::from_tokens(b.clone()));
            let l = lcs_len(a, b) as f64;
            let r = rouge_l(&ca, &cb);
            if a.is_empty() || b.is_empty() {
                assert_eq!(r.f1, 0.0);
            } else {
                let (p, rc) = (l / a.len() as f64, l / b.len() as f64);
                let f = if l == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
                assert!(close(r.f1, f), "{a:?} {b:?}");
            }
        }
    }
    let took = start.elapsed();
    assert!(took.as_secs() < 10, "took {took:?}");
    format!("{checked} pairs in {:.2}s", took.as_secs_f64())
}

pub fn symbol_tokens(seqs: &[Vec<usize>]) -> Vec<Vec<String>> {
    seqs.iter()
        .map(|s| s.iter().map(|&k| ALPHABET[k].to_string()).collect())
        .collect()
}

// ----- aggregate -----

/// Published per-metric values in column order, and the published Overall.
pub const SUBMISSION_ROW: ([f64; 8], f64) = ([0.370, 0.131, 0.245, 0.068, 0.360, 0.314, 0.215, 0.324], 0.253);
pub const BEST_SYSTEM_ROW: ([f64; 8], f64) = ([0.453, 0.201, 0.308, 0.124, 0.438, 0.403, 0.315, 0.411], 0.332);

/// A report whose per-task aggregates are the given values for both tasks.
pub fn report_from_row(values: &[f64; 8]) -> MetricReport {
    let per_metric: BTreeMap<Metric, f64> = Metric::ALL.iter().copied().zip(values.iter().copied()).collect();
    let mut report = MetricReport::default();
    for task in GenerationTask::ALL {
        report.aggregates.insert(task, per_metric.clone());
    }
    report
}

pub fn aggregate_reproduction() -> String {
    let mut got = Vec::new();
    for (values, published) in [SUBMISSION_ROW, BEST_SYSTEM_ROW] {
        let o = overall(&report_from_row(&values)).expect("overall");
        assert!(o.complete);
        assert!((o.value - published).abs() <= 5e-3, "{} vs {published}", o.value);
        got.push(format!("{:.6} vs {published}", o.value));
    }
    got.join(", ")
}

// ----- parser -----

pub fn parser_golden() -> String {
    let start = Instant::now();
    let cases = parser_corpus(2024, 50);
    let mut seen = BTreeSet::new();
    let (mut dup_docs, mut bare_docs, mut partial_docs, mut spans) = (0, 0, 0, 0);
    for (i, case) in cases.iter().enumerate() {
        let parsed = parse_summary(&case.text);
        assert_eq!(parsed.reconstruct(), case.text, "doc {i}: reconstruction");
        assert_eq!(parsed.unmatched_prefix.len(), case.prefix_len, "doc {i}: prefix");
        assert_eq!(parsed.occurrences.len(), case.sections.len(), "doc {i}: count");
        for (got, want) in parsed.occurrences.iter().zip(&case.sections) {
            assert_eq!(
                (got.name, got.occurrence, got.header_span, got.span),
                (want.name, want.occurrence, want.header_span, want.span),
                "doc {i}"
            );
            seen.insert(got.name);
            spans += 1;
        }
        if case.sections.is_empty() {
            bare_docs += 1;
            assert!(parsed.sections().is_empty());
        }
        if case.sections.iter().any(|s| s.occurrence > 0) {
            dup_docs += 1;
        }
        let distinct: BTreeSet<_> = case.sections.iter().map(|s| s.name).collect();
        if !case.sections.is_empty() && distinct.len() < 16 {
            partial_docs += 1;
        }
    }
    assert_eq!(seen.len(), 16, "all headers exercised");
    assert!(dup_docs > 0 && bare_docs > 0 && partial_docs > 0);
    let took = start.elapsed();
    assert!(took.as_secs() < 5, "took {took:?}");
    format!(
        "50 docs, {spans} spans, {dup_docs} with duplicates, {partial_docs} partial, {bare_docs} headerless, {:.2}s",
        took.as_secs_f64()
    )
}

// ----- radiology selection -----

fn selected_ids(m: &[ImpressionMatch]) -> BTreeSet<String> {
    m.iter().filter(|x| x.selected).map(|x| x.note_id.clone()).collect()
}

pub fn selection_properties() -> String {
    let start = Instant::now();
    let mut r = synthetic::rng(99);
    let shape = AdmissionShape {
        section_rate: 0.8,
        max_reports: 9,
        copy_rate: 0.5,
    };
    let (mut some_selected, mut some_rejected) = (0, 0);
    for i in 0..1000 {
        let (record, mut reports) = admission(&mut r, &format!("{}", 30_000_000 + i), Split::Train, &shape);
        // Reports of other admissions must be ignored.
        reports.push(RadiologyReport {
            note_id: "other-1".into(),
            hadm_id: "elsewhere".into(),
            text: "IMPRESSION: No acute process.".into(),
        });
        let parsed = parse_summary(&record.text);
        let t1: f64 = r.gen_range(0.0..=1.0);
        let t2: f64 = r.gen_range(t1..=1.0);
        let cap = r.gen_range(1..=6);
        let n = r.gen_range(1..=3);
        let low = SelectionConfig::new(t1, cap, n).unwrap();
        let high = SelectionConfig::new(t2, cap, n).unwrap();

        let a = select_reports(&record, &parsed, &reports, &low);
        let b = select_reports(&record, &parsed, &reports, &high);
        let (sel_a, sel_b) = (selected_ids(&a), selected_ids(&b));
        assert!(sel_b.is_subset(&sel_a), "monotonicity");
        assert!(sel_a.len() <= cap && sel_b.len() <= cap, "cap");
        assert!(a.iter().all(|m| m.note_id != "other-1"));
        assert!(a.iter().all(|m| (0.0..=1.0).contains(&m.similarity)));
        for w in a.windows(2) {
            assert!(
                w[0].similarity > w[1].similarity || w[0].similarity == w[1].similarity && w[0].note_id < w[1].note_id,
                "ordering"
            );
        }
        if !sel_a.is_empty() {
            some_selected += 1;
        }
        if sel_a.len() < a.len() {
            some_rejected += 1;
        }

        let mut shuffled = reports.clone();
        shuffled.shuffle(&mut r);
        assert_eq!(a, select_reports(&record, &parsed, &shuffled, &low), "permutation invariance");
    }
    assert!(some_selected > 100 && some_rejected > 100, "{some_selected} {some_rejected}");
    let took = start.elapsed();
    assert!(took.as_secs() < 30, "took {took:?}");
    format!("1000 admissions, {:.2}s", took.as_secs_f64())
}

// ----- preprocessing -----

pub fn preprocess_accounting() -> String {
    let want = FilterReport {
        total_in: 8,
        kept: 4,
        length_iqr: 2,
        missing_sections: 1,
        target_format: 1,
    };
    let records = preprocess_fixture();
    for task in GenerationTask::ALL {
        let (kept, report) = select_training(&records, task, &SelectionRules::default());
        assert_eq!(report, want, "{task}");
        assert!(report.reconciles());
        assert_eq!(kept.len(), 4);
    }
    assert_eq!(iqr_bounds(&[1, 2, 3, 4, 5, 6, 7, 8]).unwrap(), (2.75, 6.25));
    "kept 4, length_iqr 2, missing_sections 1, target_format 1 for both tasks; iqr_bounds(1..8) = (2.75, 6.25)".into()
}

// ----- generation with a mock endpoint -----

/// Records every request and answers deterministically from the request context.
#[derive(Default)]
pub struct Recorder {
    pub calls: Mutex<Vec<(String, GenerationTask, String)>>,
    pub cancel_after: Option<(usize, Arc<AtomicBool>)>,
    pub fail_bhc: bool,
}

pub fn generated_text(hadm_id: &str, task: GenerationTask) -> String {
    format!("generated {task} for admission {hadm_id}")
}

impl ChatTransport for Recorder {
    fn send(&self, request: &ChatRequest, ctx: &RequestContext) -> Result<ChatReply, TransportError> {
        let n = {
            let mut calls = self.calls.lock().unwrap();
            calls.push((ctx.hadm_id.clone(), ctx.task, request.prompt().to_string()));
            calls.len()
        };
        if let Some((limit, flag)) = &self.cancel_after {
            if n >= *limit {
                flag.store(true, Ordering::SeqCst);
            }
        }
        if self.fail_bhc && ctx.task == GenerationTask::Bhc {
            return Err(TransportError::Status {
                code: 400,
                body: "rejected".into(),
            });
        }
        Ok(ChatReply {
            content: generated_text(&ctx.hadm_id, ctx.task),
            finish_reason: Some("stop".into()),
        })
    }
}

pub fn batch_corpus(n: usize) -> Corpus {
    synthetic::corpus(77, n, Split::TestPhase2, &AdmissionShape::default())
}

pub fn mock_config(concurrency: usize) -> EndpointConfig {
    EndpointConfig {
        max_concurrency: concurrency,
        backoff_base_ms: 1,
        ..EndpointConfig::default()
    }
}

pub fn run_mock(
    corpus: &Corpus,
    transport: &Recorder,
    concurrency: usize,
    out: &Path,
    cancel: Option<&AtomicBool>,
) -> BatchSummary {
    let generator = Generator::new(mock_config(concurrency), transport);
    run_batch(
        corpus,
        PromptVariant::CoT,
        &Assembler::default(),
        &generator,
        out,
        &BatchOptions { cancel },
    )
    .unwrap()
}

/// BHC before DI per admission, the generated BHC inside each DI prompt, 500 ok results.
pub fn batch_of_250() -> String {
    let corpus = batch_corpus(250);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen.jsonl");
    let recorder = Recorder::default();
    let summary = run_mock(&corpus, &recorder, 4, &out, None);
    assert_eq!(summary.admissions, 250);
    assert_eq!(summary.ok, 500);
    assert_eq!(summary.generated, 500);
    assert!(summary.reconciles());

    let calls = recorder.calls.lock().unwrap();
    assert_eq!(calls.len(), 500);
    let mut first_seen: BTreeMap<(&str, GenerationTask), usize> = BTreeMap::new();
    for (i, (id, task, _)) in calls.iter().enumerate() {
        assert!(first_seen.insert((id.as_str(), *task), i).is_none(), "duplicate request {id} {task}");
    }
    for (id, task, prompt) in calls.iter() {
        if *task == GenerationTask::Di {
            assert!(first_seen[&(id.as_str(), GenerationTask::Bhc)] < first_seen[&(id.as_str(), GenerationTask::Di)]);
            assert!(prompt.contains(&generated_text(id, GenerationTask::Bhc)));
        }
    }

    let results = read_results(&out).unwrap();
    assert_eq!(results.len(), 500);
    let keys: Vec<_> = results.iter().map(|r| (r.hadm_id.clone(), r.task)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(results.iter().all(|r| r.latency_ms.is_none() && r.status == Status::Ok));
    "250 admissions, 500 requests, BHC before DI, BHC verbatim in every DI prompt".into()
}

/// Cancels once half the requests are out, reruns, and counts requests per stage.
pub fn resume_after_kill() -> String {
    let corpus = batch_corpus(250);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gen.jsonl");
    let flag = Arc::new(AtomicBool::new(false));
    let first = Recorder {
        cancel_after: Some((250, flag.clone())),
        ..Recorder::default()
    };
    let s1 = run_mock(&corpus, &first, 4, &out, Some(&flag));
    assert!(s1.cancelled);
    assert!(!out.exists());
    assert!(journal_path(&out).exists());

    let second = Recorder::default();
    let s2 = run_mock(&corpus, &second, 4, &out, None);
    assert!(!s2.cancelled);
    assert_eq!(s2.ok, 500);
    assert!(s2.skipped > 0);

    let mut per_key: BTreeMap<(String, GenerationTask), usize> = BTreeMap::new();
    for calls in [&first.calls, &second.calls] {
        for (id, task, _) in calls.lock().unwrap().iter() {
            *per_key.entry((id.clone(), *task)).or_default() += 1;
        }
    }
    assert_eq!(per_key.len(), 500);
    assert!(per_key.values().all(|&c| c == 1), "a stage was requested twice");

    let third = Recorder::default();
    let s3 = run_mock(&corpus, &third, 4, &out, None);
    assert_eq!(s3.skipped, 250);
    assert!(third.calls.lock().unwrap().is_empty());
    let n1 = first.calls.lock().unwrap().len();
    format!("killed after {n1} requests, resumed with {} more, 0 duplicates", 500 - n1)
}

pub fn concurrency_invariance(n: usize) -> String {
    let corpus = batch_corpus(n);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("one.jsonl");
    let b = dir.path().join("four.jsonl");
    run_mock(&corpus, &Recorder::default(), 1, &a, None);
    run_mock(&corpus, &Recorder::default(), 4, &b, None);
    let (a, b) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
    format!("{n} admissions, {} identical bytes", a.len())
}

// ----- prompt contract -----

fn render(
    record: &DischargeRecord,
    reports: &[RadiologyReport],
    task: GenerationTask,
    variant: PromptVariant,
) -> PromptBundle {
    let assembler = Assembler::default();
    let prepared = assembler.prepare(record, reports);
    let prior = match task {
        GenerationTask::Bhc => None,
        GenerationTask::Di => reference_target(record, &prepared.parsed, GenerationTask::Bhc)
            .or_else(|| Some("generated course".into())),
    };
    assembler.prompt(&prepared, task, variant, prior.as_deref()).unwrap()
}

/// Questions once each in CoT, Base inside Context, and no reference target in its own prompt,
/// over the synthetic corpus, the preprocessing fixture and `extra`.
pub fn prompt_contract(extra: &[(DischargeRecord, Vec<RadiologyReport>)]) -> String {
    let synthetic = batch_corpus(40);
    let mut records: Vec<(DischargeRecord, Vec<RadiologyReport>)> = synthetic
        .records()
        .iter()
        .map(|r| (r.clone(), synthetic.reports_for(&r.hadm_id).to_vec()))
        .collect();
    records.extend(preprocess_fixture().into_iter().map(|r| (r, Vec::new())));
    records.extend(extra.iter().cloned());

    let parser = discharge_llm::sections::SectionParser::default();
    let mut rendered = 0;
    for (record, reports) in &records {
        let parsed = parser.parse(&record.text);
        for task in GenerationTask::ALL {
            let cot = render(record, reports, task, PromptVariant::CoT);
            for g in questionnaire(task) {
                for q in &g.questions {
                    assert_eq!(cot.rendered.matches(q.as_str()).count(), 1, "{}: {q}", record.hadm_id);
                }
            }
            let base = render(record, reports, task, PromptVariant::Base);
            let context = render(record, reports, task, PromptVariant::Context);
            assert!(context.rendered.contains(&base.rendered), "{}: base not inside context", record.hadm_id);

            // The prompt for a task never contains its own reference, nor, for BHC, the DI.
            let leaks: Vec<GenerationTask> = match task {
                GenerationTask::Bhc => vec![GenerationTask::Bhc, GenerationTask::Di],
                GenerationTask::Di => vec![GenerationTask::Di],
            };
            for bundle in [&base, &context, &cot] {
                for leak in &leaks {
                    if let Some(reference) = reference_target(record, &parsed, *leak) {
                        if reference.split_whitespace().count() >= 3 {
                            assert!(!bundle.rendered.contains(&reference), "{}: {leak} leaks into {task}", record.hadm_id);
                        }
                    }
                }
                assert!(!bundle.rendered.contains(&format!("{}:\n", SectionName::DischargeInstructions)));
            }
            rendered += 3;
        }
    }
    let questions: usize = GenerationTask::ALL.iter().map(|&t| questionnaire(t).iter().map(|g| g.questions.len()).sum::<usize>()).sum();
    assert_eq!(questions, 16);
    format!("{} records, {rendered} prompts, 16 questions", records.len())
}
