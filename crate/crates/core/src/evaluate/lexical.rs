//! ROUGE-N, ROUGE-L, BLEU-4 and exact-match METEOR over [`TokenSeq`]s.

use std::collections::HashMap;

use serde::Serialize;

use super::TokenSeq;

/// Additive floor applied to zero n-gram match counts in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hits: usize, cand_total: usize, ref_total: usize) -> Self {
        if hits == 0 || cand_total == 0 || ref_total == 0 {
            return Self::default();
        }
        let precision = hits as f64 / cand_total as f64;
        let recall = hits as f64 / ref_total as f64;
        Self {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

fn clipped_overlap(cand: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    cand.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge_n(cand: &TokenSeq, reference: &TokenSeq, n: usize) -> Prf {
    assert!(n >= 1, "ROUGE order must be at least 1");
    let c = ngram_counts(cand.tokens(), n);
    let r = ngram_counts(reference.tokens(), n);
    let cand_total = cand.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    Prf::from_counts(clipped_overlap(&c, &r), cand_total, ref_total)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

pub fn rouge_l(cand: &TokenSeq, reference: &TokenSeq) -> Prf {
    let l = lcs_len(cand.tokens(), reference.tokens());
    Prf::from_counts(l, cand.len(), reference.len())
}

/// Sufficient statistics for BLEU; add them across samples for the corpus score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub cand_len: usize,
    pub ref_len: usize,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }
}

impl BleuStats {
    /// Counts clip each n-gram at its maximum count in any single reference; the reference length
    /// is the one closest to the candidate (shorter on ties).
    pub fn new(cand: &TokenSeq, refs: &[TokenSeq]) -> Self {
        let mut stats = Self {
            cand_len: cand.len(),
            ..Self::default()
        };
        stats.ref_len = refs
            .iter()
            .map(TokenSeq::len)
            .min_by_key(|&r| (r.abs_diff(cand.len()), r))
            .unwrap_or(0);
        for n in 1..=BLEU_MAX_ORDER {
            let c = ngram_counts(cand.tokens(), n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r.tokens(), n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            stats.matches[n - 1] = clipped_overlap(&c, &max_ref);
            stats.totals[n - 1] = cand.len().saturating_sub(n - 1);
        }
        stats
    }

    /// Geometric mean of the modified precisions of every order the candidate has n-grams for,
    /// times the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..BLEU_MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            let m = if self.matches[n] == 0 {
                BLEU_EPSILON
            } else {
                self.matches[n] as f64
            };
            log_sum += (m / self.totals[n] as f64).ln();
            orders += 1;
        }
        let precision = (log_sum / orders as f64).exp();
        brevity_penalty(self.cand_len, self.ref_len) * precision
    }
}

pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

pub fn bleu4(cand: &TokenSeq, refs: &[TokenSeq]) -> f64 {
    BleuStats::new(cand, refs).score()
}

/// Corpus BLEU: statistics summed over all samples before scoring.
pub fn corpus_bleu<'a>(samples: impl IntoIterator<Item = (&'a TokenSeq, &'a [TokenSeq])>) -> f64 {
    let mut total = BleuStats::default();
    for (cand, refs) in samples {
        total += BleuStats::new(cand, refs);
    }
    total.score()
}

/// Unigram alignment as `(candidate index, reference index)` pairs sorted by candidate index.
///
/// Greedy tiling: repeatedly aligns the longest run of consecutive tokens shared by the unaligned
/// parts of both sequences (earliest candidate position, then earliest reference position, on
/// ties). The number of matches is always maximal; the chunk count is the heuristic's.
pub fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    // prev[j + 1]: length of the shared run ending at (i - 1, j).
    let mut prev = vec![0usize; reference.len() + 1];
    let mut cur = vec![0usize; reference.len() + 1];
    loop {
        let mut best = (0usize, 0usize, 0usize); // (len, cand end, ref end)
        prev.fill(0);
        for i in 0..cand.len() {
            for j in 0..reference.len() {
                let v = if !used_c[i] && !used_r[j] && cand[i] == reference[j] {
                    prev[j] + 1
                } else {
                    0
                };
                cur[j + 1] = v;
                if v > best.0 {
                    best = (v, i, j);
                }
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        let (len, ci, rj) = best;
        if len == 0 {
            break;
        }
        for k in 0..len {
            let (c, r) = (ci + 1 - len + k, rj + 1 - len + k);
            used_c[c] = true;
            used_r[r] = true;
            pairs.push((c, r));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of runs of alignment pairs adjacent in both sequences.
pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    let mut chunks = 0;
    for (k, &(c, r)) in sorted.iter().enumerate() {
        let continues = k > 0 && {
            let (pc, pr) = sorted[k - 1];
            c == pc + 1 && r == pr + 1
        };
        if !continues {
            chunks += 1;
        }
    }
    chunks
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeteorDetail {
    pub matches: usize,
    pub chunks: usize,
    pub precision: f64,
    pub recall: f64,
    pub fmean: f64,
    pub penalty: f64,
    pub score: f64,
}

pub fn meteor_detail(cand: &TokenSeq, reference: &TokenSeq) -> MeteorDetail {
    let pairs = align(cand.tokens(), reference.tokens());
    meteor_from_alignment(pairs.len(), count_chunks(&pairs), cand.len(), reference.len())
}

pub fn meteor_from_alignment(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> MeteorDetail {
    if matches == 0 {
        return MeteorDetail::default();
    }
    let m = matches as f64;
    let precision = m / cand_len as f64;
    let recall = m / ref_len as f64;
    let fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    MeteorDetail {
        matches,
        chunks,
        precision,
        recall,
        fmean,
        penalty,
        score: fmean * (1.0 - penalty),
    }
}

pub fn meteor(cand: &TokenSeq, reference: &TokenSeq) -> f64 {
    meteor_detail(cand, reference).score
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> TokenSeq {
        TokenSeq::from_text(s)
    }

    #[test]
    fn rouge_examples() {
        let p = rouge_n(&t("the cat"), &t("the cat sat"), 1);
        assert_eq!(p.precision, 1.0);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.f1 - 0.8).abs() < 1e-12);
        assert_eq!(rouge_n(&t("a b"), &t("c d"), 1).f1, 0.0);
        assert_eq!(rouge_n(&t(""), &t("c d"), 1), Prf::default());
        assert_eq!(rouge_n(&t("x y z"), &t("x y z"), 2).f1, 1.0);
    }

    #[test]
    fn rouge_counts_multiplicity() {
        // cand "the the the", ref "the cat": clipped overlap 1.
        let p = rouge_n(&t("the the the"), &t("the cat"), 1);
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_examples() {
        let p = rouge_l(&t("the cat on mat"), &t("the cat sat on the mat"));
        assert_eq!(lcs_len(t("the cat on mat").tokens(), t("the cat sat on the mat").tokens()), 4);
        assert_eq!(p.precision, 1.0);
        assert!((p.f1 - 0.8).abs() < 1e-12);
        assert_eq!(lcs_len(t("d c b a").tokens(), t("a b c d").tokens()), 1);
    }

    #[test]
    fn bleu_examples() {
        let s = t("one two three four five six seven eight nine ten");
        assert!((bleu4(&s, std::slice::from_ref(&s)) - 1.0).abs() < 1e-12);
        let short = t("a b c d e");
        let long = t("a b c d e f g h i j");
        assert!((bleu4(&short, &[long]) - (-1.0f64).exp()).abs() < 1e-12);
        assert!(bleu4(&t("x y z w"), &[t("a b c d")]) < 1e-8);
        assert_eq!(bleu4(&t(""), &[t("a")]), 0.0);
    }

    #[test]
    fn bleu_closest_reference_length() {
        let stats = BleuStats::new(&t("a b c"), &[t("a b c d e f g"), t("a b"), t("a b c d")]);
        assert_eq!(stats.ref_len, 2);
    }

    #[test]
    fn meteor_examples() {
        let d = meteor_detail(&t("x"), &t("x"));
        assert_eq!((d.matches, d.chunks), (1, 1));
        assert_eq!(d.fmean, 1.0);
        assert_eq!(d.penalty, 0.5);
        assert_eq!(d.score, 0.5);
        let k = 7;
        let seq = TokenSeq::from_tokens((0..k).map(|i| format!("w{i}")));
        assert!((meteor(&seq, &seq) - (1.0 - 0.5 / (k as f64).powi(3))).abs() < 1e-12);
        assert_eq!(meteor(&t("a b"), &t("c d")), 0.0);
    }

    #[test]
    fn alignment_prefers_long_runs() {
        // "a b" appears twice in the reference; the run "a b c" wins over the first "a b".
        let pairs = align(t("a b c").tokens(), t("a b x a b c").tokens());
        assert_eq!(pairs, vec![(0, 3), (1, 4), (2, 5)]);
        assert_eq!(count_chunks(&pairs), 1);
    }
}
