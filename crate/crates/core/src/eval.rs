//! Corpus BLEU, token accuracy, and score-versus-length curves.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::str::FromStr;

use crate::data::{EncodedPair, TokenId, EOS};
use crate::error::{Error, Result};
use crate::infer::{beam_search, SearchConfig};
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    /// Modified n-gram precisions, n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with one reference per candidate and no smoothing.
/// A precision with an empty denominator counts as zero.
pub fn bleu<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(
    candidates: &[C],
    references: &[R],
    max_n: usize,
) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::data("BLEU of an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::data(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::invalid("BLEU order must be >= 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(r, n);
            for (gram, count) in ngram_counts(c, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_len: c_len,
        reference_len: r_len,
    })
}

/// Fraction of positions where the sequences agree, over the longer length.
/// Both sequences are taken up to their first EOS when they are id lists;
/// two empty sequences agree fully.
pub fn token_accuracy<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    let longest = candidate.len().max(reference.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = candidate.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / longest as f64
}

/// Id sequence without the trailing EOS and anything after it.
pub fn strip_eos(ids: &[TokenId]) -> &[TokenId] {
    let end = ids.iter().position(|&t| t == EOS).unwrap_or(ids.len());
    &ids[..end]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Bleu,
    TokenAccuracy,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(Metric::Bleu),
            "token-accuracy" | "accuracy" => Ok(Metric::TokenAccuracy),
            other => Err(Error::invalid(format!(
                "unknown metric {other:?} (expected bleu or token-accuracy)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBin {
    /// Inclusive source-length range.
    pub low: usize,
    pub high: usize,
    pub count: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthCurve {
    pub metric: Metric,
    pub bins: Vec<LengthBin>,
}

impl LengthCurve {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bin_low\tbin_high\tcount\tscore\n");
        for b in &self.bins {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", b.low, b.high, b.count, b.score);
        }
        out
    }
}

/// Buckets sentences by source length and scores each bucket.
///
/// `upper_bounds` are ascending inclusive bin ends; bin `i` covers
/// `(upper_bounds[i-1], upper_bounds[i]]` with an implicit lower edge of 1.
/// Sentences longer than the last bound form a final bin ending at the
/// longest length seen. Empty bins are omitted. Token accuracy is averaged
/// over sentences; BLEU is computed over each bin as a corpus.
pub fn length_curve<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(
    source_lengths: &[usize],
    candidates: &[C],
    references: &[R],
    upper_bounds: &[usize],
    metric: Metric,
) -> Result<LengthCurve> {
    if source_lengths.is_empty() {
        return Err(Error::data("length curve of an empty corpus"));
    }
    if source_lengths.len() != candidates.len() || candidates.len() != references.len() {
        return Err(Error::data("length curve inputs differ in size"));
    }
    if upper_bounds.is_empty() || upper_bounds[0] == 0 || upper_bounds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bins must be strictly increasing positive lengths"));
    }
    let longest = *source_lengths.iter().max().unwrap();
    let last = *upper_bounds.last().unwrap();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut low = 1;
    for &hi in upper_bounds {
        edges.push((low, hi));
        low = hi + 1;
    }
    if longest > last {
        edges.push((last + 1, longest));
    }

    let mut bins = Vec::new();
    for (low, high) in edges {
        let members: Vec<usize> = (0..source_lengths.len())
            .filter(|&i| (low..=high).contains(&source_lengths[i]))
            .collect();
        if members.is_empty() {
            continue;
        }
        let score = match metric {
            Metric::TokenAccuracy => {
                members
                    .iter()
                    .map(|&i| token_accuracy(candidates[i].as_ref(), references[i].as_ref()))
                    .sum::<f64>()
                    / members.len() as f64
            }
            Metric::Bleu => {
                let c: Vec<&[T]> = members.iter().map(|&i| candidates[i].as_ref()).collect();
                let r: Vec<&[T]> = members.iter().map(|&i| references[i].as_ref()).collect();
                bleu(&c, &r, 4)?.bleu
            }
        };
        bins.push(LengthBin {
            low,
            high,
            count: members.len(),
            score,
        });
    }
    Ok(LengthCurve { metric, bins })
}

/// Decodes every source with beam search and builds the length curve
/// against the reference targets.
pub fn score_by_length<T: Scalar>(
    model: &Model<T>,
    pairs: &[EncodedPair],
    upper_bounds: &[usize],
    metric: Metric,
    search: &SearchConfig,
) -> Result<LengthCurve> {
    let mut candidates = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let r = beam_search(model, &p.source, search)
            .map_err(|e| Error::invalid(format!("decoding sentence {}: {e}", i + 1)))?;
        candidates.push(r.best.words().to_vec());
    }
    let references: Vec<&[TokenId]> = pairs.iter().map(|p| strip_eos(&p.target)).collect();
    let lengths: Vec<usize> = pairs.iter().map(|p| strip_eos(&p.source).len()).collect();
    length_curve(&lengths, &candidates, &references, upper_bounds, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_worked_short_candidate() {
        let r = bleu(&[words("the cat sat")], &[words("the cat sat down")], 4).unwrap();
        assert_eq!(r.precisions, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(r.totals, vec![3, 2, 1, 0]);
        assert!((r.brevity_penalty - 0.716_531_310_573_789_3).abs() <= 1e-9);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn hand_worked_nonzero() {
        // matches 8/9, 6/7, 4/5, 2/3; c = 9, r = 10
        let cands = [words("a b c d e"), words("x y z w")];
        let refs = [words("a b c d f g"), words("x y z w")];
        let r = bleu(&cands, &refs, 4).unwrap();
        assert_eq!(r.matches, vec![8, 6, 4, 2]);
        assert_eq!(r.totals, vec![9, 7, 5, 3]);
        assert_eq!((r.candidate_len, r.reference_len), (9, 10));
        let expected = 0.714_446_826_584_144_6;
        assert!((r.bleu - expected).abs() <= 1e-9, "{}", r.bleu);
    }

    #[test]
    fn identity_and_disjoint() {
        let c = [words("one two three four five"), words("six seven eight nine")];
        let r = bleu(&c, &c, 4).unwrap();
        assert_eq!((r.bleu, r.brevity_penalty), (1.0, 1.0));
        let r = bleu(&[words("p q r s")], &[words("w x y z")], 4).unwrap();
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn clipping_limits_repeats() {
        let r = bleu(&[words("the the the the")], &[words("the cat")], 1).unwrap();
        assert_eq!(r.precisions, vec![0.25]);
    }

    #[test]
    fn bleu_rejects_bad_input() {
        let empty: [Vec<&str>; 0] = [];
        assert!(bleu(&empty, &empty, 4).is_err());
        assert!(bleu(&[words("a")], &[words("a"), words("b")], 4).is_err());
    }

    #[test]
    fn token_accuracy_examples() {
        assert_eq!(token_accuracy(&["a", "b", "c"], &["a", "b", "c"]), 1.0);
        assert_eq!(token_accuracy(&["a", "b"], &["c", "d"]), 0.0);
        assert!((token_accuracy(&["a", "b", "c"], &["a", "x", "c"]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_accuracy(&["a"], &["a", "b"]), 0.5);
        assert_eq!(strip_eos(&[4, 5, EOS]), &[4, 5]);
    }

    #[test]
    fn curve_layout() {
        let lengths = [1, 3, 4, 9, 12];
        let cands = [vec![1], vec![1, 2, 3], vec![1, 2, 3, 4], vec![0; 9], vec![7; 12]];
        let refs = [vec![1], vec![1, 2, 4], vec![1, 2, 3, 4], vec![1; 9], vec![7; 12]];
        let curve = length_curve(&lengths, &cands, &refs, &[2, 5, 8], Metric::TokenAccuracy).unwrap();
        let spans: Vec<(usize, usize, usize)> = curve.bins.iter().map(|b| (b.low, b.high, b.count)).collect();
        assert_eq!(spans, vec![(1, 2, 1), (3, 5, 2), (9, 12, 2)]);
        assert_eq!(curve.total(), 5);
        assert!((curve.bins[1].score - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!(curve.to_tsv().starts_with("bin_low\tbin_high\tcount\tscore\n1\t2\t1\t1\n"));
        assert!(length_curve(&lengths, &cands, &refs, &[5, 5], Metric::Bleu).is_err());
    }

    #[test]
    fn single_bin_equals_corpus_metric() {
        let cands = [words("a b c d e"), words("x y z w")];
        let refs = [words("a b c d f g"), words("x y z w")];
        let curve = length_curve(&[6, 4], &cands, &refs, &[100], Metric::Bleu).unwrap();
        assert_eq!(curve.bins.len(), 1);
        assert_eq!(curve.bins[0].score, bleu(&cands, &refs, 4).unwrap().bleu);
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
        prop::collection::vec(
            (prop::collection::vec(0u8..5, 1..9), prop::collection::vec(0u8..5, 1..9)),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn bleu_ignores_sentence_order(pairs in corpus(), seed in any::<u64>()) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let base = bleu(&c, &r, 4).unwrap();
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            crate::rng::RngState::new(seed).shuffle(&mut order);
            let c2: Vec<_> = order.iter().map(|&i| c[i].clone()).collect();
            let r2: Vec<_> = order.iter().map(|&i| r[i].clone()).collect();
            prop_assert_eq!(bleu(&c2, &r2, 4).unwrap(), base);
        }

        #[test]
        fn bleu_of_corpus_with_itself_is_one(pairs in corpus()) {
            let c: Vec<_> = pairs.into_iter().map(|p| p.0).collect();
            let r = bleu(&c, &c, 4).unwrap();
            // sentences shorter than 4 tokens can leave an order without
            // n-grams at all
            let all_orders = r.totals.iter().all(|&t| t > 0);
            prop_assert_eq!(r.bleu, if all_orders { 1.0 } else { 0.0 });
        }

        #[test]
        fn token_accuracy_symmetric_and_bounded(a in prop::collection::vec(0u8..4, 0..10), b in prop::collection::vec(0u8..4, 0..10)) {
            let x = token_accuracy(&a, &b);
            prop_assert_eq!(x, token_accuracy(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
