//! Corpora, vocabularies, minibatching, and synthetic tasks.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngState;

pub type TokenId = usize;

pub const EOS: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
const RESERVED: usize = 2;

/// Token/id bijection over a frequency shortlist. Ids 0 and 1 are the
/// reserved end-of-sentence and unknown-word symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list (ids from 2 upward).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut ids = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid vocabulary token {tok:?}")));
            }
            if tok == EOS_TOKEN || tok == UNK_TOKEN {
                return Err(Error::data(format!("reserved token {tok:?} in vocabulary list")));
            }
            if ids.insert(tok.clone(), all.len()).is_some() {
                return Err(Error::data(format!("duplicate vocabulary token {tok:?}")));
            }
            all.push(tok);
        }
        Ok(Vocabulary { tokens: all, ids })
    }

    /// Keeps the `k` most frequent tokens, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("vocabulary size must be >= 1"));
        }
        if sentences.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s {
                let tok = tok.as_ref();
                if tok != EOS_TOKEN && tok != UNK_TOKEN {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(ranked.into_iter().take(k).map(|(t, _)| t))
    }

    /// Vocabulary size K, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Shortlist tokens in id order, reserved symbols excluded.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    /// Maps tokens to ids (out-of-vocabulary to UNK) and appends EOS.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        if tokens.is_empty() {
            return Err(Error::data("cannot encode an empty sentence"));
        }
        let mut ids: Vec<TokenId> = tokens.iter().map(|t| self.id(t.as_ref())).collect();
        ids.push(EOS);
        Ok(ids)
    }

    /// Ids back to tokens, stopping at the first EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// One shortlist token per line; line `i` (0-based) holds id `i + 2`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for w in self.words() {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines())
    }
}

/// Aligned sentence pairs of whitespace tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pairs: Vec<(Vec<String>, Vec<String>)>,
}

impl Corpus {
    pub fn new(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<Self> {
        for (i, (s, t)) in pairs.iter().enumerate() {
            if s.is_empty() || t.is_empty() {
                return Err(Error::data(format!("pair {i} has an empty sentence")));
            }
        }
        Ok(Corpus { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Vec<String>, Vec<String>)] {
        &self.pairs
    }

    pub fn sources(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<String>> {
        self.pairs.iter().map(|p| p.1.clone()).collect()
    }

    /// Drops every pair whose source or target exceeds `max_len` tokens.
    pub fn filter_max_len(&self, max_len: usize) -> Corpus {
        Corpus {
            pairs: self
                .pairs
                .iter()
                .filter(|(s, t)| s.len() <= max_len && t.len() <= max_len)
                .cloned()
                .collect(),
        }
    }

    /// Reads two line-aligned UTF-8 files, whitespace tokenized.
    pub fn load_parallel(source: impl AsRef<Path>, target: impl AsRef<Path>) -> Result<Self> {
        let src = fs::read_to_string(source.as_ref())?;
        let tgt = fs::read_to_string(target.as_ref())?;
        let src: Vec<&str> = src.lines().collect();
        let tgt: Vec<&str> = tgt.lines().collect();
        if src.len() != tgt.len() {
            return Err(Error::data(format!(
                "line count mismatch: source has {} lines, target has {}",
                src.len(),
                tgt.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src.len());
        for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
            let s = tokenize(s);
            let t = tokenize(t);
            if s.is_empty() {
                return Err(Error::data(format!("empty source line {}", i + 1)));
            }
            if t.is_empty() {
                return Err(Error::data(format!("empty target line {}", i + 1)));
            }
            pairs.push((s, t));
        }
        Ok(Corpus { pairs })
    }

    pub fn write_parallel(&self, source: impl AsRef<Path>, target: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        let mut t = String::new();
        for (a, b) in &self.pairs {
            s.push_str(&a.join(" "));
            s.push('\n');
            t.push_str(&b.join(" "));
            t.push('\n');
        }
        fs::write(source, s)?;
        fs::write(target, t)?;
        Ok(())
    }

    pub fn encode(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Result<Vec<EncodedPair>> {
        self.pairs
            .iter()
            .map(|(s, t)| {
                Ok(EncodedPair {
                    source: src_vocab.encode(s)?,
                    target: tgt_vocab.encode(t)?,
                })
            })
            .collect()
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// A sentence pair as id sequences, each ending with EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

/// A padded minibatch. Matrices are `B x T` row-major; padded cells hold EOS
/// with mask `false`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub source_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Result<Self> {
        Self::padded(pairs, 0, 0)
    }

    /// Like [`Batch::from_pairs`] but pads to at least the given lengths.
    pub fn padded(pairs: &[&EncodedPair], min_src: usize, min_tgt: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::data("empty batch"));
        }
        for p in pairs {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::data("batch pair with an empty side"));
            }
        }
        let src_len = pairs.iter().map(|p| p.source.len()).max().unwrap().max(min_src);
        let tgt_len = pairs.iter().map(|p| p.target.len()).max().unwrap().max(min_tgt);
        let size = pairs.len();
        let mut b = Batch {
            size,
            src_len,
            tgt_len,
            source: vec![EOS; size * src_len],
            target: vec![EOS; size * tgt_len],
            source_mask: vec![false; size * src_len],
            target_mask: vec![false; size * tgt_len],
        };
        for (i, p) in pairs.iter().enumerate() {
            for (j, &id) in p.source.iter().enumerate() {
                b.source[i * src_len + j] = id;
                b.source_mask[i * src_len + j] = true;
            }
            for (j, &id) in p.target.iter().enumerate() {
                b.target[i * tgt_len + j] = id;
                b.target_mask[i * tgt_len + j] = true;
            }
        }
        Ok(b)
    }

    /// Real (unpadded) source length of row `i`, EOS included.
    pub fn source_length(&self, i: usize) -> usize {
        self.source_mask[i * self.src_len..(i + 1) * self.src_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn target_length(&self, i: usize) -> usize {
        self.target_mask[i * self.tgt_len..(i + 1) * self.tgt_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }

    pub fn target_tokens(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

/// Shuffles the data, then for every run of `bucket` pairs sorts by source
/// length and cuts it into minibatches of `batch` pairs.
pub fn make_batches(data: &[EncodedPair], batch: usize, bucket: usize, rng: &mut RngState) -> Result<Vec<Batch>> {
    if batch == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if bucket == 0 || !bucket.is_multiple_of(batch) {
        return Err(Error::invalid(format!(
            "bucket size {bucket} must be a positive multiple of batch size {batch}"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut out = Vec::new();
    for chunk in order.chunks(bucket) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| data[i].source.len());
        for group in chunk.chunks(batch) {
            let pairs: Vec<&EncodedPair> = group.iter().map(|&i| &data[i]).collect();
            out.push(Batch::from_pairs(&pairs)?);
        }
    }
    Ok(out)
}

/// Synthetic sequence transduction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            other => Err(Error::invalid(format!("unknown task {other:?} (expected copy or reverse)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
        })
    }
}

/// Name of synthetic token `i`.
pub fn synthetic_token(i: usize) -> String {
    format!("t{i}")
}

/// `n` pairs of uniformly random sequences over `vocab_size` tokens with
/// lengths uniform in `min_len..=max_len`.
pub fn gen_synthetic(
    task: Task,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    n: usize,
    seed: u64,
) -> Result<Corpus> {
    if vocab_size < 2 {
        return Err(Error::invalid("synthetic vocabulary needs at least 2 tokens"));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::invalid(format!("invalid length range {min_len}..={max_len}")));
    }
    if n == 0 {
        return Err(Error::invalid("synthetic corpus size must be >= 1"));
    }
    let mut rng = RngState::new(seed);
    let pairs = (0..n)
        .map(|_| {
            let len = rng.below(min_len, max_len + 1);
            let src: Vec<String> = (0..len).map(|_| synthetic_token(rng.below(0, vocab_size))).collect();
            let tgt = match task {
                Task::Copy => src.clone(),
                Task::Reverse => src.iter().rev().cloned().collect(),
            };
            (src, tgt)
        })
        .collect();
    Corpus::new(pairs)
}

/// Vocabulary holding every synthetic token, in index order.
pub fn synthetic_vocab(vocab_size: usize) -> Result<Vocabulary> {
    Vocabulary::from_tokens((0..vocab_size).map(synthetic_token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn shortlist_drops_rare_tokens() {
        let v = Vocabulary::build(&[sent("a a b")], 1).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.encode(&["b"]).unwrap(), vec![UNK, EOS]);
    }

    #[test]
    fn large_k_keeps_everything() {
        let v = Vocabulary::build(&[sent("x y z"), sent("z w")], 100).unwrap();
        assert_eq!(v.words().len(), 4);
        for t in ["x", "y", "z", "w"] {
            assert_ne!(v.id(t), UNK);
        }
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        let v = Vocabulary::build(&[sent("b a c b a a b")], 2).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("c"), UNK);
        assert!(Vocabulary::build::<String>(&[], 3).is_err());
        assert!(Vocabulary::build(&[sent("a")], 0).is_err());
    }

    #[test]
    fn reserved_tokens_never_enter_the_shortlist() {
        let v = Vocabulary::build(&[sent("<unk> <unk> </s> a")], 5).unwrap();
        assert_eq!(v.words(), &["a".to_string()]);
        assert_eq!(v.encode(&["<unk>", "a"]).unwrap(), vec![UNK, 2, EOS]);
    }

    #[test]
    fn encode_cases() {
        let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
        assert_eq!(v.encode(&["a"]).unwrap(), vec![2, EOS]);
        assert_eq!(v.encode(&["q", "r"]).unwrap(), vec![UNK, UNK, EOS]);
        assert!(v.encode::<&str>(&[]).is_err());
        let s = sent("b a a");
        assert_eq!(v.decode(&v.encode(&s).unwrap()), s);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let v = Vocabulary::build(&[sent("c b b a")], 10).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("b"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    proptest! {
        #[test]
        fn build_is_permutation_invariant(
            words in prop::collection::vec(prop::collection::vec(0usize..8, 1..6), 1..12),
            k in 1usize..10,
            seed in any::<u64>(),
        ) {
            let corpus: Vec<Vec<String>> = words
                .iter()
                .map(|s| s.iter().map(|&i| synthetic_token(i)).collect())
                .collect();
            let mut shuffled = corpus.clone();
            RngState::new(seed).shuffle(&mut shuffled);
            prop_assert_eq!(Vocabulary::build(&corpus, k).unwrap(), Vocabulary::build(&shuffled, k).unwrap());
        }
    }

    fn encoded(n: usize, seed: u64) -> Vec<EncodedPair> {
        let c = gen_synthetic(Task::Copy, 10, 1, 12, n, seed).unwrap();
        let v = synthetic_vocab(10).unwrap();
        c.encode(&v, &v).unwrap()
    }

    #[test]
    fn bucketed_batching_shapes() {
        let data = encoded(1600, 1);
        let batches = make_batches(&data, 80, 1600, &mut RngState::new(0)).unwrap();
        assert_eq!(batches.len(), 20);
        assert!(batches.iter().all(|b| b.size == 80));
        let maxes: Vec<usize> = batches.iter().map(|b| b.src_len).collect();
        assert!(maxes.windows(2).all(|w| w[0] <= w[1]), "{maxes:?}");

        let data = encoded(50, 2);
        let batches = make_batches(&data, 80, 1600, &mut RngState::new(0)).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].size, 50);

        assert!(make_batches(&data, 0, 1600, &mut RngState::new(0)).is_err());
        assert!(make_batches(&data, 7, 20, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn partial_bucket_gets_short_last_batch() {
        let data = encoded(170, 3);
        let batches = make_batches(&data, 20, 100, &mut RngState::new(5)).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.size).collect();
        assert_eq!(sizes, vec![20, 20, 20, 20, 20, 20, 20, 20, 10]);
    }

    #[test]
    fn masks_cover_real_tokens_plus_eos() {
        let data = encoded(40, 4);
        for b in make_batches(&data, 8, 40, &mut RngState::new(1)).unwrap() {
            for i in 0..b.size {
                let sl = b.source_length(i);
                let row = &b.source[i * b.src_len..(i + 1) * b.src_len];
                assert_eq!(row[sl - 1], EOS);
                assert!(row[sl..].iter().all(|&id| id == EOS));
                let tl = b.target_length(i);
                assert_eq!(b.target[i * b.tgt_len + tl - 1], EOS);
            }
        }
        let total: usize = data.iter().map(|p| p.source.len()).sum();
        let batches = make_batches(&data, 8, 40, &mut RngState::new(1)).unwrap();
        let masked: usize = batches.iter().map(|b| b.source_mask.iter().filter(|&&m| m).count()).sum();
        assert_eq!(total, masked);
    }

    #[test]
    fn synthetic_tasks() {
        let c = gen_synthetic(Task::Copy, 20, 3, 8, 50, 9).unwrap();
        assert!(c.pairs().iter().all(|(s, t)| s == t && (3..=8).contains(&s.len())));
        let r = gen_synthetic(Task::Reverse, 20, 3, 8, 50, 9).unwrap();
        for ((s, t), (cs, _)) in r.pairs().iter().zip(c.pairs()) {
            let rev: Vec<String> = s.iter().rev().cloned().collect();
            assert_eq!(&rev, t);
            assert_eq!(s, cs);
        }
        assert_eq!(c, gen_synthetic(Task::Copy, 20, 3, 8, 50, 9).unwrap());
        assert!(gen_synthetic(Task::Copy, 20, 3, 8, 0, 9).is_err());
        assert!(gen_synthetic(Task::Copy, 1, 3, 8, 5, 9).is_err());
        assert!(gen_synthetic(Task::Copy, 5, 4, 3, 5, 9).is_err());
    }

    #[test]
    fn load_parallel_cases() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = (dir.path().join("s"), dir.path().join("t"));
        fs::write(&s, "a b\nc\nd e f\n").unwrap();
        fs::write(&t, "x\ny y\nz\n").unwrap();
        let c = Corpus::load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.pairs()[0].0, vec!["a", "b"]);

        fs::write(&t, "x\ny\n").unwrap();
        let err = Corpus::load_parallel(&s, &t).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('2'), "{err}");

        fs::write(&t, "x\n\nz\n").unwrap();
        let err = Corpus::load_parallel(&s, &t).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
