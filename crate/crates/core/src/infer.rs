//! Greedy and beam-search decoding, and alignment export.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::Tape;
use crate::data::{Batch, EncodedPair, TokenId, EOS, UNK};
use crate::error::{Error, Result};
use crate::model::{decoder_init, decoder_step, encode, forward_nll, Annotations, ContextMode, EncodedSource, Model, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_into, Tensor};

pub const DEFAULT_BEAM: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub beam: usize,
    pub max_len: usize,
    pub forbid_unk: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: DEFAULT_BEAM,
            max_len: 100,
            forbid_unk: false,
        }
    }
}

/// A (partial) translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis<T> {
    /// Emitted ids; ends with EOS iff finished.
    pub tokens: Vec<TokenId>,
    /// Sum of per-step log-probabilities.
    pub log_prob: T,
    /// Decoder state after the last emitted token.
    pub state: Vec<T>,
    /// One attention row per emitted token; `None` in fixed-context mode.
    pub alphas: Option<Vec<Vec<T>>>,
}

impl<T> Hypothesis<T> {
    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Emitted ids without the trailing EOS.
    pub fn words(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult<T> {
    pub best: Hypothesis<T>,
    /// Finished hypotheses by decreasing score (ties: earlier first), at most
    /// `beam` of them; the best live hypothesis when none finished.
    pub hypotheses: Vec<Hypothesis<T>>,
    /// True when the search ended because no live hypothesis could still
    /// beat the best finished one, rather than by reaching `max_len`.
    pub complete: bool,
}

/// Encoder output for one sentence plus the initial decoder state.
struct Encoded<T> {
    source: EncodedSource<T>,
    s0: Vec<T>,
}

fn encode_source<T: Scalar>(model: &Model<T>, source: &[TokenId]) -> Result<Encoded<T>> {
    if source.is_empty() {
        return Err(Error::invalid("cannot decode an empty source sentence"));
    }
    if let Some(&bad) = source.iter().find(|&&id| id >= model.dims.k_src) {
        return Err(Error::invalid(format!(
            "source id {bad} outside vocabulary of {}",
            model.dims.k_src
        )));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, model);
    let mask = vec![true; source.len()];
    let ann = encode(&mut tape, &pv, model.mode, source, &mask, 1, source.len())?;
    let s0 = decoder_init(&mut tape, &pv, &ann)?;
    Ok(Encoded {
        source: EncodedSource::from_tape(&tape, &ann)?,
        s0: tape.value(s0).data().to_vec(),
    })
}

/// Output of one batched decoder step over `states.len()` hypotheses.
struct StepResult<T> {
    log_probs: Vec<Vec<T>>,
    states: Vec<Vec<T>>,
    alphas: Option<Vec<Vec<T>>>,
}

fn expand<T: Scalar>(
    model: &Model<T>,
    enc: &Encoded<T>,
    states: &[&[T]],
    prev: &[Option<TokenId>],
    forbid_unk: bool,
) -> Result<StepResult<T>> {
    let rows = states.len();
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, model);
    let ann = Annotations::replicate(&mut tape, &enc.source, rows)?;
    let flat: Vec<T> = states.iter().flat_map(|s| s.iter().copied()).collect();
    let s_prev = tape.constant(Tensor::from_vec(rows, model.dims.n, flat)?);
    let step = decoder_step(&mut tape, &pv, model.mode, s_prev, prev, &ann)?;
    let logits = tape.value(step.logits);
    let mut log_probs = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut lp = vec![T::zero(); logits.cols()];
        log_softmax_into(logits.row(r), &mut lp);
        if lp.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("output distribution during search".into()));
        }
        if forbid_unk {
            lp[UNK] = T::neg_infinity();
        }
        log_probs.push(lp);
    }
    let state = tape.value(step.state);
    let states = (0..rows).map(|r| state.row(r).to_vec()).collect();
    let alphas = step
        .alpha
        .map(|a| (0..rows).map(|r| tape.value(a).row(r).to_vec()).collect());
    Ok(StepResult {
        log_probs,
        states,
        alphas,
    })
}

fn check_common<T: Scalar>(model: &Model<T>, max_len: usize) -> Result<()> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be >= 1"));
    }
    model.dims.validate()
}

/// Picks the most probable word at every step (ties toward the lower id)
/// until EOS or `max_len` words.
pub fn greedy_decode<T: Scalar>(model: &Model<T>, source: &[TokenId], max_len: usize) -> Result<Hypothesis<T>> {
    check_common(model, max_len)?;
    let enc = encode_source(model, source)?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: T::zero(),
        state: enc.s0.clone(),
        alphas: (model.mode == ContextMode::Attention).then(Vec::new),
    };
    while hyp.tokens.len() < max_len && !hyp.is_finished() {
        let prev = hyp.tokens.last().copied();
        let step = expand(model, &enc, &[&hyp.state], &[prev], false)?;
        let lp = &step.log_probs[0];
        let mut best = 0;
        for (k, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = k;
            }
        }
        hyp.tokens.push(best);
        hyp.log_prob += lp[best];
        hyp.state = step.states.into_iter().next().unwrap();
        if let (Some(all), Some(rows)) = (hyp.alphas.as_mut(), step.alphas) {
            all.push(rows.into_iter().next().unwrap());
        }
    }
    Ok(hyp)
}

struct Candidate<T> {
    score: T,
    token: TokenId,
    parent: usize,
}

/// Orders by higher score, then lower token id, then older parent.
fn rank<T: Scalar>(a: &Candidate<T>, b: &Candidate<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.token.cmp(&b.token))
        .then(a.parent.cmp(&b.parent))
}

/// Beam search without length normalisation. Finished hypotheses leave the
/// beam and shrink the live width.
pub fn beam_search<T: Scalar>(model: &Model<T>, source: &[TokenId], cfg: &SearchConfig) -> Result<SearchResult<T>> {
    if cfg.beam == 0 {
        return Err(Error::invalid("beam width must be >= 1"));
    }
    check_common(model, cfg.max_len)?;
    let enc = encode_source(model, source)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: T::zero(),
        state: enc.s0.clone(),
        alphas: (model.mode == ContextMode::Attention).then(Vec::new),
    }];
    let mut done: Vec<Hypothesis<T>> = Vec::new();
    let mut complete = false;

    for _ in 0..cfg.max_len {
        let states: Vec<&[T]> = live.iter().map(|h| h.state.as_slice()).collect();
        let prev: Vec<Option<TokenId>> = live.iter().map(|h| h.tokens.last().copied()).collect();
        let step = expand(model, &enc, &states, &prev, cfg.forbid_unk)?;

        let mut cands = Vec::with_capacity(live.len() * model.dims.k_tgt);
        for (parent, (h, lp)) in live.iter().zip(&step.log_probs).enumerate() {
            for (token, &v) in lp.iter().enumerate() {
                if v != T::neg_infinity() {
                    cands.push(Candidate {
                        score: h.log_prob + v,
                        token,
                        parent,
                    });
                }
            }
        }
        let width = cfg.beam - done.len();
        if cands.len() > width {
            cands.select_nth_unstable_by(width - 1, rank);
            cands.truncate(width);
        }
        cands.sort_by(rank);

        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &live[c.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            let alphas = match (&parent.alphas, &step.alphas) {
                (Some(prev), Some(rows)) => {
                    let mut all = prev.clone();
                    all.push(rows[c.parent].clone());
                    Some(all)
                }
                _ => None,
            };
            let hyp = Hypothesis {
                tokens,
                log_prob: c.score,
                state: step.states[c.parent].clone(),
                alphas,
            };
            if c.token == EOS {
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;

        // Scores never increase, so once the best finished hypothesis is at
        // least as good as every live one the answer is settled.
        let best_done = done.iter().map(|h| h.log_prob).fold(T::neg_infinity(), T::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(T::neg_infinity(), T::max);
        if live.is_empty() || done.len() >= cfg.beam || (!done.is_empty() && best_done >= best_live) {
            complete = true;
            break;
        }
    }

    let mut hypotheses = if done.is_empty() {
        vec![live.into_iter().next().ok_or_else(|| Error::invalid("search produced no hypotheses"))?]
    } else {
        // stable sort keeps earlier-finished hypotheses first on ties
        done.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap_or(Ordering::Equal));
        done.truncate(cfg.beam);
        done
    };
    let best = hypotheses[0].clone();
    if !best.is_finished() {
        complete = false;
    }
    hypotheses.shrink_to_fit();
    Ok(SearchResult {
        best,
        hypotheses,
        complete,
    })
}

/// Teacher-forced log-probability of `target` (ids as emitted, EOS
/// included when present) given `source`.
pub fn score<T: Scalar>(model: &Model<T>, source: &[TokenId], target: &[TokenId]) -> Result<T> {
    let pair = EncodedPair {
        source: source.to_vec(),
        target: target.to_vec(),
    };
    let nll = model.sentence_nlls(&Batch::from_pairs(&[&pair])?)?;
    Ok(-nll[0])
}

/// Attention weights, `T_y x T_x`, one row per target position.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    weights: Tensor<f64>,
}

impl AlignmentMatrix {
    pub fn new(weights: Tensor<f64>) -> Result<Self> {
        if weights.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("attention weights must lie in [0, 1]"));
        }
        Ok(AlignmentMatrix { weights })
    }

    pub fn target_len(&self) -> usize {
        self.weights.rows()
    }

    pub fn source_len(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor<f64> {
        &self.weights
    }

    /// Most-attended source position (0-based) per target position, ties
    /// toward the earlier position.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.target_len())
            .map(|i| {
                let row = self.weights.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// One line per target position, tab-separated weights.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.target_len() {
            let row: Vec<String> = self.weights.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }

    /// Binary greyscale image, width `T_x`, height `T_y`, white = weight 1.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.source_len(), self.target_len()).into_bytes();
        out.extend(self.weights.data().iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// Stacks the per-step attention rows of a hypothesis.
pub fn extract_alignment<T: Scalar>(hyp: &Hypothesis<T>, source_len: usize) -> Result<AlignmentMatrix> {
    let rows = hyp
        .alphas
        .as_ref()
        .ok_or_else(|| Error::invalid("fixed-context hypotheses carry no alignment"))?;
    alignment_from_rows(rows, source_len)
}

fn alignment_from_rows<T: Scalar>(rows: &[Vec<T>], source_len: usize) -> Result<AlignmentMatrix> {
    let mut data = Vec::with_capacity(rows.len() * source_len);
    for r in rows {
        if r.len() != source_len {
            return Err(Error::invalid(format!(
                "alignment row of length {} for a source of {source_len}",
                r.len()
            )));
        }
        data.extend(r.iter().map(|v| v.to_f64_lossy()));
    }
    AlignmentMatrix::new(Tensor::from_vec(rows.len(), source_len, data)?)
}

/// Attention weights while teacher-forcing a given target.
pub fn forced_alignment<T: Scalar>(model: &Model<T>, source: &[TokenId], target: &[TokenId]) -> Result<AlignmentMatrix> {
    if model.mode == ContextMode::Fixed {
        return Err(Error::invalid("fixed-context models carry no alignment"));
    }
    let pair = EncodedPair {
        source: source.to_vec(),
        target: target.to_vec(),
    };
    let batch = Batch::from_pairs(&[&pair])?;
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, model);
    let out = forward_nll(&mut tape, &pv, model.mode, &batch)?;
    let rows: Vec<Vec<T>> = out
        .steps
        .iter()
        .map(|s| tape.value(s.alpha.expect("attention mode")).row(0).to_vec())
        .collect();
    alignment_from_rows(&rows, source.len())
}
