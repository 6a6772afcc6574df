use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use rnnsearch::autograd::Fault;
use rnnsearch::data::{gen_synthetic, tokenize, Corpus, EncodedPair, Task, Vocabulary};
use rnnsearch::eval::{bleu, length_curve, Metric};
use rnnsearch::gradcheck::{self, GradcheckConfig};
use rnnsearch::infer::{beam_search, extract_alignment, forced_alignment, Hypothesis, SearchConfig};
use rnnsearch::train::{self as trainer, read_precision, write_atomic, Adadelta, Checkpoint, EpochRecord, TrainObserver, UpdateRecord};
use rnnsearch::{ContextMode, Model, ModelDims, Precision, RngState, Scalar};

use crate::config::{read_text, RunConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::{AlignArgs, DecodeArgs, EvaluateArgs, GenDataArgs, GradcheckArgs, TrainArgs, TranslateArgs};

fn stdout_line(line: &str) -> CliResult<()> {
    writeln!(io::stdout().lock(), "{line}").map_err(|e| CliError::Data(format!("stdout: {e}")))
}

fn search_config(d: &DecodeArgs) -> CliResult<SearchConfig> {
    if d.beam == 0 || d.max_len == 0 {
        return Err(CliError::Usage("--beam and --max-len must be >= 1".into()));
    }
    Ok(SearchConfig {
        beam: d.beam,
        max_len: d.max_len,
        forbid_unk: d.no_unk,
    })
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let task: Task = a.task.parse().map_err(|e: rnnsearch::Error| CliError::Usage(e.to_string()))?;
    let corpus = gen_synthetic(task, a.vocab_size, a.min_len, a.max_len, a.count, a.seed)?;
    corpus
        .write_parallel(&a.source, &a.target)
        .map_err(|e| CliError::Data(format!("writing corpus: {e}")))?;
    Ok(())
}

fn load_corpus(source: &Path, target: &Path) -> CliResult<Corpus> {
    Ok(Corpus::load_parallel(source, target)?)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::load(&a.config)?;
    let corpus = load_corpus(&a.train_source, &a.train_target)?.filter_max_len(cfg.max_len);
    if corpus.is_empty() {
        return Err(CliError::Data(format!(
            "no training pairs with both sides of at most {} tokens",
            cfg.max_len
        )));
    }
    let dev = match (&a.dev_source, &a.dev_target) {
        (Some(s), Some(t)) => Some(load_corpus(s, t)?.filter_max_len(cfg.max_len)),
        _ => None,
    };
    let src_vocab = Vocabulary::build(&corpus.sources(), cfg.vocab_size)?;
    let tgt_vocab = Vocabulary::build(&corpus.targets(), cfg.vocab_size)?;
    let train_pairs = corpus.encode(&src_vocab, &tgt_vocab)?;
    let dev_pairs = match &dev {
        Some(d) if !d.is_empty() => d.encode(&src_vocab, &tgt_vocab)?,
        _ => Vec::new(),
    };
    let dims = ModelDims {
        n: cfg.n,
        m: cfg.m,
        l: cfg.l,
        n_align: cfg.n_align,
        k_src: src_vocab.len(),
        k_tgt: tgt_vocab.len(),
    };
    dims.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let job = TrainJob {
        cfg: &cfg,
        dims,
        src_vocab,
        tgt_vocab,
        train: &train_pairs,
        dev: &dev_pairs,
        out: &a.out,
    };
    match cfg.precision {
        Precision::F32 => job.run::<f32>(),
        Precision::F64 => job.run::<f64>(),
    }
}

struct TrainJob<'a> {
    cfg: &'a RunConfig,
    dims: ModelDims,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    train: &'a [EncodedPair],
    dev: &'a [EncodedPair],
    out: &'a Path,
}

/// Writes the TSV log and the per-epoch checkpoint.
struct LogObserver<'a> {
    last_path: PathBuf,
    src_vocab: &'a Vocabulary,
    tgt_vocab: &'a Vocabulary,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v}"))
}

impl<T: Scalar> TrainObserver<T> for LogObserver<'_> {
    fn on_update(&mut self, r: &UpdateRecord) -> rnnsearch::Result<()> {
        let line = format!("update\t{}\t{}\t{}\t{}", r.update, r.epoch, r.train_nll, fmt_opt(r.dev_nll));
        writeln!(io::stdout().lock(), "{line}")?;
        Ok(())
    }

    fn on_epoch_end(&mut self, r: &EpochRecord, model: &Model<T>, opt: &Adadelta<T>) -> rnnsearch::Result<()> {
        let line = format!("epoch\t{}\t{}\t{}\t{}", r.updates, r.epoch, r.train_nll, fmt_opt(r.dev_nll));
        writeln!(io::stdout().lock(), "{line}")?;
        eprintln!(
            "epoch {} done: {} updates, {:.1}s, train NLL/token {:.4}",
            r.epoch, r.updates, r.elapsed_secs, r.train_nll_per_token
        );
        Checkpoint::new(model.clone(), self.src_vocab.clone(), self.tgt_vocab.clone(), Some(opt.clone()))?
            .save(&self.last_path)
    }
}

impl TrainJob<'_> {
    fn run<T: Scalar>(self) -> CliResult<()> {
        let mut rng = RngState::new(self.cfg.seed);
        let model = Model::<T>::init(self.dims, self.cfg.mode, &mut rng.split())?;
        let mut last = self.out.as_os_str().to_owned();
        last.push(".last");
        let mut obs = LogObserver {
            last_path: PathBuf::from(last),
            src_vocab: &self.src_vocab,
            tgt_vocab: &self.tgt_vocab,
        };
        stdout_line("kind\tupdate\tepoch\ttrain_nll\tdev_nll")?;
        let outcome = trainer::train(
            model,
            None,
            self.train,
            self.dev,
            &self.cfg.train_config(),
            &mut rng,
            &mut obs,
        )?;
        if let Some(best) = &outcome.best {
            eprintln!("best dev NLL {} at update {}", best.dev_nll, best.update);
        }
        Checkpoint::new(outcome.selected().clone(), self.src_vocab, self.tgt_vocab, None)?.save(self.out)?;
        Ok(())
    }
}

fn load_checkpoint<T: Scalar>(path: &Path) -> CliResult<Checkpoint<T>> {
    Checkpoint::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn decode<T: Scalar>(ck: &Checkpoint<T>, tokens: &[String], search: &SearchConfig) -> CliResult<Hypothesis<T>> {
    let ids = ck.source_vocab.encode(tokens)?;
    Ok(beam_search(&ck.model, &ids, search)?.best)
}

/// Decodes every line in parallel, keeping input order. Blank lines map to
/// blank outputs.
fn decode_all<T: Scalar>(ck: &Checkpoint<T>, lines: &[Vec<String>], search: &SearchConfig) -> CliResult<Vec<Vec<String>>> {
    lines
        .par_iter()
        .enumerate()
        .map(|(i, toks)| {
            if toks.is_empty() {
                return Ok(Vec::new());
            }
            let hyp = decode(ck, toks, search).map_err(|e| CliError::Data(format!("line {}: {e}", i + 1)))?;
            Ok(ck.target_vocab.decode(hyp.words()))
        })
        .collect()
}

fn with_precision<R, F32, F64>(path: &Path, f32_fn: F32, f64_fn: F64) -> CliResult<R>
where
    F32: FnOnce() -> CliResult<R>,
    F64: FnOnce() -> CliResult<R>,
{
    match read_precision(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))? {
        Precision::F32 => f32_fn(),
        Precision::F64 => f64_fn(),
    }
}

pub fn translate(a: &TranslateArgs) -> CliResult<()> {
    let search = search_config(&a.decode)?;
    with_precision(&a.checkpoint, || translate_typed::<f32>(a, &search), || translate_typed::<f64>(a, &search))
}

fn translate_typed<T: Scalar>(a: &TranslateArgs, search: &SearchConfig) -> CliResult<()> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    let text = read_text(&a.input)?;
    let lines: Vec<Vec<String>> = text.lines().map(tokenize).collect();
    let outputs = decode_all(&ck, &lines, search)?;
    let mut body = String::new();
    for words in outputs {
        body.push_str(&words.join(" "));
        body.push('\n');
    }
    write_atomic(&a.output, body.as_bytes()).map_err(|e| io_error(&a.output, e))
}

pub fn align(a: &AlignArgs) -> CliResult<()> {
    let search = search_config(&a.decode)?;
    with_precision(&a.checkpoint, || align_typed::<f32>(a, &search), || align_typed::<f64>(a, &search))
}

fn align_typed<T: Scalar>(a: &AlignArgs, search: &SearchConfig) -> CliResult<()> {
    let ck = load_checkpoint::<T>(&a.checkpoint)?;
    if ck.model.mode == ContextMode::Fixed {
        return Err(CliError::Usage(
            "checkpoint uses the fixed-context baseline, which has no attention weights to export".into(),
        ));
    }
    let src_tokens = tokenize(&a.source);
    if src_tokens.is_empty() {
        return Err(CliError::Usage("--source is empty".into()));
    }
    let src_ids = ck.source_vocab.encode(&src_tokens)?;
    let (target_words, matrix) = match &a.target {
        Some(t) => {
            let tgt_tokens = tokenize(t);
            if tgt_tokens.is_empty() {
                return Err(CliError::Usage("--target is empty".into()));
            }
            let tgt_ids = ck.target_vocab.encode(&tgt_tokens)?;
            (tgt_tokens, forced_alignment(&ck.model, &src_ids, &tgt_ids)?)
        }
        None => {
            let hyp = beam_search(&ck.model, &src_ids, search)?.best;
            (ck.target_vocab.decode(hyp.words()), extract_alignment(&hyp, src_ids.len())?)
        }
    };
    let mut tsv = a.out_prefix.as_os_str().to_owned();
    tsv.push(".tsv");
    let mut pgm = a.out_prefix.as_os_str().to_owned();
    pgm.push(".pgm");
    let (tsv, pgm) = (PathBuf::from(tsv), PathBuf::from(pgm));
    write_atomic(&tsv, matrix.to_tsv().as_bytes()).map_err(|e| io_error(&tsv, e))?;
    write_atomic(&pgm, &matrix.to_pgm()).map_err(|e| io_error(&pgm, e))?;
    stdout_line(&target_words.join(" "))
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let search = search_config(&a.decode)?;
    let metric: Metric = a.metric.parse().map_err(|e: rnnsearch::Error| CliError::Usage(e.to_string()))?;
    let corpus = load_corpus(&a.source, &a.reference)?;
    let candidates = match (&a.candidates, &a.checkpoint) {
        (Some(path), _) => {
            let lines: Vec<Vec<String>> = read_text(path)?.lines().map(tokenize).collect();
            if lines.len() != corpus.len() {
                return Err(CliError::Data(format!(
                    "{} has {} lines, the test corpus has {}",
                    path.display(),
                    lines.len(),
                    corpus.len()
                )));
            }
            lines
        }
        (None, Some(ck)) => {
            let sources = corpus.sources();
            with_precision(
                ck,
                || decode_all(&load_checkpoint::<f32>(ck)?, &sources, &search),
                || decode_all(&load_checkpoint::<f64>(ck)?, &sources, &search),
            )?
        }
        (None, None) => return Err(CliError::Usage("one of --checkpoint or --candidates is required".into())),
    };
    report(a, &corpus, &candidates, metric)
}

fn report(a: &EvaluateArgs, corpus: &Corpus, candidates: &[Vec<String>], metric: Metric) -> CliResult<()> {
    let references = corpus.targets();
    let report = bleu(candidates, &references, 4)?;
    stdout_line(&format!("sentences\t{}", corpus.len()))?;
    stdout_line(&format!("bleu\t{}", report.bleu))?;
    for (n, p) in report.precisions.iter().enumerate() {
        stdout_line(&format!("p{}\t{}", n + 1, p))?;
    }
    stdout_line(&format!("brevity_penalty\t{}", report.brevity_penalty))?;
    stdout_line(&format!("candidate_length\t{}", report.candidate_len))?;
    stdout_line(&format!("reference_length\t{}", report.reference_len))?;
    if let Some(path) = &a.curve {
        let lengths: Vec<usize> = corpus.pairs().iter().map(|p| p.0.len()).collect();
        let curve = length_curve(&lengths, candidates, &references, &a.bins, metric)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        write_atomic(path, curve.to_tsv().as_bytes()).map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let modes = match a.mode.as_str() {
        "both" => vec![ContextMode::Attention, ContextMode::Fixed],
        other => vec![other.parse().map_err(|e: rnnsearch::Error| CliError::Usage(e.to_string()))?],
    };
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("tanh-backward") => Some(Fault::TanhBackward),
        Some(other) => return Err(CliError::Usage(format!("unknown fault {other:?}"))),
    };
    let dims = ModelDims {
        n: a.n,
        m: a.m,
        l: a.l,
        n_align: a.n_align,
        k_src: a.vocab,
        k_tgt: a.vocab,
    };
    dims.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    stdout_line("mode\tparameter\tmax_relative_error\tstatus")?;
    let mut worst = 0.0f64;
    let mut tolerance = 0.0;
    for mode in modes {
        let mut cfg = GradcheckConfig::tiny(mode, a.seed);
        cfg.dims = dims;
        cfg.fault = fault;
        tolerance = cfg.tolerance;
        let report = gradcheck::run(&cfg)?;
        for p in &report.params {
            let status = if p.max_relative_error <= cfg.tolerance { "ok" } else { "FAIL" };
            stdout_line(&format!("{mode}\t{}\t{:e}\t{status}", p.name, p.max_relative_error))?;
        }
        worst = worst.max(report.worst());
    }
    if worst <= tolerance {
        eprintln!("gradient check passed: worst relative error {worst:e} <= {tolerance:e}");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: worst relative error {worst:e} > {tolerance:e}"
        )))
    }
}
