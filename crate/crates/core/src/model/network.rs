//! Batched forward graph: gated recurrent cells, the bidirectional encoder,
//! the alignment MLP, the attentive decoder step, and the deep maxout output.
//!
//! Every function records onto a [`Tape`], so the same code serves training
//! (followed by `backward`) and inference (values read off the tape).

use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::data::{Batch, TokenId};
use crate::error::{Error, Result};
use crate::named::GradientSet;
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_into, Tensor};

use super::{ContextMode, Model, ModelDims};

/// Tape handles for one gated recurrent layer.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    w: Var,
    w_z: Var,
    w_r: Var,
    u: Var,
    u_z: Var,
    u_r: Var,
    b: Var,
    b_z: Var,
    b_r: Var,
    /// `C`, `C_z`, `C_r`; decoder only.
    c: Option<[Var; 3]>,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub dims: ModelDims,
    src_embed: Var,
    tgt_embed: Var,
    enc_fwd: GruVars,
    enc_bwd: GruVars,
    dec: GruVars,
    w_s: Var,
    b_s: Var,
    w_a: Var,
    u_a: Var,
    b_a: Var,
    v_a: Var,
    u_o: Var,
    v_o: Var,
    c_o: Var,
    b_t: Var,
    w_o: Var,
    b_o: Var,
}

impl ParamVars {
    /// Registers every parameter of `model` as a leaf on `tape`.
    pub fn register<'a, T: Scalar>(tape: &mut Tape<'a, T>, model: &'a Model<T>) -> Self {
        let vars: HashMap<&str, Var> = model
            .params
            .iter()
            .enumerate()
            .map(|(i, (name, t))| (name, tape.param(i, t)))
            .collect();
        let v = |name: &str| vars[name];
        let gru = |p: &str, with_context: bool| GruVars {
            w: v(&format!("{p}.W")),
            w_z: v(&format!("{p}.W_z")),
            w_r: v(&format!("{p}.W_r")),
            u: v(&format!("{p}.U")),
            u_z: v(&format!("{p}.U_z")),
            u_r: v(&format!("{p}.U_r")),
            b: v(&format!("{p}.b")),
            b_z: v(&format!("{p}.b_z")),
            b_r: v(&format!("{p}.b_r")),
            c: with_context.then(|| [v(&format!("{p}.C")), v(&format!("{p}.C_z")), v(&format!("{p}.C_r"))]),
        };
        ParamVars {
            dims: model.dims,
            src_embed: v("src_embed"),
            tgt_embed: v("tgt_embed"),
            enc_fwd: gru("enc_fwd", false),
            enc_bwd: gru("enc_bwd", false),
            dec: gru("dec", true),
            w_s: v("init.W_s"),
            b_s: v("init.b_s"),
            w_a: v("align.W_a"),
            u_a: v("align.U_a"),
            b_a: v("align.b_a"),
            v_a: v("align.v_a"),
            u_o: v("out.U_o"),
            v_o: v("out.V_o"),
            c_o: v("out.C_o"),
            b_t: v("out.b_t"),
            w_o: v("out.W_o"),
            b_o: v("out.b_o"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GruKind {
    EncoderForward,
    EncoderBackward,
    Decoder,
}

/// New state plus the gate activations that produced it.
#[derive(Debug, Clone, Copy)]
pub struct GruOutput {
    pub state: Var,
    pub update: Var,
    pub reset: Var,
    pub proposal: Var,
}

/// One gated recurrent step:
///
/// ```text
/// z = σ(W_z e + U_z h + C_z c + b_z)
/// r = σ(W_r e + U_r h + C_r c + b_r)
/// h̃ = tanh(W e + U (r ∘ h) + C c + b)
/// h' = (1 − z) ∘ h + z ∘ h̃
/// ```
///
/// The context terms exist only for the decoder.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    kind: GruKind,
    input: Var,
    prev: Var,
    context: Option<Var>,
) -> Result<GruOutput> {
    let g = match kind {
        GruKind::EncoderForward => &pv.enc_fwd,
        GruKind::EncoderBackward => &pv.enc_bwd,
        GruKind::Decoder => &pv.dec,
    };
    let c = match (g.c, context) {
        (Some(c), Some(ctx)) => Some((c, ctx)),
        (None, None) => None,
        _ => {
            return Err(Error::invalid(format!(
                "{kind:?} step: a context vector is required by the decoder and only by it"
            )))
        }
    };
    let pre = |tape: &mut Tape<'_, T>, w: Var, u: Var, h: Var, ci: Option<usize>, b: Var| -> Result<Var> {
        let mut acc = tape.matmul_nt(input, w)?;
        let rec = tape.matmul_nt(h, u)?;
        acc = tape.add(acc, rec)?;
        if let (Some(i), Some((cm, ctx))) = (ci, c) {
            let cc = tape.matmul_nt(ctx, cm[i])?;
            acc = tape.add(acc, cc)?;
        }
        tape.add(acc, b)
    };
    let z = pre(tape, g.w_z, g.u_z, prev, Some(1), g.b_z)?;
    let update = tape.sigmoid(z)?;
    let r = pre(tape, g.w_r, g.u_r, prev, Some(2), g.b_r)?;
    let reset = tape.sigmoid(r)?;
    let gated = tape.mul(reset, prev)?;
    let p = pre(tape, g.w, g.u, gated, Some(0), g.b)?;
    let proposal = tape.tanh(p)?;
    let state = tape.interpolate(update, prev, proposal)?;
    Ok(GruOutput {
        state,
        update,
        reset,
        proposal,
    })
}

/// Encoder output for a batch of `batch` sentences padded to `len`.
#[derive(Debug, Clone)]
pub struct Annotations<T> {
    pub batch: usize,
    pub len: usize,
    /// `(batch*len) x 2n`; row `b*len + j` is `[→h_j ; ←h_j]` of sentence `b`.
    pub annotations: Var,
    /// `(batch*len) x n_align` precomputed `U_a h_j + b_a` (attention mode).
    pub projection: Option<Var>,
    /// `batch x n`, forward state at each sentence's last real position.
    pub forward_last: Var,
    /// `batch x n`, backward state at position 1.
    pub backward_first: Var,
    /// `batch x len`, 1 on real positions.
    pub mask: Tensor<T>,
}

impl<T: Scalar> Annotations<T> {
    /// Builds annotations from already-computed values (placed on `tape` as
    /// constants), replicating sentence 0 `copies` times. Used by search,
    /// where each hypothesis attends to the same source.
    pub fn replicate<'a>(
        tape: &mut Tape<'a, T>,
        source: &EncodedSource<T>,
        copies: usize,
    ) -> Result<Annotations<T>> {
        let len = source.len;
        let rows: Vec<usize> = (0..copies).flat_map(|_| 0..len).collect();
        let ann = tape.constant(source.annotations.clone());
        let annotations = tape.gather_rows(ann, rows.clone())?;
        let projection = match &source.projection {
            Some(p) => {
                let p = tape.constant(p.clone());
                Some(tape.gather_rows(p, rows)?)
            }
            None => None,
        };
        let fl = tape.constant(source.forward_last.clone());
        let forward_last = tape.gather_rows(fl, vec![0; copies])?;
        let bf = tape.constant(source.backward_first.clone());
        let backward_first = tape.gather_rows(bf, vec![0; copies])?;
        Ok(Annotations {
            batch: copies,
            len,
            annotations,
            projection,
            forward_last,
            backward_first,
            mask: Tensor::filled(copies, len, T::one()),
        })
    }
}

/// Detached encoder values for a single sentence.
#[derive(Debug, Clone)]
pub struct EncodedSource<T> {
    pub len: usize,
    pub annotations: Tensor<T>,
    pub projection: Option<Tensor<T>>,
    pub forward_last: Tensor<T>,
    pub backward_first: Tensor<T>,
}

impl<T: Scalar> EncodedSource<T> {
    pub fn from_tape(tape: &Tape<'_, T>, ann: &Annotations<T>) -> Result<Self> {
        if ann.batch != 1 {
            return Err(Error::invalid("detached encodings hold a single sentence"));
        }
        Ok(EncodedSource {
            len: ann.len,
            annotations: tape.value(ann.annotations).clone(),
            projection: ann.projection.map(|p| tape.value(p).clone()),
            forward_last: tape.value(ann.forward_last).clone(),
            backward_first: tape.value(ann.backward_first).clone(),
        })
    }
}

/// Runs both encoder directions over a padded batch of source ids.
///
/// Forward states start from zero at position 1; backward states start from
/// zero after each sentence's last real token. Padded positions keep the
/// previous state, so padding never leaks into real positions.
pub fn encode<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    mode: ContextMode,
    source: &[TokenId],
    mask: &[bool],
    batch: usize,
    len: usize,
) -> Result<Annotations<T>> {
    if batch == 0 || len == 0 {
        return Err(Error::invalid("cannot encode an empty source"));
    }
    if source.len() != batch * len || mask.len() != batch * len {
        return Err(Error::invalid(format!(
            "source ids/mask must hold {batch}x{len} entries, got {}/{}",
            source.len(),
            mask.len()
        )));
    }
    for b in 0..batch {
        if !mask[b * len] {
            return Err(Error::invalid(format!("source sentence {b} is empty")));
        }
    }
    let n = pv.dims.n;
    let column = |j: usize| -> (Vec<Option<usize>>, Vec<bool>) {
        (0..batch)
            .map(|b| (Some(source[b * len + j]), mask[b * len + j]))
            .unzip()
    };

    let zero = tape.constant(Tensor::zeros(batch, n));
    let mut fwd = Vec::with_capacity(len);
    let mut h = zero;
    for j in 0..len {
        let (ids, m) = column(j);
        let e = tape.lookup(pv.src_embed, ids)?;
        let step = gru_step(tape, pv, GruKind::EncoderForward, e, h, None)?;
        h = tape.mask_select(step.state, h, m)?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; len];
    let mut h = zero;
    for j in (0..len).rev() {
        let (ids, m) = column(j);
        let e = tape.lookup(pv.src_embed, ids)?;
        let step = gru_step(tape, pv, GruKind::EncoderBackward, e, h, None)?;
        h = tape.mask_select(step.state, h, m)?;
        bwd[j] = h;
    }

    let mut blocks = Vec::with_capacity(2 * len);
    for j in 0..len {
        blocks.push(fwd[j]);
        blocks.push(bwd[j]);
    }
    let wide = tape.concat(&blocks)?;
    let annotations = tape.reshape(wide, batch * len, 2 * n)?;
    let projection = match mode {
        ContextMode::Attention => Some(tape.affine(annotations, pv.u_a, Some(pv.b_a))?),
        ContextMode::Fixed => None,
    };
    let mask_t = Tensor::from_vec(
        batch,
        len,
        mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
    )?;
    Ok(Annotations {
        batch,
        len,
        annotations,
        projection,
        forward_last: fwd[len - 1],
        backward_first: bwd[0],
        mask: mask_t,
    })
}

/// Alignment energies `e_j = v_aᵀ tanh(W_a s + U_a h_j + b_a)`, `batch x len`.
/// Padded positions carry finite values here and are excluded by [`attend`].
pub fn align_energy<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    s_prev: Var,
    ann: &Annotations<T>,
) -> Result<Var> {
    let proj = ann
        .projection
        .ok_or_else(|| Error::invalid("alignment energies need attention-mode annotations"))?;
    let ws = tape.matmul_nt(s_prev, pv.w_a)?;
    let rows: Vec<usize> = (0..ann.batch).flat_map(|b| std::iter::repeat_n(b, ann.len)).collect();
    let ws = tape.gather_rows(ws, rows)?;
    let pre = tape.add(proj, ws)?;
    let act = tape.tanh(pre)?;
    let e = tape.matmul_nt(act, pv.v_a)?;
    tape.reshape(e, ann.batch, ann.len)
}

/// Softmax over unmasked energies and the resulting expected annotation.
/// Returns `(alpha, context)`.
pub fn attend<T: Scalar>(tape: &mut Tape<'_, T>, energies: Var, ann: &Annotations<T>) -> Result<(Var, Var)> {
    let alpha = tape.softmax_rows(energies, Some(ann.mask.clone()))?;
    let context = tape.attend(alpha, ann.annotations)?;
    Ok((alpha, context))
}

/// `s_0 = tanh(W_s ←h_1 + b_s)`.
pub fn decoder_init<T: Scalar>(tape: &mut Tape<'_, T>, pv: &ParamVars, ann: &Annotations<T>) -> Result<Var> {
    let pre = tape.affine(ann.backward_first, pv.w_s, Some(pv.b_s))?;
    tape.tanh(pre)
}

/// Deep output: `t̃ = U_o s + V_o e + C_o c + b_t`, pairwise maxout to `l`
/// units, then `W_o t + b_o` logits over the target vocabulary.
pub fn output_logits<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    s_prev: Var,
    y_prev_embedding: Var,
    context: Var,
) -> Result<Var> {
    let a = tape.matmul_nt(s_prev, pv.u_o)?;
    let b = tape.matmul_nt(y_prev_embedding, pv.v_o)?;
    let c = tape.matmul_nt(context, pv.c_o)?;
    let t = tape.add(a, b)?;
    let t = tape.add(t, c)?;
    let t = tape.add(t, pv.b_t)?;
    let t = tape.maxout(t)?;
    tape.affine(t, pv.w_o, Some(pv.b_o))
}

/// Everything one decoder step produced.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// Decoder state after the step (`s_i`).
    pub state: Var,
    /// Attention weights, `batch x len`; absent in fixed-context mode.
    pub alpha: Option<Var>,
    /// Context vector `c_i`, `batch x 2n`.
    pub context: Var,
    /// Unnormalized output scores, `batch x K_y`.
    pub logits: Var,
    pub gates: GruOutput,
}

/// One decoder step from `s_{i-1}` and the previous target word (`None`
/// gives the zero embedding used before the first word).
pub fn decoder_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    mode: ContextMode,
    s_prev: Var,
    y_prev: &[Option<TokenId>],
    ann: &Annotations<T>,
) -> Result<StepVars> {
    if y_prev.len() != ann.batch {
        return Err(Error::invalid(format!(
            "decoder step got {} previous words for a batch of {}",
            y_prev.len(),
            ann.batch
        )));
    }
    if let Some(bad) = y_prev.iter().flatten().find(|&&id| id >= pv.dims.k_tgt) {
        return Err(Error::invalid(format!(
            "previous word id {bad} outside target vocabulary of {}",
            pv.dims.k_tgt
        )));
    }
    let (alpha, context) = match mode {
        ContextMode::Attention => {
            let e = align_energy(tape, pv, s_prev, ann)?;
            let (a, c) = attend(tape, e, ann)?;
            (Some(a), c)
        }
        ContextMode::Fixed => {
            let pad = tape.constant(Tensor::zeros(ann.batch, pv.dims.n));
            (None, tape.concat(&[ann.forward_last, pad])?)
        }
    };
    let emb = tape.lookup(pv.tgt_embed, y_prev.to_vec())?;
    let gates = gru_step(tape, pv, GruKind::Decoder, emb, s_prev, Some(context))?;
    let logits = output_logits(tape, pv, s_prev, emb, context)?;
    Ok(StepVars {
        state: gates.state,
        alpha,
        context,
        logits,
        gates,
    })
}

/// Teacher-forced pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Mean over sentences of the summed per-token NLL (1x1).
    pub loss: Var,
    /// Summed NLL over the whole batch (1x1).
    pub total: Var,
    pub steps: Vec<StepVars>,
    pub annotations: Annotations<T>,
}

/// Negative log-likelihood of the reference targets with the reference
/// previous word fed at every step. Padded steps contribute nothing.
pub fn forward_nll<T: Scalar>(
    tape: &mut Tape<'_, T>,
    pv: &ParamVars,
    mode: ContextMode,
    batch: &Batch,
) -> Result<ForwardOutput<T>> {
    let ann = encode(tape, pv, mode, &batch.source, &batch.source_mask, batch.size, batch.src_len)?;
    let mut s = decoder_init(tape, pv, &ann)?;
    let mut total: Option<Var> = None;
    let mut steps = Vec::with_capacity(batch.tgt_len);
    for i in 0..batch.tgt_len {
        let y_prev: Vec<Option<TokenId>> = (0..batch.size)
            .map(|b| (i > 0).then(|| batch.target[b * batch.tgt_len + i - 1]))
            .collect();
        let step = decoder_step(tape, pv, mode, s, &y_prev, &ann)?;
        let targets: Vec<TokenId> = (0..batch.size).map(|b| batch.target[b * batch.tgt_len + i]).collect();
        let weights: Vec<T> = (0..batch.size)
            .map(|b| {
                if batch.target_mask[b * batch.tgt_len + i] {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        let nll = tape.nll(step.logits, targets, weights)?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
        s = step.state;
        steps.push(step);
    }
    let total = total.ok_or_else(|| Error::invalid("batch has no target steps"))?;
    let loss = tape.scale(total, T::one() / T::from_usize(batch.size).unwrap())?;
    Ok(ForwardOutput {
        loss,
        total,
        steps,
        annotations: ann,
    })
}

/// Per-sentence summed NLL read off a finished forward pass.
pub fn sentence_nlls<T: Scalar>(tape: &Tape<'_, T>, out: &ForwardOutput<T>, batch: &Batch) -> Vec<T> {
    let mut nll = vec![T::zero(); batch.size];
    let mut lp = vec![T::zero(); tape.value(out.steps[0].logits).cols()];
    for (i, step) in out.steps.iter().enumerate() {
        let logits = tape.value(step.logits);
        for (b, acc) in nll.iter_mut().enumerate() {
            let k = b * batch.tgt_len + i;
            if batch.target_mask[k] {
                log_softmax_into(logits.row(b), &mut lp);
                *acc -= lp[batch.target[k]];
            }
        }
    }
    nll
}

impl<T: Scalar> Model<T> {
    /// Mean per-sentence NLL of a batch.
    pub fn batch_nll(&self, batch: &Batch) -> Result<T> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, self);
        let out = forward_nll(&mut tape, &pv, self.mode, batch)?;
        Ok(tape.value(out.loss).item())
    }

    /// Summed NLL of every sentence in the batch, in batch order.
    pub fn sentence_nlls(&self, batch: &Batch) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, self);
        let out = forward_nll(&mut tape, &pv, self.mode, batch)?;
        Ok(sentence_nlls(&tape, &out, batch))
    }

    /// Mean per-sentence NLL and its gradient for every parameter.
    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(T, GradientSet<T>)> {
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, self);
        let out = forward_nll(&mut tape, &pv, self.mode, batch)?;
        let grads = tape.backward(out.loss, &self.params)?;
        Ok((tape.value(out.loss).item(), grads))
    }
}
