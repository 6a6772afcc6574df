//! The attention-based translation network and its fixed-context baseline.
//!
//! [`Model`] owns the dimensions, the context mode, and every weight in a
//! [`NamedTensors`] table. The batched computation graph lives in
//! [`network`]; it records onto an autograd [`Tape`](crate::autograd::Tape)
//! both for training and for inference.

pub mod network;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::named::NamedTensors;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use network::{
    align_energy, attend, decoder_init, decoder_step, encode, forward_nll, gru_step, output_logits, sentence_nlls,
    Annotations, EncodedSource, ForwardOutput, GruKind, GruOutput, ParamVars, StepVars,
};

/// Layer sizes: `n` recurrent units, `m` embedding width, `l` maxout units,
/// `n_align` alignment hidden units, and the two vocabulary sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub n_align: usize,
    pub k_src: usize,
    pub k_tgt: usize,
}

impl ModelDims {
    /// Sizes used for the full-scale translation experiments.
    pub fn full_scale(k_src: usize, k_tgt: usize) -> Self {
        ModelDims {
            n: 1000,
            m: 620,
            l: 500,
            n_align: 1000,
            k_src,
            k_tgt,
        }
    }

    /// Small default for desk-scale runs.
    pub fn desk_scale(k_src: usize, k_tgt: usize) -> Self {
        ModelDims {
            n: 32,
            m: 16,
            l: 16,
            n_align: 32,
            k_src,
            k_tgt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n", self.n),
            ("m", self.m),
            ("l", self.l),
            ("n_align", self.n_align),
            ("k_src", self.k_src),
            ("k_tgt", self.k_tgt),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("model dimension {name} must be >= 1")));
            }
        }
        if self.k_src < 2 || self.k_tgt < 2 {
            return Err(Error::invalid("vocabularies need room for the two reserved symbols"));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        param_specs(self).iter().map(|s| s.rows * s.cols).sum()
    }
}

/// Where the decoder gets its per-step context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextMode {
    /// Soft attention over all annotations.
    Attention,
    /// Every step sees the last forward encoder state (the plain
    /// encoder-decoder baseline). Alignment weights are never computed.
    Fixed,
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(ContextMode::Attention),
            "fixed" => Ok(ContextMode::Fixed),
            other => Err(Error::invalid(format!(
                "unknown context mode {other:?} (expected attention or fixed)"
            ))),
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::Attention => "attention",
            ContextMode::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Orthogonal,
    Gaussian(f64),
    Zero,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

const GATED_PREFIXES: [&str; 3] = ["enc_fwd", "enc_bwd", "dec"];
const WEIGHT_STD: f64 = 0.01;
const ALIGN_STD: f64 = 0.001;

/// Every parameter with its shape and initializer, in canonical order.
pub(crate) fn param_specs(d: &ModelDims) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, init: Init| specs.push(ParamSpec { name, rows, cols, init });
    push("src_embed".into(), d.m, d.k_src, Init::Gaussian(WEIGHT_STD));
    push("tgt_embed".into(), d.m, d.k_tgt, Init::Gaussian(WEIGHT_STD));
    for prefix in GATED_PREFIXES {
        for gate in ["", "_z", "_r"] {
            push(format!("{prefix}.W{gate}"), d.n, d.m, Init::Gaussian(WEIGHT_STD));
            push(format!("{prefix}.U{gate}"), d.n, d.n, Init::Orthogonal);
            if prefix == "dec" {
                push(format!("{prefix}.C{gate}"), d.n, 2 * d.n, Init::Gaussian(WEIGHT_STD));
            }
            push(format!("{prefix}.b{gate}"), 1, d.n, Init::Zero);
        }
    }
    push("init.W_s".into(), d.n, d.n, Init::Gaussian(WEIGHT_STD));
    push("init.b_s".into(), 1, d.n, Init::Zero);
    push("align.W_a".into(), d.n_align, d.n, Init::Gaussian(ALIGN_STD));
    push("align.U_a".into(), d.n_align, 2 * d.n, Init::Gaussian(ALIGN_STD));
    push("align.b_a".into(), 1, d.n_align, Init::Zero);
    push("align.v_a".into(), 1, d.n_align, Init::Zero);
    push("out.U_o".into(), 2 * d.l, d.n, Init::Gaussian(WEIGHT_STD));
    push("out.V_o".into(), 2 * d.l, d.m, Init::Gaussian(WEIGHT_STD));
    push("out.C_o".into(), 2 * d.l, 2 * d.n, Init::Gaussian(WEIGHT_STD));
    push("out.b_t".into(), 1, 2 * d.l, Init::Zero);
    push("out.W_o".into(), d.k_tgt, d.l, Init::Gaussian(WEIGHT_STD));
    push("out.b_o".into(), 1, d.k_tgt, Init::Zero);
    specs
}

/// Names of the parameters only the attention path reads.
pub const ALIGNMENT_PARAMS: [&str; 4] = ["align.W_a", "align.U_a", "align.b_a", "align.v_a"];

/// Names of the nine recurrent transition matrices.
pub fn recurrent_param_names() -> Vec<String> {
    GATED_PREFIXES
        .iter()
        .flat_map(|p| ["U", "U_z", "U_r"].map(|u| format!("{p}.{u}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub mode: ContextMode,
    pub params: NamedTensors<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters: orthogonal recurrent matrices, N(0, 0.001²) for the
    /// alignment projections, zero `v_a` and biases, N(0, 0.01²) elsewhere.
    pub fn init(dims: ModelDims, mode: ContextMode, rng: &mut RngState) -> Result<Self> {
        dims.validate()?;
        let mut params = NamedTensors::new();
        for spec in param_specs(&dims) {
            let t = match spec.init {
                Init::Orthogonal => Tensor::orthogonal_init(rng, spec.rows)?,
                Init::Gaussian(std) => {
                    Tensor::gaussian_fill(rng, spec.rows, spec.cols, T::zero(), T::from_f64_lossy(std))?
                }
                Init::Zero => Tensor::zeros(spec.rows, spec.cols),
            };
            params.insert(spec.name, t)?;
        }
        Ok(Model { dims, mode, params })
    }

    /// Wraps an existing parameter table after checking it against `dims`.
    pub fn from_params(dims: ModelDims, mode: ContextMode, params: NamedTensors<T>) -> Result<Self> {
        dims.validate()?;
        let specs = param_specs(&dims);
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", spec.name)))?;
            if t.shape() != (spec.rows, spec.cols) {
                return Err(Error::Shape {
                    op: "parameter table",
                    left: (spec.rows, spec.cols),
                    right: t.shape(),
                });
            }
        }
        Ok(Model { dims, mode, params })
    }

    pub fn set_context_mode(&mut self, mode: ContextMode) {
        self.mode = mode;
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            dims: self.dims,
            mode: self.mode,
            params: self.params.cast(),
        }
    }
}
