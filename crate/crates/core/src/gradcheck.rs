//! End-to-end gradient fidelity check: tape gradients of the full model loss
//! against central finite differences, at 64-bit.

use crate::autograd::{finite_diff_grad, max_relative_error, Fault, Tape};
use crate::data::{Batch, EncodedPair, EOS};
use crate::error::Result;
use crate::model::{forward_nll, ContextMode, Model, ModelDims, ParamVars};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub dims: ModelDims,
    pub mode: ContextMode,
    pub seed: u64,
    pub sentences: usize,
    /// Longest source, EOS included.
    pub max_source: usize,
    /// Longest target, EOS included.
    pub max_target: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Spread of the random perturbation added to the initial parameters so
    /// the check runs away from the near-linear initial regime.
    pub param_noise: f64,
    pub fault: Option<Fault>,
}

impl GradcheckConfig {
    /// Tiny dimensions that keep the full check well under a second.
    pub fn tiny(mode: ContextMode, seed: u64) -> Self {
        GradcheckConfig {
            dims: ModelDims {
                n: 8,
                m: 6,
                l: 4,
                n_align: 7,
                k_src: 11,
                k_tgt: 11,
            },
            mode,
            seed,
            sentences: 2,
            max_source: 5,
            max_target: 4,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            param_noise: 0.3,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub analytic_norm: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub mode: ContextMode,
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

/// Random batch with distinct lengths so padding is exercised.
pub fn random_batch(cfg: &GradcheckConfig, rng: &mut RngState) -> Result<Batch> {
    let pairs: Vec<EncodedPair> = (0..cfg.sentences)
        .map(|i| {
            let src_len = if i == 0 { cfg.max_source } else { rng.below(1, cfg.max_source + 1) };
            let tgt_len = if i == 1 { cfg.max_target } else { rng.below(1, cfg.max_target + 1) };
            let mut source: Vec<usize> = (1..src_len).map(|_| rng.below(1, cfg.dims.k_src)).collect();
            source.push(EOS);
            let mut target: Vec<usize> = (1..tgt_len).map(|_| rng.below(1, cfg.dims.k_tgt)).collect();
            target.push(EOS);
            EncodedPair { source, target }
        })
        .collect();
    let refs: Vec<&EncodedPair> = pairs.iter().collect();
    Batch::from_pairs(&refs)
}

/// Perturbed random model used by the check.
pub fn random_model(cfg: &GradcheckConfig, rng: &mut RngState) -> Result<Model<f64>> {
    let mut model = Model::<f64>::init(cfg.dims, cfg.mode, rng)?;
    for t in model.params.tensors_mut() {
        let noise = Tensor::gaussian_fill(rng, t.rows(), t.cols(), 0.0, cfg.param_noise)?;
        t.add_assign(&noise);
    }
    Ok(model)
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = RngState::new(cfg.seed);
    let model = random_model(cfg, &mut rng)?;
    let batch = random_batch(cfg, &mut rng)?;

    let mut tape = Tape::new();
    if let Some(f) = cfg.fault {
        tape.inject_fault(f);
    }
    let pv = ParamVars::register(&mut tape, &model);
    let out = forward_nll(&mut tape, &pv, cfg.mode, &batch)?;
    let analytic = tape.backward(out.loss, &model.params)?;

    let numeric = finite_diff_grad(
        |params| {
            let probe = Model {
                dims: model.dims,
                mode: model.mode,
                params: params.clone(),
            };
            probe.batch_nll(&batch)
        },
        &model.params,
        cfg.step,
    )?;

    let params = (0..model.params.len())
        .map(|i| ParamCheck {
            name: model.params.name(i).to_string(),
            max_relative_error: max_relative_error(analytic.at(i), numeric.at(i)),
            analytic_norm: analytic.at(i).sum_squares().sqrt(),
        })
        .collect();
    Ok(GradcheckReport {
        mode: cfg.mode,
        params,
        tolerance: cfg.tolerance,
    })
}
