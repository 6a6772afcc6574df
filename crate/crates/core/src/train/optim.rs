use crate::error::{Error, Result};
use crate::named::{GradientSet, NamedTensors};
use crate::scalar::Scalar;

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Rescales `grads` in place so their joint L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut GradientSet<T>, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::invalid(format!("clip threshold must be positive, got {threshold}")));
    }
    for (name, g) in grads.iter() {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("global gradient norm".into()));
    }
    if norm > threshold {
        let factor = T::from_f64_lossy(threshold / norm);
        for g in grads.tensors_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
    Ok(norm)
}

/// Adadelta with running averages of squared gradients and squared updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta<T> {
    rho: T,
    eps: T,
    acc_grad: NamedTensors<T>,
    acc_delta: NamedTensors<T>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(params: &NamedTensors<T>, rho: f64, eps: f64) -> Result<Self> {
        Self::check_hyper(rho, eps)?;
        Ok(Adadelta {
            rho: T::from_f64_lossy(rho),
            eps: T::from_f64_lossy(eps),
            acc_grad: params.zeros_like(),
            acc_delta: params.zeros_like(),
        })
    }

    /// Restores a state from saved accumulators.
    pub fn from_accumulators(
        rho: f64,
        eps: f64,
        acc_grad: NamedTensors<T>,
        acc_delta: NamedTensors<T>,
    ) -> Result<Self> {
        Self::check_hyper(rho, eps)?;
        if !acc_grad.same_layout(&acc_delta) {
            return Err(Error::invalid("accumulator layouts differ"));
        }
        for (name, t) in acc_grad.iter().chain(acc_delta.iter()) {
            if t.data().iter().any(|&v| !(v >= T::zero() && v.is_finite())) {
                return Err(Error::invalid(format!("accumulator {name} has a negative or non-finite entry")));
            }
        }
        Ok(Adadelta {
            rho: T::from_f64_lossy(rho),
            eps: T::from_f64_lossy(eps),
            acc_grad,
            acc_delta,
        })
    }

    fn check_hyper(rho: f64, eps: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::invalid(format!("rho must lie in [0, 1), got {rho}")));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
        }
        Ok(())
    }

    pub fn rho(&self) -> f64 {
        self.rho.to_f64_lossy()
    }

    pub fn epsilon(&self) -> f64 {
        self.eps.to_f64_lossy()
    }

    /// Running average of squared gradients.
    pub fn acc_grad(&self) -> &NamedTensors<T> {
        &self.acc_grad
    }

    /// Running average of squared updates.
    pub fn acc_delta(&self) -> &NamedTensors<T> {
        &self.acc_delta
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut NamedTensors<T>, grads: &GradientSet<T>) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.acc_grad) {
            return Err(Error::invalid("parameter, gradient and accumulator layouts differ"));
        }
        let rho = self.rho;
        let keep = T::one() - rho;
        let eps = self.eps;
        for i in 0..params.len() {
            let g = grads.at(i).data();
            let eg = self.acc_grad.at_mut(i).data_mut();
            let ed = self.acc_delta.at_mut(i).data_mut();
            let p = params.at_mut(i).data_mut();
            for k in 0..p.len() {
                eg[k] = rho * eg[k] + keep * g[k] * g[k];
                let delta = -((ed[k] + eps).sqrt() / (eg[k] + eps).sqrt()) * g[k];
                ed[k] = rho * ed[k] + keep * delta * delta;
                p[k] += delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn single(values: &[f64]) -> NamedTensors<f64> {
        let mut t = NamedTensors::new();
        t.insert("w", Tensor::row_vector(values)).unwrap();
        t
    }

    #[test]
    fn first_step_closed_form() {
        let mut params = single(&[0.0]);
        let mut opt = Adadelta::new(&params, DEFAULT_RHO, DEFAULT_EPSILON).unwrap();
        opt.step(&mut params, &single(&[1.0])).unwrap();
        let expected = -(1e-6f64 / 0.050001).sqrt();
        assert!((params.at(0).item() - expected).abs() <= 1e-9);
        assert!((expected + 4.4721e-3).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut params = single(&[0.3, -0.2]);
        let mut opt = Adadelta::new(&params, DEFAULT_RHO, DEFAULT_EPSILON).unwrap();
        opt.step(&mut params, &single(&[1.0, -2.0])).unwrap();
        let before = params.clone();
        let eg = opt.acc_grad().at(0).clone();
        let ed = opt.acc_delta().at(0).clone();
        opt.step(&mut params, &single(&[0.0, 0.0])).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.acc_grad().at(0), &eg.scale(0.95));
        assert_eq!(opt.acc_delta().at(0), &ed.scale(0.95));
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut params = single(&[0.0]);
        let mut opt = Adadelta::new(&params, DEFAULT_RHO, DEFAULT_EPSILON).unwrap();
        assert!(opt.step(&mut params, &single(&[1.0, 2.0])).is_err());
        assert!(Adadelta::new(&params, 1.0, 1e-6).is_err());
        assert!(Adadelta::new(&params, 0.9, 0.0).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = single(&[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g, single(&[0.3, 0.4]));

        let mut g = single(&[1.2, 1.6]);
        let norm = clip_gradients(&mut g, 1.0).unwrap();
        assert!((norm - 2.0).abs() < 1e-15);
        assert!((g.at(0).get(0, 0) - 0.6).abs() < 1e-15);
        assert!((g.at(0).get(0, 1) - 0.8).abs() < 1e-15);
        assert!((g.global_norm() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn clip_rejects_non_finite_with_name() {
        let mut g = single(&[1.0, f64::NAN]);
        let err = clip_gradients(&mut g, 1.0).unwrap_err().to_string();
        assert!(err.contains('w'), "{err}");
        assert!(clip_gradients(&mut single(&[1.0]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_keeps_direction(
            a in prop::collection::vec(-50.0f64..50.0, 1..12),
            b in prop::collection::vec(-50.0f64..50.0, 1..12),
            threshold in 0.01f64..5.0,
        ) {
            let mut g = NamedTensors::new();
            g.insert("a", Tensor::row_vector(&a)).unwrap();
            g.insert("b", Tensor::row_vector(&b)).unwrap();
            let orig = g.clone();
            let norm = clip_gradients(&mut g, threshold).unwrap();
            prop_assert!(g.global_norm() <= threshold + 1e-12);
            let factor = if norm > threshold { threshold / norm } else { 1.0 };
            for (x, y) in orig.tensors().iter().zip(g.tensors()) {
                for (&u, &v) in x.data().iter().zip(y.data()) {
                    prop_assert!((u * factor - v).abs() <= 1e-12 * u.abs().max(1.0));
                }
            }
        }

        #[test]
        fn update_opposes_gradient(g in prop::collection::vec(-1e3f64..1e3, 1..16), steps in 1usize..4) {
            let mut params = single(&vec![0.0; g.len()]);
            let mut opt = Adadelta::new(&params, DEFAULT_RHO, DEFAULT_EPSILON).unwrap();
            let grads = single(&g);
            for _ in 0..steps {
                let before = params.clone();
                opt.step(&mut params, &grads).unwrap();
                for (k, &gk) in g.iter().enumerate() {
                    let d = params.at(0).data()[k] - before.at(0).data()[k];
                    prop_assert!(d.is_finite());
                    if gk != 0.0 {
                        prop_assert_eq!(d.signum(), -gk.signum());
                    }
                }
                prop_assert!(opt.acc_grad().at(0).data().iter().all(|&v| v >= 0.0));
                prop_assert!(opt.acc_delta().at(0).data().iter().all(|&v| v >= 0.0));
            }
        }
    }
}
