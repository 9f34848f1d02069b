use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`ParamSet`]: first/second moments and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => {
                let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
                (zeros.clone(), zeros)
            }
        };
        Self {
            kind,
            step: 0,
            first_moment: m,
            second_moment: v,
        }
    }

    pub fn sgd(params: &ParamSet) -> Self {
        Self::new(OptimizerKind::Sgd, params)
    }

    pub fn adam(params: &ParamSet) -> Self {
        Self::new(OptimizerKind::adam(), params)
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if let Some((_, name, _)) = params.iter().find(|(_, _, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for t in params.tensors_mut() {
                    let g = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
                    t.values_mut().iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::InvalidArgument(
                        "optimizer state does not match parameter set".into(),
                    ));
                }
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for ((t, m), v) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    let g = t.grad().map(<[f64]>::to_vec).unwrap_or_default();
                    for (((w, g), m), v) in t.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}

pub fn opt_step(params: &mut ParamSet, optimizer: &mut Optimizer, lr: f64) -> Result<()> {
    optimizer.step(params, lr)
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in params.tensors_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|x| x * s).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tensor};

    fn one(w: f64, g: Option<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        let id = p.insert("w", Tensor::scalar(w).unwrap()).unwrap();
        if let Some(g) = g {
            p.get_mut(id).accumulate_grad(&[g]).unwrap();
        }
        p
    }

    #[test]
    fn sgd_rule() {
        let mut p = one(1.0, Some(0.5));
        let mut opt = Optimizer::sgd(&p);
        opt_step(&mut p, &mut opt, 0.1).unwrap();
        assert!((p.get(ParamId(0)).values()[0] - 0.95).abs() < 1e-15);
        assert!(p.get(ParamId(0)).grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut p = one(1.25, Some(0.0));
            let mut opt = Optimizer::new(kind, &p);
            opt.step(&mut p, 0.1).unwrap();
            assert_eq!(p.get(ParamId(0)).values(), &[1.25]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_grad() {
        // m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        for g in [3.0, -0.02] {
            let mut p = one(0.0, Some(g));
            let mut opt = Optimizer::adam(&p);
            opt.step(&mut p, 0.01).unwrap();
            let w = p.get(ParamId(0)).values()[0];
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
            assert_eq!(w.signum(), -g.signum());
        }
    }

    #[test]
    fn missing_grad_names_param() {
        let mut p = one(1.0, None);
        let mut opt = Optimizer::sgd(&p);
        let err = opt.step(&mut p, 0.1).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = one(0.0, Some(10.0));
        let before = clip_grad_norm(&mut p, 1.0);
        assert_eq!(before, 10.0);
        assert!((p.get(ParamId(0)).grad().unwrap()[0] - 1.0).abs() < 1e-12);
    }
}
