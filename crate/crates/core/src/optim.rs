//! Stochastic gradient descent with momentum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
        }
    }
}

/// `v ← μ v + g`, `w ← w − η v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(Sgd {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], precision: Precision) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.len() != grads.len() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        let SgdConfig { learning_rate: lr, momentum: mu } = self.config;
        for ((w, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            if w.shape() != g.shape() {
                return Err(Error::shape("sgd", format!("gradient {:?} for parameter {:?}", g.shape(), w.shape())));
            }
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = precision.round(mu * *vi + gi);
                *wi = precision.round(*wi - lr * *vi);
            }
        }
        Ok(())
    }
}

/// Element-wise mean of per-sample gradient lists, summed in sample order.
pub fn mean_gradients(per_sample: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::Contract("no gradients to average".into()))?;
    let mut acc: Vec<Tensor> = first.clone();
    for grads in &per_sample[1..] {
        for (a, g) in acc.iter_mut().zip(grads) {
            a.add_assign(g)?;
        }
    }
    let scale = 1.0 / per_sample.len() as f64;
    for a in &mut acc {
        a.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ModelParams {
        let mut p = ModelParams::empty();
        p.insert("w", Tensor::from_vec(vec![v]));
        p
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = one_param(1.0);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 0.5,
        })
        .unwrap();
        let g = vec![Tensor::from_vec(vec![1.0])];
        opt.step(&mut p, &g, Precision::F64).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-15);
        opt.step(&mut p, &g, Precision::F64).unwrap();
        // v = 0.5 * 1 + 1 = 1.5
        assert!((p.get("w").unwrap().item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let mut p = one_param(0.3);
        let mut opt = Sgd::new(SgdConfig {
            learning_rate: 0.0,
            momentum: 0.9,
        })
        .unwrap();
        opt.step(&mut p, &[Tensor::from_vec(vec![5.0])], Precision::F64).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.3);
    }

    #[test]
    fn mean_of_gradients() {
        let a = vec![Tensor::from_vec(vec![1.0, 2.0])];
        let b = vec![Tensor::from_vec(vec![3.0, -2.0])];
        let m = mean_gradients(&[a, b]).unwrap();
        assert_eq!(m[0].data(), &[2.0, 0.0]);
        assert!(mean_gradients(&[]).is_err());
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Sgd::new(SgdConfig {
            learning_rate: -1.0,
            momentum: 0.9
        })
        .is_err());
        assert!(Sgd::new(SgdConfig {
            learning_rate: 0.1,
            momentum: 1.0
        })
        .is_err());
    }
}
