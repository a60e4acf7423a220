//! First-order optimizers over a flat list of parameter tensors.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            Self::Sgd { .. } => Self::Sgd { lr },
            Self::Adam { beta1, beta2, eps, .. } => Self::Adam { lr, beta1, beta2, eps },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if let Self::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

impl FromStr for OptimizerConfig {
    type Err = Error;

    /// Parses `sgd` or `adam`, using the default learning rate.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd { lr: 1e-3 }),
            "adam" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Optimizer with its moment buffers and update counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        let (m, v) = match config {
            OptimizerConfig::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerConfig::Adam { .. } => (zeros(), zeros()),
        };
        Ok(Self { config, step: 0, m, v })
    }

    /// Applies one update to every parameter.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return contract(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "optimizer",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * gi;
                    }
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    return contract("optimizer state was built for a different parameter set");
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (j, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gi;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gi * gi;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![Tensor::new([2], vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::new([2], vec![0.5, 2.0]).unwrap()];
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }, &p).unwrap();
        opt.apply(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.05, -1.0 - 0.2]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new([3], vec![0.0; 3]).unwrap()];
        let g = vec![Tensor::new([3], vec![3.0, -0.01, 0.0]).unwrap()];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &p).unwrap();
        opt.apply(&mut p, &g).unwrap();
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-5);
        assert_eq!(p[0].data()[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Tensor::new([1], vec![5.0]).unwrap()];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &p).unwrap();
        for _ in 0..500 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.0))];
            opt.apply(&mut p, &g).unwrap();
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_mismatches_and_bad_config() {
        let mut p = vec![Tensor::zeros([2])];
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 }, &p).unwrap();
        assert!(opt.apply(&mut p, &[Tensor::zeros([3])]).is_err());
        assert!(opt.apply(&mut p, &[]).is_err());
        assert!(Optimizer::new(OptimizerConfig::Sgd { lr: -0.1 }, &p).is_err());
        assert!("rmsprop".parse::<OptimizerConfig>().is_err());
    }
}
