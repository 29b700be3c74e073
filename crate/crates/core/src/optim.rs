//! First-order optimizers over [`Parameterized`] models.

use std::fmt;
use std::str::FromStr;

use crate::param::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            )),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Optimizer state for one model. Gradients passed to [`Optimizer::descend`]
/// are gradients of a loss to be minimized.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn descend<P: Parameterized>(&mut self, params: &mut P, grad: &P) {
        let grads: Vec<Vec<f64>> = grad
            .named_params()
            .into_iter()
            .map(|(_, t)| t.data.clone())
            .collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.params_mut().into_iter().zip(&grads) {
                    for (x, d) in p.data.iter_mut().zip(g) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.step += 1;
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for (k, (p, g)) in params.params_mut().into_iter().zip(&grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for j in 0..g.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Tensor;

    #[derive(Clone)]
    struct Quad(Tensor);

    impl Parameterized for Quad {
        fn named_params(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Quad(Tensor::filled(&[3], 2.0));
            let mut opt = Optimizer::new(kind, 0.1);
            for _ in 0..500 {
                let g = Quad(Tensor {
                    shape: vec![3],
                    data: p.0.data.iter().map(|x| 2.0 * x).collect(),
                });
                opt.descend(&mut p, &g);
            }
            assert!(p.sq_norm() < 1e-4, "{kind}: {:?}", p.0.data);
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Quad(Tensor::filled(&[2], 1.5));
            let before = p.0.clone();
            let mut opt = Optimizer::new(kind, 0.1);
            opt.descend(&mut p, &Quad(Tensor::zeros(&[2])));
            assert_eq!(p.0, before);
        }
    }
}
