use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam or plain gradient descent, with L2 weight decay folded into the
/// gradient.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| vec![0.0; t.len()]).collect();
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update step; `grads` must match `params` one to one.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape());
            let mut data = p.data().to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in data.iter_mut().zip(g.data()) {
                        let d = gi + self.weight_decay * *w;
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                        let d = gi + self.weight_decay * *w;
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * d;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * d * d;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        *w -= lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
            *p = Tensor::new(p.shape().to_vec(), data).expect("finite update");
        }
    }
}

/// Linear warmup over the first `warmup` iterations, then a multiplicative
/// drop for each entry of `drops` (epochs before the end) already reached.
/// Drops that would land before the first epoch are ignored.
pub fn scheduled_lr(
    base: f64,
    iteration: usize,
    warmup: usize,
    epoch: usize,
    epochs: usize,
    drops: &[usize],
    factor: f64,
) -> f64 {
    let mut lr = base;
    if warmup > 0 && iteration < warmup {
        lr *= (iteration + 1) as f64 / warmup as f64;
    }
    for &d in drops {
        if epochs > d && epoch >= epochs - d {
            lr *= factor;
        }
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;

    fn set(v: Vec<f64>) -> ParamSet {
        ParamSet {
            names: vec!["w".into()],
            tensors: vec![Tensor::from_vec(v)],
        }
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut p = set(vec![1.0, -2.0]);
            let before = p.clone();
            let mut opt = Optimizer::new(kind, 1e-6, &p.tensors);
            opt.update(&mut p.tensors, &[Tensor::from_vec(vec![0.3, 0.4])], 0.0);
            assert!(p.bit_eq(&before));
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = set(vec![1.0, -2.0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, &p.tensors);
        opt.update(&mut p.tensors, &[Tensor::from_vec(vec![0.5, -3.0])], 0.1);
        let d = p.tensors[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn sgd_step() {
        let mut p = set(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, &p.tensors);
        opt.update(&mut p.tensors, &[Tensor::from_vec(vec![2.0])], 0.25);
        assert_eq!(p.tensors[0].data(), &[0.5]);
    }

    #[test]
    fn schedule() {
        let lr = |it, ep| scheduled_lr(1.0, it, 4, ep, 100, &[50, 25], 0.2);
        assert_eq!(lr(0, 0), 0.25);
        assert_eq!(lr(3, 0), 1.0);
        assert_eq!(lr(10, 49), 1.0);
        assert!((lr(10, 50) - 0.2).abs() < 1e-15);
        assert!((lr(10, 75) - 0.04).abs() < 1e-15);
        // short runs keep the base rate
        assert_eq!(scheduled_lr(1.0, 10, 0, 3, 10, &[50, 25], 0.2), 1.0);
    }
}
