use super::config::{OptimizerConfig, OptimizerKind};
use crate::numerics::Matrix;

/// Adam with decoupled weight decay, or SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            cfg: cfg.clone(),
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first.len());
        self.steps = self.steps.saturating_add(1);
        let wd = self.cfg.weight_decay;
        match self.cfg.kind {
            OptimizerKind::Adam => {
                let [b1, b2] = self.cfg.betas;
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - b2.powi(self.steps);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    let it = p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
                    for ((w, &gi), (mi, vi)) in it {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
                        *w -= lr * (update + wd * *w);
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = self.cfg.momentum;
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let vel = &mut self.first[k];
                    for ((w, &gi), vi) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(vel.as_mut_slice()) {
                        *vi = mu * *vi + gi + wd * *w;
                        *w -= lr * *vi;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_descent(cfg: OptimizerConfig, lr: f64) -> f64 {
        let mut w = Matrix::from_rows(&[[3.0, -2.0]]).unwrap();
        let mut opt = Optimizer::new(&cfg, &[(1, 2)]);
        for _ in 0..500 {
            let g = w.scale(2.0);
            opt.step(&mut [&mut w], &[g], lr);
        }
        w.frobenius_norm()
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        let adam = OptimizerConfig::default();
        assert!(quadratic_descent(adam, 0.05) < 1e-2);
        let sgd = OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            ..OptimizerConfig::default()
        };
        assert!(quadratic_descent(sgd, 0.01) < 1e-6);
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        let mut w = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let mut opt = Optimizer::new(&OptimizerConfig::default(), &[(1, 2)]);
        let g = Matrix::from_rows(&[[10.0, -0.1]]).unwrap();
        opt.step(&mut [&mut w], &[g], 0.01);
        assert!((w.get(0, 0) - 0.99).abs() < 1e-6);
        assert!((w.get(0, 1) - 1.01).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            ..OptimizerConfig::default()
        };
        let mut w = Matrix::from_rows(&[[2.0]]).unwrap();
        let mut opt = Optimizer::new(&cfg, &[(1, 1)]);
        opt.step(&mut [&mut w], &[Matrix::zeros(1, 1)], 0.5);
        assert!((w.get(0, 0) - 1.9).abs() < 1e-12);
    }
}
