use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Momentum,
}

/// Linear warm-up to `peak` over `warmup` steps, then inverse-square-root decay.
pub fn learning_rate(peak: f64, warmup: usize, step: usize) -> f64 {
    let s = (step + 1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Scales all gradients so their global L2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            op: "gradient norm",
        });
    }
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for x in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *x *= k;
        }
    }
    Ok(norm)
}

/// First-order optimizer over a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    /// `beta1` doubles as the momentum coefficient for [`OptimizerKind::Momentum`].
    pub fn new(kind: OptimizerKind, params: &[Tensor], beta1: f64, beta2: f64) -> Self {
        let zeros = || params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            kind,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            m: zeros(),
            v: match kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::Momentum => Vec::new(),
            },
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            match self.kind {
                OptimizerKind::Adam => {
                    let v = &mut self.v[i];
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                    }
                }
                OptimizerKind::Momentum => {
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        m[j] = self.beta1 * m[j] + g[j];
                        *x -= lr * m[j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(1.0, 10, 9) - 1.0).abs() < 1e-12);
        assert!((learning_rate(1.0, 10, 4) - 0.5).abs() < 1e-12);
        assert!((learning_rate(1.0, 10, 39) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
        let mut bad = vec![vec![f64::NAN]];
        assert!(clip_global_norm(&mut bad, 1.0).is_err());
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Momentum] {
            let mut p = vec![Tensor::vector(vec![3.0, -2.0])];
            let mut opt = Optimizer::new(kind, &p, 0.9, 0.999);
            for _ in 0..500 {
                let g = vec![p[0].data().iter().map(|x| 2.0 * x).collect()];
                opt.step(&mut p, &g, 0.05);
            }
            assert!(
                p[0].data().iter().all(|x| x.abs() < 1e-2),
                "{kind:?}: {:?}",
                p[0].data()
            );
        }
    }
}
