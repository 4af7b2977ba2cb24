use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    /// Plain SGD when `momentum == 0`.
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over a list of flat parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32) -> Self {
        Self {
            kind,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>], lr: f32) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[k];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for i in 0..p.len() {
                        let gi = g[i] + self.weight_decay * p[i];
                        if momentum > 0.0 {
                            m[i] = momentum * m[i] + gi;
                            p[i] -= lr * m[i];
                        } else {
                            p[i] -= lr * gi;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.v[k];
                    let bc1 = 1.0 - beta1.powi(self.t);
                    let bc2 = 1.0 - beta2.powi(self.t);
                    for i in 0..p.len() {
                        let gi = g[i] + self.weight_decay * p[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = step as f32 / total as f32;
    0.5 * base * (1.0 + (std::f32::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_is_exact_update() {
        let mut p = vec![1.0f32, -2.0];
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.0);
        opt.step(vec![&mut p[..]], &[vec![0.5, 0.25]], 0.1);
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0f32];
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.0);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0]];
            opt.step(vec![&mut p[..]], &[g], 0.01);
        }
        assert!(p[0].abs() < 1e-2);
    }
}
