use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    /// Squared-cosine cumulative schedule with offset `s`.
    Cosine { s: f64 },
}

/// Variance-preserving forward process:
/// `x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Self {
        assert!(steps >= 2, "schedule needs at least two timesteps");
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear { beta_start, beta_end } => (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine { s } => {
                let f = |u: f64| {
                    let a = ((u / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
                    a.cos().powi(2)
                };
                (0..steps)
                    .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self {
            kind,
            steps,
            betas,
            alpha_bars,
        }
    }

    pub fn cosine(steps: usize) -> Self {
        Self::new(ScheduleKind::Cosine { s: 0.008 }, steps)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps {
            return Err(Error::TimestepOutOfRange { t, steps: self.steps });
        }
        Ok(())
    }

    /// `(signal, noise)` coefficients at `t`.
    pub fn coefficients(&self, t: usize) -> Result<(f32, f32)> {
        self.check(t)?;
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt() as f32, (1.0 - ab).sqrt() as f32))
    }

    pub fn add_noise(&self, x0: &[f32], t: usize, eps: &[f32]) -> Result<Vec<f32>> {
        if x0.len() != eps.len() {
            return Err(Error::Other("noise shape differs from image shape".into()));
        }
        let (a, b) = self.coefficients(t)?;
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// `n` evenly spaced timesteps from `steps - 1` down to 0.
    pub fn sampling_timesteps(&self, n: usize) -> Vec<usize> {
        let n = n.clamp(1, self.steps);
        if n == 1 {
            return vec![self.steps - 1];
        }
        (0..n)
            .map(|k| ((n - 1 - k) * (self.steps - 1)) / (n - 1))
            .collect()
    }
}
