//! Variance schedule and the forward (noising) processes.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Linear variance schedule. Index `t` runs over `0..=T`; `t = 0` is clean
/// data with `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    /// The DDPM endpoints (1e-4, 0.02) for 1000 steps, rescaled by `1000 / T`
    /// so the total noise injected does not depend on `T`.
    pub fn linear_scaled(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps as f64;
        let beta_max = (0.02 * scale).min(0.999);
        let beta_min = (1e-4 * scale).min(beta_max / 2.0);
        Self::linear(steps, beta_min, beta_max)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1), at least two steps".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta(t)` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of the DDPM posterior q(x_{t-1} | x_t, x_0).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Whether the final step is close enough to the prior for sampling.
    pub fn reaches_prior(&self) -> bool {
        self.alpha_bar(self.steps()) < 0.01
    }
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`, element-wise.
pub fn forward_numerical(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Category probabilities of the uniform-mixing multinomial forward process:
/// `abar_t * x0 + (1 - abar_t) / K`.
pub fn forward_categorical_probs(schedule: &NoiseSchedule, x0: &[f64], t: usize) -> Vec<f64> {
    let ab = schedule.alpha_bar(t);
    let k = x0.len() as f64;
    x0.iter().map(|&p| ab * p + (1.0 - ab) / k).collect()
}

pub fn sample_category(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn forward_categorical(schedule: &NoiseSchedule, x0: &[f64], t: usize, rng: &mut Rng) -> usize {
    sample_category(&forward_categorical_probs(schedule, x0, t), rng)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sinusoidal embedding of `t` on a `[0, 1000]` scale so models trained with
/// different `T` see comparable inputs.
pub fn timestep_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pos = 1000.0 * t as f64 / steps as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}
