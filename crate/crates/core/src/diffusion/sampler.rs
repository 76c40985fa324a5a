//! Reverse-process stepping shared by the DDPM and the distilled sampler.

use super::denoiser::{categorical_posterior, TabularDenoiser};
use super::schedule::{sample_category, standard_normal, NoiseSchedule};
use crate::data::EncodedLayout;
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Mat};
use crate::rng::Rng;

/// Bound applied to predicted clean numerical values. Quantile-normal
/// features never leave about ±5.2.
pub const X0_CLIP: f64 = 6.0;

/// A reverse-process walker over encoded rows.
pub trait Sampler: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn layout(&self) -> &EncodedLayout;

    /// Descending timesteps visited when starting at `tau`, ending at 0.
    fn grid_from(&self, tau: usize) -> Vec<usize>;

    /// Moves every row from step `t` to step `s < t`. `logit_nudge`, when
    /// given, is added to the categorical logits (same width as the
    /// categorical block) before the posterior is formed. Row `r` draws its
    /// randomness from `rngs[r]` only.
    fn step(&self, x: &Mat, t: usize, s: usize, logit_nudge: Option<&Mat>, rngs: &mut [Rng]) -> Result<Mat>;
}

/// Samples the categorical part of a reverse step from raw model logits.
/// At `s = 0` the most probable category is taken so the last step is
/// deterministic.
pub(crate) fn categorical_step(
    layout: &EncodedLayout,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    out_row: &[f64],
    nudge: Option<&[f64]>,
    t: usize,
    s: usize,
    dst: &mut [f64],
    rng: &mut Rng,
) {
    let mut off = 0;
    for g in &layout.groups {
        let mut logits = out_row[g.range()].to_vec();
        if let Some(n) = nudge {
            logits.iter_mut().zip(&n[off..off + g.k]).for_each(|(l, d)| *l += d);
        }
        softmax_in_place(&mut logits);
        let post = categorical_posterior(&x_t[g.range()], &logits, schedule.alpha_bar(t), schedule.alpha_bar(s));
        let c = if s == 0 {
            crate::data::argmax(&post)
        } else {
            sample_category(&post, rng)
        };
        dst[g.range()].iter_mut().for_each(|v| *v = 0.0);
        dst[g.start + c] = 1.0;
        off += g.k;
    }
}

pub(crate) fn check_step(x: &Mat, layout: &EncodedLayout, t: usize, s: usize, rngs: &[Rng]) -> Result<()> {
    if s >= t {
        return Err(Error::InvalidArgument(format!("reverse step must decrease t, got {t} -> {s}")));
    }
    if x.cols() != layout.width() {
        return Err(Error::shape("reverse step width", layout.width(), x.cols()));
    }
    if rngs.len() != x.rows() {
        return Err(Error::shape("reverse step rng count", x.rows(), rngs.len()));
    }
    Ok(())
}

/// DDPM posterior step for the numerical block given a predicted clean
/// value; adds `sqrt(var) * noise` unless `s = 0`.
pub(crate) fn numerical_posterior(
    schedule: &NoiseSchedule,
    x_t: f64,
    x0_hat: f64,
    t: usize,
    s: usize,
    rng: &mut Rng,
) -> f64 {
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let a_ts = ab_t / ab_s;
    let b_ts = 1.0 - a_ts;
    let mean = ab_s.sqrt() * b_ts / (1.0 - ab_t) * x0_hat + a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t) * x_t;
    if s == 0 {
        mean
    } else {
        let var = b_ts * (1.0 - ab_s) / (1.0 - ab_t);
        mean + var.sqrt() * standard_normal(rng)
    }
}

impl Sampler for TabularDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn layout(&self) -> &EncodedLayout {
        &self.model.layout
    }

    fn grid_from(&self, tau: usize) -> Vec<usize> {
        (0..=tau.min(self.schedule.steps())).rev().collect()
    }

    fn step(&self, x: &Mat, t: usize, s: usize, logit_nudge: Option<&Mat>, rngs: &mut [Rng]) -> Result<Mat> {
        let layout = &self.model.layout;
        check_step(x, layout, t, s, rngs)?;
        let out = self.model.forward_at(x, t)?;
        let ab_t = self.schedule.alpha_bar(t);
        let mut next = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let (xr, o) = (x.row(r), out.row(r));
            let rng = &mut rngs[r];
            let dst = next.row_mut(r);
            for j in 0..layout.num {
                let x0 = ((xr[j] - (1.0 - ab_t).sqrt() * o[j]) / ab_t.sqrt()).clamp(-X0_CLIP, X0_CLIP);
                dst[j] = numerical_posterior(&self.schedule, xr[j], x0, t, s, rng);
            }
            let nudge = logit_nudge.map(|m| m.row(r));
            categorical_step(layout, &self.schedule, xr, o, nudge, t, s, dst, rng);
        }
        Ok(next)
    }
}

/// One DDPM reverse step `t -> t - 1`.
pub fn reverse_step(denoiser: &TabularDenoiser, x_t: &Mat, t: usize, rngs: &mut [Rng]) -> Result<Mat> {
    if t == 0 {
        return Err(Error::InvalidArgument("reverse step from t = 0".into()));
    }
    denoiser.step(x_t, t, t - 1, None, rngs)
}

/// Runs the sampler from `x` at step `tau` down to 0 without guidance.
pub fn sample_from(sampler: &dyn Sampler, x: Mat, tau: usize, rngs: &mut [Rng]) -> Result<Mat> {
    let grid = sampler.grid_from(tau);
    let mut x = x;
    for w in grid.windows(2) {
        x = sampler.step(&x, w[0], w[1], None, rngs)?;
    }
    Ok(x)
}

/// Draws `rngs.len()` rows from the prior and denoises them to data.
pub fn sample_prior(sampler: &dyn Sampler, rngs: &mut [Rng]) -> Result<Mat> {
    let layout = sampler.layout();
    let mut x = Mat::zeros(rngs.len(), layout.width());
    for (r, rng) in rngs.iter_mut().enumerate() {
        let row = x.row_mut(r);
        for v in &mut row[..layout.num] {
            *v = standard_normal(rng);
        }
        for g in &layout.groups {
            let c = sample_category(&vec![1.0; g.k], rng);
            row[g.start + c] = 1.0;
        }
    }
    let tau = sampler.schedule().steps();
    sample_from(sampler, x, tau, rngs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn terminal_step_adds_no_noise() {
        let s = NoiseSchedule::linear_scaled(10).unwrap();
        let mut a = rng_from(1, &[]);
        let mut b = rng_from(2, &[]);
        let x = numerical_posterior(&s, 0.3, 0.25, 1, 0, &mut a);
        let y = numerical_posterior(&s, 0.3, 0.25, 1, 0, &mut b);
        assert_eq!(x, y);
        // abar_0 = 1 makes the posterior mean the clean prediction itself
        assert!((x - 0.25).abs() < 1e-12);
    }

    #[test]
    fn exact_clean_prediction_is_recovered() {
        // an oracle that knows x0 predicts the clean value at every step
        let s = NoiseSchedule::linear_scaled(200).unwrap();
        let x0 = [1.3, -0.4, 2.2, 0.0];
        let mut rng = rng_from(3, &[]);
        let mut x: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
        for t in (1..=200).rev() {
            for (xi, &c) in x.iter_mut().zip(&x0) {
                *xi = numerical_posterior(&s, *xi, c, t, t - 1, &mut rng);
            }
        }
        let rmse = (x.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(rmse < 0.1, "rmse {rmse}");
    }
}
