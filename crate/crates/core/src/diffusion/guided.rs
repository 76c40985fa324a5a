//! Classifier-guided counterfactual generation.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampler::Sampler;
use super::schedule::{forward_categorical, forward_numerical, standard_normal};
use crate::classifier::{BlackBoxClassifier, Guide};
use crate::data::FittedPreprocessor;
use crate::error::{Error, Result};
use crate::explain::{score_encoded, CounterfactualBatch};
use crate::nn::{bce_loss, Mat};
use crate::rng::{rng_from, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Step size α of the gradient update.
    pub scale: f64,
    /// Weight λ of the L1 distance to the query.
    pub lambda: f64,
    /// Candidates per query.
    pub k: usize,
    /// Noise level the query is pushed to before denoising; `None` means T.
    pub tau: Option<usize>,
    /// Numerical values are kept within ±clamp after every update.
    pub clamp: f64,
    /// Multiplier on the logit nudge of categorical features.
    pub categorical_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 1.0,
            lambda: 0.5,
            k: 10,
            tau: None,
            clamp: 6.0,
            categorical_scale: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.scale >= 0.0) || !(self.lambda >= 0.0) || !(self.categorical_scale >= 0.0) {
            return Err(Error::InvalidArgument("guidance scale and λ must be non-negative".into()));
        }
        if let Some(tau) = self.tau {
            if tau == 0 || tau > steps {
                return Err(Error::InvalidArgument(format!("tau must lie in 1..={steps}, got {tau}")));
            }
        }
        Ok(())
    }
}

/// Per-row `BCE(f(x_t, t), target) + λ‖x_t − x_orig‖₁` and its gradient
/// with respect to `x_t`. The L1 subgradient is 0 where `x_t = x_orig`.
pub fn cf_loss(
    guide: &dyn Guide,
    x: &Mat,
    t: usize,
    target: u8,
    x_orig: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, Mat)> {
    if x_orig.len() != x.cols() {
        return Err(Error::shape("cf_loss query width", x.cols(), x_orig.len()));
    }
    let y = target as f64;
    let (probs, mut grad) = guide.prob_and_input_grad(x, t, &|_, p| bce_loss(p, y).1)?;
    let mut loss = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let mut l = bce_loss(probs[r], y).0;
        let g = grad.row_mut(r);
        for (j, (&xi, &oi)) in x.row(r).iter().zip(x_orig).enumerate() {
            let d = xi - oi;
            l += lambda * d.abs();
            if d != 0.0 {
                g[j] += lambda * d.signum();
            }
        }
        loss.push(l);
    }
    Ok((loss, grad))
}

fn normalize_rows(g: &mut Mat) {
    for r in 0..g.rows() {
        let row = g.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// The models and settings one explanation run needs.
pub struct GuidedExplainer<'a> {
    pub sampler: &'a dyn Sampler,
    pub guide: &'a dyn Guide,
    pub preprocessor: &'a FittedPreprocessor,
    pub blackbox: &'a BlackBoxClassifier,
    pub cfg: GuidanceConfig,
}

impl GuidedExplainer<'_> {
    /// Noises `k` copies of the encoded query to `tau`, one RNG per copy.
    fn noised_copies(&self, x_orig: &[f64], tau: usize, rngs: &mut [Rng]) -> Mat {
        let layout = self.sampler.layout();
        let schedule = self.sampler.schedule();
        let mut x = Mat::zeros(rngs.len(), x_orig.len());
        for (r, rng) in rngs.iter_mut().enumerate() {
            let eps: Vec<f64> = (0..layout.num).map(|_| standard_normal(rng)).collect();
            let row = x.row_mut(r);
            row[..layout.num].copy_from_slice(&forward_numerical(schedule, &x_orig[..layout.num], tau, &eps));
            for g in &layout.groups {
                let c = forward_categorical(schedule, &x_orig[g.range()], tau, rng);
                row[g.start + c] = 1.0;
            }
        }
        x
    }

    /// Runs the guided reverse process for one encoded query and returns the
    /// `k` final encoded samples.
    pub fn generate_encoded(&self, x_orig: &[f64], target: u8, rngs: &mut [Rng]) -> Result<Mat> {
        let schedule = self.sampler.schedule();
        let layout = self.sampler.layout().clone();
        self.cfg.validate(schedule.steps())?;
        let grid = self.sampler.grid_from(self.cfg.tau.unwrap_or(schedule.steps()));
        let mut x = self.noised_copies(x_orig, grid[0], rngs);
        let guided = self.cfg.scale > 0.0;
        let alpha = self.cfg.scale;
        let gradient = |x: &Mat, t: usize| -> Result<Mat> {
            let (_, mut g) = cf_loss(self.guide, x, t, target, x_orig, self.cfg.lambda)?;
            normalize_rows(&mut g);
            Ok(g)
        };
        let mut grad = if guided { Some(gradient(&x, grid[0])?) } else { None };
        for w in grid.windows(2) {
            let (t, s) = (w[0], w[1]);
            let nudge = match &grad {
                Some(g) if !layout.groups.is_empty() && self.cfg.categorical_scale > 0.0 => {
                    let mut n = g.col_slice(layout.num, layout.width());
                    let c = -alpha * self.cfg.categorical_scale;
                    n.as_mut_slice().iter_mut().for_each(|v| *v *= c);
                    Some(n)
                }
                _ => None,
            };
            x = self.sampler.step(&x, t, s, nudge.as_ref(), rngs)?;
            if guided {
                let g = gradient(&x, s)?;
                let step = alpha * (1.0 - schedule.alpha_bar(t) / schedule.alpha_bar(s)).sqrt();
                for r in 0..x.rows() {
                    let gr = g.row(r);
                    for (v, d) in x.row_mut(r)[..layout.num].iter_mut().zip(gr) {
                        *v = (*v - step * d).clamp(-self.cfg.clamp, self.cfg.clamp);
                    }
                }
                grad = Some(g);
            } else {
                for r in 0..x.rows() {
                    for v in &mut x.row_mut(r)[..layout.num] {
                        *v = v.clamp(-self.cfg.clamp, self.cfg.clamp);
                    }
                }
            }
        }
        Ok(x)
    }

    /// Explains one query given in original units. Chain `c` draws from
    /// the stream derived from `(seed, query_id, c)`.
    pub fn guided_generate(&self, query_id: usize, query: &[f64], target: u8, seed: u64) -> Result<CounterfactualBatch> {
        let start = Instant::now();
        let x_orig = self.preprocessor.encode(&Mat::row_vector(query))?.into_vec();
        let mut rngs: Vec<Rng> = (0..self.cfg.k).map(|c| rng_from(seed, &[query_id as u64, c as u64])).collect();
        let encoded = self.generate_encoded(&x_orig, target, &mut rngs)?;
        let (candidates, valid, probability) = score_encoded(self.preprocessor, self.blackbox, &encoded, query, target)?;
        Ok(CounterfactualBatch {
            query_id,
            query: query.to_vec(),
            candidates,
            valid,
            probability,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Explains every row of `queries`; the row index is the query id.
    pub fn explain_pool(&self, queries: &Mat, target: u8, seed: u64, parallel: bool) -> Result<Vec<CounterfactualBatch>> {
        let run = |i: usize| self.guided_generate(i, queries.row(i), target, seed);
        if parallel {
            (0..queries.rows()).into_par_iter().map(run).collect()
        } else {
            (0..queries.rows()).map(run).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, DenseNet};

    struct Fixed(DenseNet);

    impl Guide for Fixed {
        fn prob_and_input_grad(&self, x: &Mat, _t: usize, up: &dyn Fn(usize, f64) -> f64) -> Result<(Vec<f64>, Mat)> {
            let trace = self.0.forward_trace(x)?;
            let p = trace.output().as_slice().to_vec();
            let u = Mat::from_vec(p.len(), 1, p.iter().enumerate().map(|(r, &v)| up(r, v)).collect())?;
            Ok((p, self.0.backward(&trace, &u)?.1))
        }
    }

    fn zero_net(width: usize) -> Fixed {
        Fixed(
            DenseNet::from_layers(vec![Dense {
                weight: Mat::zeros(width, 1),
                bias: vec![0.0],
                activation: Activation::Sigmoid,
            }])
            .unwrap(),
        )
    }

    #[test]
    fn midpoint_loss_is_ln2_and_distance_vanishes_at_query() {
        let g = zero_net(3);
        let x = Mat::row_vector(&[0.2, -1.0, 0.5]);
        let (loss, grad) = cf_loss(&g, &x, 0, 0, &[0.2, -1.0, 0.5], 0.7).unwrap();
        assert!((loss[0] - std::f64::consts::LN_2).abs() < 1e-12);
        // zero weights: no classifier gradient, and no L1 subgradient at ties
        assert!(grad.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cf_loss_gradient_matches_finite_differences() {
        let mut rng = crate::rng::rng_from(9, &[]);
        let net = DenseNet::new(&[4, 6, 1], Activation::Relu, Activation::Sigmoid, &mut rng).unwrap();
        let g = Fixed(net);
        let x = Mat::row_vector(&[0.3, -0.8, 1.1, 0.05]);
        let orig = [0.0, 0.0, 1.0, 0.5];
        let (_, grad) = cf_loss(&g, &x, 0, 0, &orig, 0.5).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut a = x.clone();
            let mut b = x.clone();
            a.as_mut_slice()[j] += h;
            b.as_mut_slice()[j] -= h;
            let fd = (cf_loss(&g, &a, 0, 0, &orig, 0.5).unwrap().0[0] - cf_loss(&g, &b, 0, 0, &orig, 0.5).unwrap().0[0])
                / (2.0 * h);
            let an = grad.get(0, j);
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-6), "component {j}: {fd} vs {an}");
        }
    }

    #[test]
    fn config_validation() {
        let c = GuidanceConfig { k: 0, ..Default::default() };
        assert!(c.validate(10).is_err());
        let c = GuidanceConfig { tau: Some(11), ..Default::default() };
        assert!(c.validate(10).is_err());
        let c = GuidanceConfig { scale: -1.0, ..Default::default() };
        assert!(c.validate(10).is_err());
        assert!(GuidanceConfig::default().validate(10).is_ok());
    }
}
