//! Mixed-type denoising networks and the ε-prediction DDPM.

use std::path::Path;

use log::debug;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::schedule::{forward_categorical, forward_numerical, standard_normal, timestep_embedding, NoiseSchedule};
use crate::container::{quantize_net, Container, DType};
use crate::data::{CatGroup, EncodedLayout};
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Activation, AdamState, DenseNet, Mat};
use crate::rng::{rng_from, Rng};
use crate::train::{check_finite, minibatches, TrainConfig, TrainingCurve};

pub const DENOISER_EMBEDDING_DIM: usize = 32;

/// Network over `[x_t, emb(t)]` whose output is a real block the width of
/// the numerical features followed by one logits block per categorical
/// feature.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedNet {
    pub net: DenseNet,
    pub layout: EncodedLayout,
    /// Step count the timestep embedding is normalized by.
    pub steps: usize,
    pub embedding_dim: usize,
}

impl MixedNet {
    pub fn new(layout: EncodedLayout, steps: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![layout.width() + DENOISER_EMBEDDING_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.width());
        Ok(MixedNet {
            net: DenseNet::new(&sizes, Activation::Relu, Activation::Identity, rng)?,
            layout,
            steps,
            embedding_dim: DENOISER_EMBEDDING_DIM,
        })
    }

    pub fn input(&self, x: &Mat, t: &[usize]) -> Result<Mat> {
        if x.cols() != self.layout.width() {
            return Err(Error::shape("denoiser input width", self.layout.width(), x.cols()));
        }
        let emb: Vec<Vec<f64>> = t.iter().map(|&ti| timestep_embedding(ti, self.steps, self.embedding_dim)).collect();
        x.hcat(&Mat::from_rows(&emb)?)
    }

    /// Raw outputs: numerical prediction then categorical logits.
    pub fn forward(&self, x: &Mat, t: &[usize]) -> Result<Mat> {
        self.net.forward(&self.input(x, t)?)
    }

    pub fn forward_at(&self, x: &Mat, t: usize) -> Result<Mat> {
        self.forward(x, &vec![t; x.rows()])
    }

    /// One optimizer step on `MSE(numerical, num_target) + mean CE(logits,
    /// cat_target)` where `cat_target` holds a probability vector per group.
    /// Returns the batch loss.
    pub fn train_step(
        &mut self,
        adam: &mut AdamState,
        x: &Mat,
        t: &[usize],
        num_target: &Mat,
        cat_target: &Mat,
    ) -> Result<f64> {
        let trace = self.net.forward_trace(&self.input(x, t)?)?;
        let (loss, up) = mixed_loss(&self.layout, trace.output(), num_target, cat_target);
        let (grads, _) = self.net.backward(&trace, &up)?;
        adam.step_net(&mut self.net, &grads)?;
        Ok(loss)
    }

    pub fn push_to(&self, c: &mut Container, prefix: &str) {
        c.set_meta(format!("{prefix}.steps"), self.steps);
        c.set_meta(format!("{prefix}.embedding_dim"), self.embedding_dim);
        c.set_meta(format!("{prefix}.layout"), layout_to_string(&self.layout));
        c.push_net(prefix, &self.net);
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            c.require_meta(&format!("{prefix}.{k}"))?
                .parse()
                .map_err(|_| Error::Config(format!("bad {prefix}.{k} in container")))
        };
        Ok(MixedNet {
            net: c.net(prefix)?,
            layout: layout_from_string(c.require_meta(&format!("{prefix}.layout"))?)?,
            steps: num("steps")?,
            embedding_dim: num("embedding_dim")?,
        })
    }
}

pub(crate) fn layout_to_string(l: &EncodedLayout) -> String {
    let groups: Vec<String> = l.groups.iter().map(|g| format!("{}:{}", g.start, g.k)).collect();
    format!("{};{}", l.num, groups.join(","))
}

pub(crate) fn layout_from_string(s: &str) -> Result<EncodedLayout> {
    let bad = || Error::Config(format!("bad layout {s:?}"));
    let (num, groups) = s.split_once(';').ok_or_else(bad)?;
    let groups = if groups.is_empty() {
        Vec::new()
    } else {
        groups
            .split(',')
            .map(|g| {
                let (a, b) = g.split_once(':').ok_or_else(bad)?;
                Ok(CatGroup {
                    start: a.parse().map_err(|_| bad())?,
                    k: b.parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(EncodedLayout {
        num: num.parse().map_err(|_| bad())?,
        groups,
    })
}

/// Loss and dL/d(outputs) for the mixed objective, averaged over rows.
pub fn mixed_loss(layout: &EncodedLayout, out: &Mat, num_target: &Mat, cat_target: &Mat) -> (f64, Mat) {
    let n = out.rows() as f64;
    let mut up = Mat::zeros(out.rows(), out.cols());
    let mut loss = 0.0;
    let n_groups = layout.groups.len();
    for r in 0..out.rows() {
        let o = out.row(r);
        let u = up.row_mut(r);
        if layout.num > 0 {
            let nt = num_target.row(r);
            for j in 0..layout.num {
                let d = o[j] - nt[j];
                loss += d * d / (layout.num as f64 * n);
                u[j] = 2.0 * d / (layout.num as f64 * n);
            }
        }
        let ct = cat_target.row(r);
        let mut off = 0;
        for g in &layout.groups {
            let mut p = o[g.range()].to_vec();
            softmax_in_place(&mut p);
            for c in 0..g.k {
                let target = ct[off + c];
                if target > 0.0 {
                    loss -= target * p[c].max(1e-300).ln() / (n_groups as f64 * n);
                }
                u[g.start + c] = (p[c] - target) / (n_groups as f64 * n);
            }
            off += g.k;
        }
    }
    (loss, up)
}

/// Categorical blocks of encoded rows, concatenated without the numerical
/// prefix.
pub fn categorical_block(layout: &EncodedLayout, x: &Mat) -> Mat {
    x.col_slice(layout.num, layout.width())
}

/// Softmax of every logits group in a raw output row, in place.
pub fn softmax_groups(layout: &EncodedLayout, row: &mut [f64]) {
    for g in &layout.groups {
        softmax_in_place(&mut row[g.range()]);
    }
}

/// Posterior over the category at step `s < t` given the current one-hot
/// `x_t` and a predicted clean distribution `x0_hat`:
/// `[a x_t + (1 - a)/K] * [abar_s x0_hat + (1 - abar_s)/K]`, normalized,
/// with `a = abar_t / abar_s`.
pub fn categorical_posterior(x_t: &[f64], x0_hat: &[f64], abar_t: f64, abar_s: f64) -> Vec<f64> {
    let k = x_t.len() as f64;
    let a = abar_t / abar_s;
    let mut p: Vec<f64> = x_t
        .iter()
        .zip(x0_hat)
        .map(|(&xt, &x0)| (a * xt + (1.0 - a) / k) * (abar_s * x0 + (1.0 - abar_s) / k))
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub steps: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            steps: 2500,
            hidden: vec![256, 256, 256],
            train: TrainConfig {
                epochs: 100,
                batch_size: 256,
                lr: 1e-3,
            },
        }
    }
}

/// ε-prediction DDPM over mixed numerical/categorical rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDenoiser {
    pub model: MixedNet,
    pub schedule: NoiseSchedule,
    pub curve: TrainingCurve,
}

impl TabularDenoiser {
    pub fn layout(&self) -> &EncodedLayout {
        &self.model.layout
    }

    pub fn to_container(&self, schema_hash: &str) -> Container {
        let mut c = Container::new("denoiser");
        c.set_meta("schema_hash", schema_hash);
        c.push("schedule.betas", DType::F64, vec![self.schedule.steps()], self.schedule.betas().to_vec());
        self.model.push_to(&mut c, "denoiser");
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("denoiser", path)?;
        Ok(TabularDenoiser {
            model: MixedNet::read_from(c, "denoiser")?,
            schedule: NoiseSchedule::from_betas(c.tensor("schedule.betas")?.data.clone())?,
            curve: TrainingCurve::default(),
        })
    }

    pub fn quantized(mut self) -> Self {
        quantize_net(&mut self.model.net);
        self
    }
}

/// Forward-noises a batch at per-row timesteps, returning `(x_t, ε)`.
pub fn noise_batch(
    schedule: &NoiseSchedule,
    layout: &EncodedLayout,
    x0: &Mat,
    t: &[usize],
    rng: &mut Rng,
) -> (Mat, Mat) {
    let mut xt = Mat::zeros(x0.rows(), x0.cols());
    let mut eps = Mat::zeros(x0.rows(), layout.num);
    for r in 0..x0.rows() {
        let e: Vec<f64> = (0..layout.num).map(|_| standard_normal(rng)).collect();
        let src = x0.row(r);
        let dst = xt.row_mut(r);
        dst[..layout.num].copy_from_slice(&forward_numerical(schedule, &src[..layout.num], t[r], &e));
        for g in &layout.groups {
            let c = forward_categorical(schedule, &src[g.range()], t[r], rng);
            dst[g.start + c] = 1.0;
        }
        eps.row_mut(r).copy_from_slice(&e);
    }
    (xt, eps)
}

/// Trains the ε-denoiser with `t` uniform over `1..=T` per example.
pub fn train_denoiser(
    x: &Mat,
    layout: &EncodedLayout,
    schedule: NoiseSchedule,
    cfg: &DenoiserConfig,
    seed: u64,
) -> Result<TabularDenoiser> {
    if x.rows() == 0 {
        return Err(Error::Empty("no rows to train the denoiser on".into()));
    }
    let mut rng = rng_from(seed, &[0xD1FF]);
    let mut model = MixedNet::new(layout.clone(), schedule.steps(), &cfg.hidden, &mut rng)?;
    let mut adam = AdamState::for_net(&model.net, cfg.train.lr);
    let cat = categorical_block(layout, x);
    let mut curve = TrainingCurve::default();
    for epoch in 0..cfg.train.epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in minibatches(x.rows(), cfg.train.batch_size, &mut rng) {
            let xb = x.select_rows(&batch);
            let tb: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
            let (xt, eps) = noise_batch(&schedule, layout, &xb, &tb, &mut rng);
            let loss = model.train_step(&mut adam, &xt, &tb, &eps, &cat.select_rows(&batch))?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let loss = loss_sum / seen as f64;
        check_finite("denoiser", epoch, loss)?;
        curve.push(epoch, loss, None);
        debug!("denoiser epoch {epoch}: loss {loss:.5}");
    }
    Ok(TabularDenoiser { model, schedule, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_rows_sum_to_one() {
        for (xt, x0) in [
            (vec![1.0, 0.0, 0.0], vec![0.2, 0.3, 0.5]),
            (vec![0.0, 1.0], vec![1.0, 0.0]),
        ] {
            let p = categorical_posterior(&xt, &x0, 0.3, 0.6);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_at_clean_step_follows_prediction() {
        // abar_s = 1 multiplies by x0_hat itself
        let p = categorical_posterior(&[1.0, 0.0], &[0.0, 1.0], 0.9, 1.0);
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn layout_string_round_trip() {
        let l = EncodedLayout {
            num: 3,
            groups: vec![CatGroup { start: 3, k: 2 }, CatGroup { start: 5, k: 4 }],
        };
        assert_eq!(layout_from_string(&layout_to_string(&l)).unwrap(), l);
        let l = EncodedLayout { num: 2, groups: vec![] };
        assert_eq!(layout_from_string(&layout_to_string(&l)).unwrap(), l);
    }

    #[test]
    fn mixed_loss_gradient_matches_finite_differences() {
        let layout = EncodedLayout {
            num: 2,
            groups: vec![CatGroup { start: 2, k: 3 }],
        };
        let out = Mat::from_vec(2, 5, vec![0.3, -1.2, 0.5, -0.1, 2.0, 1.0, 0.0, -0.4, 0.2, 0.1]).unwrap();
        let nt = Mat::from_vec(2, 2, vec![0.1, 0.2, -0.5, 0.7]).unwrap();
        let ct = Mat::from_vec(2, 3, vec![0.0, 1.0, 0.0, 0.2, 0.3, 0.5]).unwrap();
        let (_, up) = mixed_loss(&layout, &out, &nt, &ct);
        let h = 1e-6;
        for i in 0..10 {
            let mut a = out.clone();
            let mut b = out.clone();
            a.as_mut_slice()[i] += h;
            b.as_mut_slice()[i] -= h;
            let fd = (mixed_loss(&layout, &a, &nt, &ct).0 - mixed_loss(&layout, &b, &nt, &ct).0) / (2.0 * h);
            assert!((fd - up.as_slice()[i]).abs() < 1e-7, "component {i}: {fd} vs {}", up.as_slice()[i]);
        }
    }
}
