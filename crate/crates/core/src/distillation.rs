//! v-parameterized denoiser and progressive distillation to fewer steps.
//!
//! With `alpha_t = sqrt(abar_t)` and `sigma_t = sqrt(1 - abar_t)` the noised
//! sample is `z = alpha x + sigma eps`; writing `alpha = cos phi`,
//! `sigma = sin phi` the network predicts `v = cos phi eps - sin phi x`.

use std::path::Path;

use log::{debug, info};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::{quantize_net, Container, DType};
use crate::data::EncodedLayout;
use crate::diffusion::denoiser::{categorical_block, noise_batch, softmax_groups, MixedNet, TabularDenoiser};
use crate::diffusion::sampler::{categorical_step, check_step, Sampler, X0_CLIP};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{AdamState, Mat};
use crate::rng::{rng_from, Rng};
use crate::train::{check_finite, minibatches, TrainingCurve};

pub fn phi_of_t(schedule: &NoiseSchedule, t: usize) -> f64 {
    let ab = schedule.alpha_bar(t);
    (1.0 - ab).sqrt().atan2(ab.sqrt())
}

pub fn v_from_x_eps(x: f64, eps: f64, phi: f64) -> f64 {
    phi.cos() * eps - phi.sin() * x
}

/// Recovers `(x, eps)` from `z = cos phi x + sin phi eps` and `v`.
pub fn x_eps_from_v(z: f64, v: f64, phi: f64) -> (f64, f64) {
    let (s, c) = phi.sin_cos();
    (c * z - s * v, s * z + c * v)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub factor: usize,
    pub seed: u64,
}

/// v-prediction denoiser that samples on every `stride`-th step of its
/// schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct VDenoiser {
    pub model: MixedNet,
    pub schedule: NoiseSchedule,
    pub stride: usize,
    pub lineage: Vec<StageRecord>,
    pub curve: TrainingCurve,
}

impl VDenoiser {
    pub fn sampling_steps(&self) -> usize {
        self.schedule.steps() / self.stride
    }

    fn alpha_sigma(&self, t: usize) -> (f64, f64) {
        let ab = self.schedule.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Clean-value estimate of the numerical block, clipped to the data
    /// range, for rows of `z` at per-row steps `t` given raw outputs.
    fn x_hat(&self, z: &Mat, out: &Mat, t: &[usize]) -> Mat {
        let num = self.model.layout.num;
        let mut x = Mat::zeros(z.rows(), num);
        for r in 0..z.rows() {
            let (a, s) = self.alpha_sigma(t[r]);
            for j in 0..num {
                x.set(r, j, (a * z.get(r, j) - s * out.get(r, j)).clamp(-X0_CLIP, X0_CLIP));
            }
        }
        x
    }

    /// Deterministic update of the numerical block from `t` to `s` given a
    /// clean estimate.
    fn ddim_numerical(&self, z: f64, x_hat: f64, t: usize, s: usize) -> f64 {
        let (a_t, s_t) = self.alpha_sigma(t);
        let (a_s, s_s) = self.alpha_sigma(s);
        let eps = (z - a_t * x_hat) / s_t;
        a_s * x_hat + s_s * eps
    }

    pub fn to_container(&self, schema_hash: &str) -> Container {
        let mut c = Container::new("vdenoiser");
        c.set_meta("schema_hash", schema_hash);
        c.set_meta("stride", self.stride);
        c.set_meta("sampling_steps", self.sampling_steps());
        let lineage: Vec<String> = self.lineage.iter().map(|s| format!("x{}@{}", s.factor, s.seed)).collect();
        c.set_meta("lineage", if lineage.is_empty() { "-".to_string() } else { lineage.join(",") });
        c.push("schedule.betas", DType::F64, vec![self.schedule.steps()], self.schedule.betas().to_vec());
        self.model.push_to(&mut c, "denoiser");
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("vdenoiser", path)?;
        let bad = |what: &str| Error::Config(format!("bad {what} in {}", path.display()));
        let lineage = match c.require_meta("lineage")? {
            "-" => Vec::new(),
            l => l
                .split(',')
                .map(|s| {
                    let (f, seed) = s.strip_prefix('x').and_then(|s| s.split_once('@')).ok_or_else(|| bad("lineage"))?;
                    Ok(StageRecord {
                        factor: f.parse().map_err(|_| bad("lineage"))?,
                        seed: seed.parse().map_err(|_| bad("lineage"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(VDenoiser {
            model: MixedNet::read_from(c, "denoiser")?,
            schedule: NoiseSchedule::from_betas(c.tensor("schedule.betas")?.data.clone())?,
            stride: c.require_meta("stride")?.parse().map_err(|_| bad("stride"))?,
            lineage,
            curve: TrainingCurve::default(),
        })
    }

    pub fn quantized(mut self) -> Self {
        quantize_net(&mut self.model.net);
        self
    }
}

impl Sampler for VDenoiser {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn layout(&self) -> &EncodedLayout {
        &self.model.layout
    }

    /// Starts at the largest multiple of the stride not above `tau`.
    fn grid_from(&self, tau: usize) -> Vec<usize> {
        let top = (tau.min(self.schedule.steps()) / self.stride).max(1) * self.stride;
        (0..=top / self.stride).rev().map(|i| i * self.stride).collect()
    }

    /// Numerical block moves deterministically (DDIM); categorical features
    /// are sampled from their posterior as in the DDPM.
    fn step(&self, x: &Mat, t: usize, s: usize, logit_nudge: Option<&Mat>, rngs: &mut [Rng]) -> Result<Mat> {
        let layout = &self.model.layout;
        check_step(x, layout, t, s, rngs)?;
        let out = self.model.forward_at(x, t)?;
        let x_hat = self.x_hat(x, &out, &vec![t; x.rows()]);
        let mut next = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let dst = next.row_mut(r);
            for j in 0..layout.num {
                dst[j] = self.ddim_numerical(x.get(r, j), x_hat.get(r, j), t, s);
            }
            let nudge = logit_nudge.map(|m| m.row(r));
            categorical_step(layout, &self.schedule, x.row(r), out.row(r), nudge, t, s, dst, &mut rngs[r]);
        }
        Ok(next)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub factor: usize,
    pub epochs: usize,
}

/// Ordered distillation stages from `initial_steps` sampling steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillationPlan {
    pub initial_steps: usize,
    pub stages: Vec<StageSpec>,
}

impl DistillationPlan {
    pub fn new(initial_steps: usize, stages: Vec<StageSpec>) -> Result<Self> {
        let mut n = initial_steps;
        for st in &stages {
            if st.factor < 2 {
                return Err(Error::InvalidArgument(format!("stage factor must be at least 2, got {}", st.factor)));
            }
            if !n.is_multiple_of(st.factor) {
                return Err(Error::InvalidArgument(format!("factor {} does not divide {n} steps", st.factor)));
            }
            n /= st.factor;
        }
        Ok(DistillationPlan { initial_steps, stages })
    }

    /// Sampling steps before and after each stage.
    pub fn step_counts(&self) -> Vec<usize> {
        let mut out = vec![self.initial_steps];
        for st in &self.stages {
            out.push(out.last().unwrap() / st.factor);
        }
        out
    }

    pub fn final_steps(&self) -> usize {
        *self.step_counts().last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub factors: Vec<usize>,
    pub stage_epochs: usize,
    pub convert_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            factors: vec![2, 5],
            stage_epochs: 40,
            convert_epochs: 40,
            batch_size: 256,
            lr: 5e-4,
        }
    }
}

impl DistillConfig {
    pub fn plan(&self, initial_steps: usize) -> Result<DistillationPlan> {
        DistillationPlan::new(
            initial_steps,
            self.factors
                .iter()
                .map(|&factor| StageSpec {
                    factor,
                    epochs: self.stage_epochs,
                })
                .collect(),
        )
    }
}

fn softmax_block(layout: &EncodedLayout, out: &Mat) -> Mat {
    let mut probs = out.clone();
    for r in 0..probs.rows() {
        softmax_groups(layout, probs.row_mut(r));
    }
    categorical_block(layout, &probs)
}

/// Fine-tunes a copy of the ε-teacher to predict the `v` its own
/// predictions imply. Categorical heads start as exact copies and are held
/// to the teacher's distributions.
pub fn convert_to_v(teacher: &TabularDenoiser, x: &Mat, epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Result<VDenoiser> {
    let layout = teacher.model.layout.clone();
    let schedule = teacher.schedule.clone();
    let mut student = VDenoiser {
        model: teacher.model.clone(),
        schedule: schedule.clone(),
        stride: 1,
        lineage: Vec::new(),
        curve: TrainingCurve::default(),
    };
    let mut rng = rng_from(seed, &[0xC0_4E]);
    let mut adam = AdamState::for_net(&student.model.net, lr);
    for epoch in 0..epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in minibatches(x.rows(), batch_size, &mut rng) {
            let xb = x.select_rows(&batch);
            let tb: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
            let (z, _) = noise_batch(&schedule, &layout, &xb, &tb, &mut rng);
            let out = teacher.model.forward(&z, &tb)?;
            let mut v = Mat::zeros(z.rows(), layout.num);
            for r in 0..z.rows() {
                let ab = schedule.alpha_bar(tb[r]);
                let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                for j in 0..layout.num {
                    let zj = z.get(r, j);
                    let x0 = ((zj - s * out.get(r, j)) / a).clamp(-X0_CLIP, X0_CLIP);
                    let eps = (zj - a * x0) / s;
                    v.set(r, j, a * eps - s * x0);
                }
            }
            let loss = student.model.train_step(&mut adam, &z, &tb, &v, &softmax_block(&layout, &out))?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let loss = loss_sum / seen.max(1) as f64;
        check_finite("v-conversion", epoch, loss)?;
        student.curve.push(epoch, loss, None);
        debug!("v-conversion epoch {epoch}: loss {loss:.5}");
    }
    Ok(student)
}

/// Targets for one distillation batch: the `v` that takes the student from
/// `z_t` to where `factor` teacher steps land, and the teacher's category
/// distributions at its last sub-step. Categorical inputs are held at their
/// `z_t` values during the rollout.
pub fn distillation_targets(teacher: &VDenoiser, factor: usize, z: &Mat, t: &[usize]) -> Result<(Mat, Mat)> {
    let layout = &teacher.model.layout;
    let num = layout.num;
    let mut cur = z.clone();
    let mut tc = t.to_vec();
    let mut cat = Mat::zeros(z.rows(), layout.width() - num);
    for _ in 0..factor {
        let out = teacher.model.forward(&cur, &tc)?;
        let x_hat = teacher.x_hat(&cur, &out, &tc);
        cat = softmax_block(layout, &out);
        for r in 0..cur.rows() {
            let s = tc[r] - teacher.stride;
            for j in 0..num {
                let next = teacher.ddim_numerical(cur.get(r, j), x_hat.get(r, j), tc[r], s);
                cur.set(r, j, next);
            }
            tc[r] = s;
        }
    }
    let mut v = Mat::zeros(z.rows(), num);
    for r in 0..z.rows() {
        let (a_t, s_t) = teacher.alpha_sigma(t[r]);
        let (a_s, s_s) = teacher.alpha_sigma(tc[r]);
        let ratio = s_s / s_t;
        for j in 0..num {
            let x_tilde = (cur.get(r, j) - ratio * z.get(r, j)) / (a_s - ratio * a_t);
            let eps_tilde = (z.get(r, j) - a_t * x_tilde) / s_t;
            v.set(r, j, a_t * eps_tilde - s_t * x_tilde);
        }
    }
    Ok((v, cat))
}

/// Trains a student that covers `factor` teacher steps in one. The student
/// starts from the teacher's weights; the teacher is only read.
pub fn distill_stage(
    teacher: &VDenoiser,
    factor: usize,
    x: &Mat,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<VDenoiser> {
    if factor == 0 || !teacher.sampling_steps().is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} does not divide {} steps",
            teacher.sampling_steps()
        )));
    }
    let layout = teacher.model.layout.clone();
    let schedule = &teacher.schedule;
    let mut student = teacher.clone();
    student.stride = teacher.stride * factor;
    student.lineage.push(StageRecord { factor, seed });
    student.curve = TrainingCurve::default();
    let n_student = student.sampling_steps();
    let mut rng = rng_from(seed, &[0xD157]);
    let mut adam = AdamState::for_net(&student.model.net, lr);
    for epoch in 0..epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in minibatches(x.rows(), batch_size, &mut rng) {
            let xb = x.select_rows(&batch);
            let tb: Vec<usize> = batch
                .iter()
                .map(|_| rng.random_range(1..=n_student) * student.stride)
                .collect();
            let (z, _) = noise_batch(schedule, &layout, &xb, &tb, &mut rng);
            let (v, cat) = distillation_targets(teacher, factor, &z, &tb)?;
            let loss = student.model.train_step(&mut adam, &z, &tb, &v, &cat)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let loss = loss_sum / seen.max(1) as f64;
        check_finite("distillation", epoch, loss)?;
        student.curve.push(epoch, loss, None);
        debug!("distill x{factor} epoch {epoch}: loss {loss:.5}");
    }
    Ok(student)
}

/// Chains [`distill_stage`] over the plan, stage `i` seeded from `(seed, i)`.
pub fn run_progressive_distillation(
    teacher: &VDenoiser,
    plan: &DistillationPlan,
    x: &Mat,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<VDenoiser> {
    if plan.initial_steps != teacher.sampling_steps() {
        return Err(Error::InvalidArgument(format!(
            "plan starts at {} steps but the teacher samples with {}",
            plan.initial_steps,
            teacher.sampling_steps()
        )));
    }
    let mut current = teacher.clone();
    for (i, st) in plan.stages.iter().enumerate() {
        let stage_seed = crate::rng::derive_seed(seed, &[i as u64]);
        current = distill_stage(&current, st.factor, x, st.epochs, batch_size, lr, stage_seed)?;
        info!("distilled to {} steps", current.sampling_steps());
    }
    Ok(current)
}
