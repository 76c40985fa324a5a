//! The black-box intrusion classifier and the noise-aware classifier that
//! steers guided sampling.

use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::container::{Container, quantize_net};
use crate::data::EncodedLayout;
use crate::diffusion::denoiser::noise_batch;
use crate::diffusion::schedule::{timestep_embedding, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{bce_batch, AdamState, Activation, DenseNet, Mat};
use crate::rng::rng_from;
use crate::train::{check_finite, minibatches, TrainConfig, TrainingCurve};

pub const BLACKBOX_HIDDEN: [usize; 3] = [128, 64, 32];
pub const TIMESTEP_EMBEDDING_DIM: usize = 32;
pub const DECISION_THRESHOLD: f64 = 0.5;

pub fn blackbox_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 600,
        batch_size: 256,
        lr: 5e-4,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[u8], truth: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in pred.iter().zip(truth) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// F1 of the attack class; 0 when the class is never predicted nor present.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

pub fn threshold(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= DECISION_THRESHOLD)).collect()
}

pub fn metrics_from_probs(probs: &[f64], labels: &[u8]) -> Result<ClassifierMetrics> {
    if probs.is_empty() {
        return Err(Error::Empty("cannot evaluate on an empty test set".into()));
    }
    let confusion = Confusion::from_predictions(&threshold(probs), labels);
    Ok(ClassifierMetrics {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        confusion,
    })
}

/// Feed-forward binary classifier over encoded features.
#[derive(Clone, Debug, PartialEq)]
pub struct BlackBoxClassifier {
    pub net: DenseNet,
    pub schema_hash: String,
    pub curve: TrainingCurve,
    pub degenerate: bool,
}

impl BlackBoxClassifier {
    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn predict_proba(&self, x: &Mat) -> Result<Vec<f64>> {
        Ok(self.net.forward(x)?.into_vec())
    }

    pub fn predict(&self, x: &Mat) -> Result<Vec<u8>> {
        Ok(threshold(&self.predict_proba(x)?))
    }

    pub fn evaluate(&self, x: &Mat, labels: &[u8]) -> Result<ClassifierMetrics> {
        metrics_from_probs(&self.predict_proba(x)?, labels)
    }

    /// Probabilities and dL/dx where `upstream(row, p)` gives dL/dp.
    pub fn prob_and_input_grad(&self, x: &Mat, upstream: &dyn Fn(usize, f64) -> f64) -> Result<(Vec<f64>, Mat)> {
        let trace = self.net.forward_trace(x)?;
        let probs = trace.output().as_slice().to_vec();
        let up = Mat::from_vec(probs.len(), 1, probs.iter().enumerate().map(|(r, &p)| upstream(r, p)).collect())?;
        let (_, gx) = self.net.backward(&trace, &up)?;
        Ok((probs, gx))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("blackbox");
        c.set_meta("schema_hash", &self.schema_hash);
        c.set_meta("degenerate", self.degenerate);
        c.push_net("clf", &self.net);
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("blackbox", path)?;
        Ok(BlackBoxClassifier {
            net: c.net("clf")?,
            schema_hash: c.require_meta("schema_hash")?.to_string(),
            curve: TrainingCurve::default(),
            degenerate: c.meta("degenerate") == Some("true"),
        })
    }

    /// Matches the weights a save/load cycle would produce.
    pub fn quantized(mut self) -> Self {
        quantize_net(&mut self.net);
        self
    }
}

fn accuracy(probs: &[f64], labels: &[f64]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= DECISION_THRESHOLD) == (y >= 0.5))
        .count();
    hits as f64 / probs.len().max(1) as f64
}

/// Trains the black-box classifier on encoded rows.
pub fn train_blackbox(
    x: &Mat,
    labels: &[u8],
    hidden: &[usize],
    cfg: &TrainConfig,
    schema_hash: &str,
    seed: u64,
) -> Result<BlackBoxClassifier> {
    if x.rows() == 0 || x.rows() != labels.len() {
        return Err(Error::shape("train_blackbox labels", x.rows(), labels.len()));
    }
    let degenerate = labels.iter().all(|&l| l == labels[0]);
    if degenerate {
        warn!("all training labels are {}; classifier is a trivial predictor", labels[0]);
    }
    let mut rng = rng_from(seed, &[0xB1AC]);
    let mut sizes = vec![x.cols()];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut net = DenseNet::new(&sizes, Activation::Relu, Activation::Sigmoid, &mut rng)?;
    let mut adam = AdamState::for_net(&net, cfg.lr);
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let mut curve = TrainingCurve::default();
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0.0, 0usize);
        for batch in minibatches(x.rows(), cfg.batch_size, &mut rng) {
            let xb = x.select_rows(&batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let trace = net.forward_trace(&xb)?;
            let (loss, up) = bce_batch(trace.output(), &yb);
            let (grads, _) = net.backward(&trace, &up)?;
            adam.step_net(&mut net, &grads)?;
            loss_sum += loss * batch.len() as f64;
            hits += accuracy(trace.output().as_slice(), &yb) * batch.len() as f64;
            seen += batch.len();
        }
        let loss = loss_sum / seen as f64;
        check_finite("blackbox", epoch, loss)?;
        curve.push(epoch, loss, Some(hits / seen as f64));
        debug!("blackbox epoch {epoch}: loss {loss:.5}");
    }
    Ok(BlackBoxClassifier {
        net,
        schema_hash: schema_hash.to_string(),
        curve,
        degenerate,
    })
}

/// Anything that can score an intermediate sample `x_t` and differentiate
/// the score with respect to it.
pub trait Guide: Sync {
    /// Returns probabilities of the attack class and dL/dx_t, with
    /// `upstream(row, p)` supplying dL/dp.
    fn prob_and_input_grad(&self, x: &Mat, t: usize, upstream: &dyn Fn(usize, f64) -> f64) -> Result<(Vec<f64>, Mat)>;
}

/// Ablation path: guide with the clean-data classifier, ignoring `t`.
impl Guide for BlackBoxClassifier {
    fn prob_and_input_grad(&self, x: &Mat, _t: usize, upstream: &dyn Fn(usize, f64) -> f64) -> Result<(Vec<f64>, Mat)> {
        BlackBoxClassifier::prob_and_input_grad(self, x, upstream)
    }
}

/// Classifier over (x_t, timestep embedding), trained on forward-noised data.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceClassifier {
    pub net: DenseNet,
    pub steps: usize,
    pub embedding_dim: usize,
    pub curve: TrainingCurve,
}

impl GuidanceClassifier {
    pub fn features_dim(&self) -> usize {
        self.net.input_dim() - self.embedding_dim
    }

    fn with_embedding(&self, x: &Mat, t: &[usize]) -> Result<Mat> {
        let emb: Vec<Vec<f64>> = t.iter().map(|&ti| timestep_embedding(ti, self.steps, self.embedding_dim)).collect();
        x.hcat(&Mat::from_rows(&emb)?)
    }

    pub fn predict_proba(&self, x: &Mat, t: usize) -> Result<Vec<f64>> {
        let input = self.with_embedding(x, &vec![t; x.rows()])?;
        Ok(self.net.forward(&input)?.into_vec())
    }

    pub fn predict_proba_at(&self, x: &Mat, t: &[usize]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.with_embedding(x, t)?)?.into_vec())
    }

    pub fn to_container(&self, schema_hash: &str) -> Container {
        let mut c = Container::new("guidance");
        c.set_meta("schema_hash", schema_hash);
        c.set_meta("steps", self.steps);
        c.set_meta("embedding_dim", self.embedding_dim);
        c.push_net("clf", &self.net);
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("guidance", path)?;
        let parse = |k: &str| -> Result<usize> {
            c.require_meta(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad {k} in {}", path.display())))
        };
        Ok(GuidanceClassifier {
            net: c.net("clf")?,
            steps: parse("steps")?,
            embedding_dim: parse("embedding_dim")?,
            curve: TrainingCurve::default(),
        })
    }

    pub fn quantized(mut self) -> Self {
        quantize_net(&mut self.net);
        self
    }
}

impl Guide for GuidanceClassifier {
    fn prob_and_input_grad(&self, x: &Mat, t: usize, upstream: &dyn Fn(usize, f64) -> f64) -> Result<(Vec<f64>, Mat)> {
        let input = self.with_embedding(x, &vec![t; x.rows()])?;
        let trace = self.net.forward_trace(&input)?;
        let probs = trace.output().as_slice().to_vec();
        let up = Mat::from_vec(probs.len(), 1, probs.iter().enumerate().map(|(r, &p)| upstream(r, p)).collect())?;
        let (_, g) = self.net.backward(&trace, &up)?;
        Ok((probs, g.col_slice(0, x.cols())))
    }
}

/// Trains the guidance classifier on `x_t` drawn from the forward process at
/// uniformly random `t` in `0..=T`; labels are the clean labels.
pub fn train_guidance(
    x: &Mat,
    labels: &[u8],
    layout: &EncodedLayout,
    schedule: &NoiseSchedule,
    hidden: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<GuidanceClassifier> {
    use rand::Rng as _;
    if x.cols() != layout.width() {
        return Err(Error::shape("train_guidance width", layout.width(), x.cols()));
    }
    let mut rng = rng_from(seed, &[0x6D1D]);
    let mut sizes = vec![x.cols() + TIMESTEP_EMBEDDING_DIM];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let net = DenseNet::new(&sizes, Activation::Relu, Activation::Sigmoid, &mut rng)?;
    let mut model = GuidanceClassifier {
        net,
        steps: schedule.steps(),
        embedding_dim: TIMESTEP_EMBEDDING_DIM,
        curve: TrainingCurve::default(),
    };
    let mut adam = AdamState::for_net(&model.net, cfg.lr);
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in minibatches(x.rows(), cfg.batch_size, &mut rng) {
            let xb = x.select_rows(&batch);
            let tb: Vec<usize> = batch.iter().map(|_| rng.random_range(0..=schedule.steps())).collect();
            let (xt, _) = noise_batch(schedule, layout, &xb, &tb, &mut rng);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let input = model.with_embedding(&xt, &tb)?;
            let trace = model.net.forward_trace(&input)?;
            let (loss, up) = bce_batch(trace.output(), &yb);
            let (grads, _) = model.net.backward(&trace, &up)?;
            adam.step_net(&mut model.net, &grads)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let loss = loss_sum / seen as f64;
        check_finite("guidance", epoch, loss)?;
        model.curve.push(epoch, loss, None);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_from_hand_counted_confusion() {
        let c = Confusion {
            tp: 8,
            fp: 2,
            fn_: 2,
            tn: 8,
        };
        // precision 0.8, recall 0.8 -> F1 0.8
        assert!((c.f1() - 0.8).abs() < 1e-12);
        assert!((c.accuracy() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_all_benign_predictions() {
        let m = metrics_from_probs(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.accuracy, m.f1), (1.0, 1.0));
        let m = metrics_from_probs(&[0.1, 0.1, 0.1, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.accuracy, m.f1), (0.5, 0.0));
        assert!(metrics_from_probs(&[], &[]).is_err());
    }

    #[test]
    fn degenerate_labels_are_flagged() {
        let x = Mat::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
        };
        let m = train_blackbox(&x, &[1, 1, 1, 1], &[4], &cfg, "h", 0).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.curve.epochs.len(), 2);
    }
}
