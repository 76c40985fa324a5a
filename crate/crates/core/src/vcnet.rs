//! CVAE with a per-class mixture-of-Gaussians prior, trained jointly with
//! a classifier whose predictions condition the CVAE.

use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{threshold, BlackBoxClassifier};
use crate::container::{Container, DType};
use crate::data::{EncodedLayout, FittedPreprocessor};
use crate::diffusion::denoiser::{layout_from_string, layout_to_string, mixed_loss};
use crate::diffusion::schedule::standard_normal;
use crate::error::{Error, Result};
use crate::explain::{score_encoded, CounterfactualBatch};
use crate::nn::{bce_batch, Activation, AdamState, DenseNet, Mat};
use crate::rng::{rng_from, Rng};
use crate::train::{check_finite, TrainConfig, TrainingCurve};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VcnetConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub components: usize,
    pub recon_weight: f64,
    pub kl_weight: f64,
    pub clf_weight: f64,
    pub train: TrainConfig,
    /// Condition the CVAE on the true label instead of the prediction.
    pub true_label_conditioning: bool,
}

impl Default for VcnetConfig {
    fn default() -> Self {
        VcnetConfig {
            hidden: vec![64, 32],
            latent: 16,
            components: 5,
            recon_weight: 1.0,
            kl_weight: 0.5,
            clf_weight: 1.0,
            train: TrainConfig {
                epochs: 100,
                batch_size: 128,
                lr: 1e-3,
            },
            true_label_conditioning: false,
        }
    }
}

/// Per-class Gaussian mixture over the latent space. Row `c * C + j` of
/// `means`/`logvars` is component `j` of class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct MogPrior {
    pub components: usize,
    pub weight_logits: Vec<f64>,
    pub means: Mat,
    pub logvars: Mat,
}

#[derive(Clone, Debug, Default)]
struct PriorGrads {
    logits: Vec<f64>,
    means: Vec<f64>,
    logvars: Vec<f64>,
}

impl MogPrior {
    pub fn new(components: usize, latent: usize, rng: &mut Rng) -> Self {
        let rows = 2 * components;
        let means: Vec<f64> = (0..rows * latent).map(|_| standard_normal(rng)).collect();
        MogPrior {
            components,
            weight_logits: vec![0.0; rows],
            means: Mat::from_vec(rows, latent, means).expect("finite"),
            logvars: Mat::zeros(rows, latent),
        }
    }

    /// Normalized component weights of one class.
    pub fn weights(&self, class: u8) -> Vec<f64> {
        let c = self.components;
        let l = &self.weight_logits[class as usize * c..(class as usize + 1) * c];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// `log p(z | class)` and, when `grads` is given, accumulates
    /// `scale * d log p / d(params)` into it. Returns `d log p / dz` too.
    fn log_prob(&self, z: &[f64], class: u8, scale: f64, grads: Option<&mut PriorGrads>) -> (f64, Vec<f64>) {
        let c = self.components;
        let w = self.weights(class);
        let base = class as usize * c;
        let comp: Vec<f64> = (0..c)
            .map(|j| {
                let (m, lv) = (self.means.row(base + j), self.logvars.row(base + j));
                w[j].ln()
                    + z.iter()
                        .zip(m)
                        .zip(lv)
                        .map(|((zd, md), lvd)| -0.5 * (LN_2PI + lvd + (zd - md).powi(2) / lvd.exp()))
                        .sum::<f64>()
            })
            .collect();
        let mx = comp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + comp.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let resp: Vec<f64> = comp.iter().map(|v| (v - lse).exp()).collect();
        let mut dz = vec![0.0; z.len()];
        for j in 0..c {
            let (m, lv) = (self.means.row(base + j), self.logvars.row(base + j));
            for d in 0..z.len() {
                dz[d] -= resp[j] * (z[d] - m[d]) / lv[d].exp();
            }
        }
        if let Some(g) = grads {
            let l = z.len();
            for j in 0..c {
                let row = base + j;
                g.logits[row] += scale * (resp[j] - w[j]);
                let (m, lv) = (self.means.row(row), self.logvars.row(row));
                for d in 0..l {
                    let var = lv[d].exp();
                    let diff = z[d] - m[d];
                    g.means[row * l + d] += scale * resp[j] * diff / var;
                    g.logvars[row * l + d] += scale * resp[j] * 0.5 * (diff * diff / var - 1.0);
                }
            }
        }
        (lse, dz)
    }
}

/// Encoder trunk, latent head and label-conditioned decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Cvae {
    pub encoder: DenseNet,
    pub latent_head: DenseNet,
    pub decoder: DenseNet,
    pub latent: usize,
}

/// Sigmoid head reading the encoder trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct VcnetClassifier {
    pub head: DenseNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vcnet {
    pub cvae: Cvae,
    pub prior: MogPrior,
    pub classifier: VcnetClassifier,
    pub layout: EncodedLayout,
    pub curve: TrainingCurve,
    /// Mean KL per epoch.
    pub kl_curve: Vec<f64>,
    pub kl_collapsed: bool,
}

fn one_hot_labels(labels: &[u8]) -> Mat {
    let mut m = Mat::zeros(labels.len(), 2);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l as usize, 1.0);
    }
    m
}

impl Vcnet {
    pub fn predict_proba(&self, x: &Mat) -> Result<Vec<f64>> {
        let h = self.cvae.encoder.forward(x)?;
        Ok(self.classifier.head.forward(&h)?.into_vec())
    }

    /// `(mu, logvar)` of q(z | x, y).
    pub fn encode(&self, x: &Mat, y: &[u8]) -> Result<(Mat, Mat)> {
        let h = self.cvae.encoder.forward(x)?;
        let out = self.cvae.latent_head.forward(&h.hcat(&one_hot_labels(y))?)?;
        let l = self.cvae.latent;
        Ok((out.col_slice(0, l), out.col_slice(l, 2 * l)))
    }

    /// Encoded-space reconstruction: numerical means, categorical groups
    /// snapped to one-hot.
    pub fn decode(&self, z: &Mat, y: &[u8]) -> Result<Mat> {
        let mut out = self.cvae.decoder.forward(&z.hcat(&one_hot_labels(y))?)?;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for g in &self.layout.groups {
                let c = crate::data::argmax(&row[g.range()]);
                row[g.range()].iter_mut().for_each(|v| *v = 0.0);
                row[g.start + c] = 1.0;
            }
        }
        Ok(out)
    }

    pub fn to_container(&self, schema_hash: &str) -> Container {
        let mut c = Container::new("vcnet");
        c.set_meta("schema_hash", schema_hash);
        c.set_meta("latent", self.cvae.latent);
        c.set_meta("components", self.prior.components);
        c.set_meta("layout", layout_to_string(&self.layout));
        c.push_net("encoder", &self.cvae.encoder);
        c.push_net("latent_head", &self.cvae.latent_head);
        c.push_net("decoder", &self.cvae.decoder);
        c.push_net("classifier", &self.classifier.head);
        let p = &self.prior;
        c.push("prior.logits", DType::F32, vec![p.weight_logits.len()], p.weight_logits.clone());
        c.push("prior.means", DType::F32, vec![p.means.rows(), p.means.cols()], p.means.as_slice().to_vec());
        c.push("prior.logvars", DType::F32, vec![p.logvars.rows(), p.logvars.cols()], p.logvars.as_slice().to_vec());
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        c.expect_kind("vcnet", path)?;
        let num = |k: &str| -> Result<usize> {
            c.require_meta(k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad {k} in {}", path.display())))
        };
        let (latent, components) = (num("latent")?, num("components")?);
        let rows = 2 * components;
        Ok(Vcnet {
            cvae: Cvae {
                encoder: c.net("encoder")?,
                latent_head: c.net("latent_head")?,
                decoder: c.net("decoder")?,
                latent,
            },
            prior: MogPrior {
                components,
                weight_logits: c.tensor("prior.logits")?.data.clone(),
                means: Mat::from_vec(rows, latent, c.tensor("prior.means")?.data.clone())?,
                logvars: Mat::from_vec(rows, latent, c.tensor("prior.logvars")?.data.clone())?,
            },
            classifier: VcnetClassifier {
                head: c.net("classifier")?,
            },
            layout: layout_from_string(c.require_meta("layout")?)?,
            curve: TrainingCurve::default(),
            kl_curve: Vec::new(),
            kl_collapsed: false,
        })
    }

    pub fn quantized(mut self) -> Self {
        let nets = [
            &mut self.cvae.encoder,
            &mut self.cvae.latent_head,
            &mut self.cvae.decoder,
            &mut self.classifier.head,
        ];
        for n in nets {
            crate::container::quantize_net(n);
        }
        let p = &mut self.prior;
        for v in p
            .weight_logits
            .iter_mut()
            .chain(p.means.as_mut_slice())
            .chain(p.logvars.as_mut_slice())
        {
            *v = *v as f32 as f64;
        }
        self
    }

    /// One counterfactual per query: encode with the predicted label, draw
    /// `z'` from q(z | x, y), decode under `target`. Validity comes from the
    /// experiment's black box.
    pub fn generate_cf(
        &self,
        pp: &FittedPreprocessor,
        blackbox: &BlackBoxClassifier,
        query_id: usize,
        query: &[f64],
        target: u8,
        seed: u64,
    ) -> Result<CounterfactualBatch> {
        let start = Instant::now();
        let x = pp.encode(&Mat::row_vector(query))?;
        let y = threshold(&self.predict_proba(&x)?);
        let (mu, logvar) = self.encode(&x, &y)?;
        let mut rng = rng_from(seed, &[query_id as u64, 0]);
        let z: Vec<f64> = (0..self.cvae.latent)
            .map(|d| mu.get(0, d) + (0.5 * logvar.get(0, d)).exp() * standard_normal(&mut rng))
            .collect();
        let encoded = self.decode(&Mat::row_vector(&z), &[target])?;
        let (candidates, valid, probability) = score_encoded(pp, blackbox, &encoded, query, target)?;
        Ok(CounterfactualBatch {
            query_id,
            query: query.to_vec(),
            candidates,
            valid,
            probability,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Trains encoder, decoder, prior and classifier in one optimizer run.
pub fn train_vcnet(x: &Mat, labels: &[u8], layout: &EncodedLayout, cfg: &VcnetConfig, seed: u64) -> Result<Vcnet> {
    if x.rows() == 0 || x.rows() != labels.len() {
        return Err(Error::shape("train_vcnet labels", x.rows(), labels.len()));
    }
    if x.cols() != layout.width() {
        return Err(Error::shape("train_vcnet width", layout.width(), x.cols()));
    }
    let mut rng = rng_from(seed, &[0x7CE7]);
    let l = cfg.latent;
    let h_dim = *cfg.hidden.last().ok_or_else(|| Error::InvalidArgument("VCNet needs hidden layers".into()))?;
    let mut enc_sizes = vec![x.cols()];
    enc_sizes.extend_from_slice(&cfg.hidden);
    let mut dec_sizes = vec![l + 2];
    dec_sizes.extend(cfg.hidden.iter().rev());
    dec_sizes.push(x.cols());
    let mut model = Vcnet {
        cvae: Cvae {
            encoder: DenseNet::new(&enc_sizes, Activation::Relu, Activation::Relu, &mut rng)?,
            latent_head: DenseNet::new(&[h_dim + 2, 2 * l], Activation::Relu, Activation::Identity, &mut rng)?,
            decoder: DenseNet::new(&dec_sizes, Activation::Relu, Activation::Identity, &mut rng)?,
            latent: l,
        },
        prior: MogPrior::new(cfg.components, l, &mut rng),
        classifier: VcnetClassifier {
            head: DenseNet::new(&[h_dim, 1], Activation::Relu, Activation::Sigmoid, &mut rng)?,
        },
        layout: layout.clone(),
        curve: TrainingCurve::default(),
        kl_curve: Vec::new(),
        kl_collapsed: false,
    };
    let lr = cfg.train.lr;
    let mut a_enc = AdamState::for_net(&model.cvae.encoder, lr);
    let mut a_lat = AdamState::for_net(&model.cvae.latent_head, lr);
    let mut a_dec = AdamState::for_net(&model.cvae.decoder, lr);
    let mut a_clf = AdamState::for_net(&model.classifier.head, lr);
    let prior_rows = 2 * cfg.components;
    let mut a_prior = AdamState::new(&[prior_rows, prior_rows * l, prior_rows * l], lr);
    let cat = crate::diffusion::denoiser::categorical_block(layout, x);
    let y_all: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
    let mut order: Vec<usize> = (0..x.rows()).collect();

    for epoch in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kl_sum, mut hits) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.train.batch_size.max(1)) {
            let n = batch.len() as f64;
            let xb = x.select_rows(batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y_all[i]).collect();

            let t_enc = model.cvae.encoder.forward_trace(&xb)?;
            let h = t_enc.output().clone();
            let t_clf = model.classifier.head.forward_trace(&h)?;
            let probs = t_clf.output().as_slice().to_vec();
            let pred = threshold(&probs);
            hits += pred.iter().zip(batch).filter(|(p, &i)| **p == labels[i]).count();
            let cond: Vec<u8> = if cfg.true_label_conditioning {
                batch.iter().map(|&i| labels[i]).collect()
            } else {
                pred
            };
            let cond_hot = one_hot_labels(&cond);
            let t_lat = model.cvae.latent_head.forward_trace(&h.hcat(&cond_hot)?)?;
            let stats = t_lat.output();
            let mut z = Mat::zeros(batch.len(), l);
            let mut eps = Mat::zeros(batch.len(), l);
            for r in 0..batch.len() {
                for d in 0..l {
                    let e = standard_normal(&mut rng);
                    eps.set(r, d, e);
                    z.set(r, d, stats.get(r, d) + (0.5 * stats.get(r, l + d)).exp() * e);
                }
            }
            let t_dec = model.cvae.decoder.forward_trace(&z.hcat(&cond_hot)?)?;
            let (recon, mut up_dec) = mixed_loss(layout, t_dec.output(), &xb.col_slice(0, layout.num), &cat.select_rows(batch));
            up_dec.as_mut_slice().iter_mut().for_each(|v| *v *= cfg.recon_weight);
            let (g_dec, dz_in) = model.cvae.decoder.backward(&t_dec, &up_dec)?;

            let mut pg = PriorGrads {
                logits: vec![0.0; prior_rows],
                means: vec![0.0; prior_rows * l],
                logvars: vec![0.0; prior_rows * l],
            };
            let mut up_lat = Mat::zeros(batch.len(), 2 * l);
            let mut kl_batch = 0.0;
            for r in 0..batch.len() {
                let zr = z.row(r);
                let log_q: f64 = (0..l)
                    .map(|d| -0.5 * (LN_2PI + stats.get(r, l + d) + eps.get(r, d).powi(2)))
                    .sum();
                let (log_p, dlogp_dz) = model.prior.log_prob(zr, cond[r], -cfg.kl_weight / n, Some(&mut pg));
                kl_batch += log_q - log_p;
                for d in 0..l {
                    let gz = dz_in.get(r, d) - cfg.kl_weight / n * dlogp_dz[d];
                    let sigma = (0.5 * stats.get(r, l + d)).exp();
                    up_lat.set(r, d, gz);
                    up_lat.set(r, l + d, gz * 0.5 * sigma * eps.get(r, d) - 0.5 * cfg.kl_weight / n);
                }
            }
            let (g_lat, dh_lat) = model.cvae.latent_head.backward(&t_lat, &up_lat)?;
            let (bce, mut up_clf) = bce_batch(t_clf.output(), &yb);
            up_clf.as_mut_slice().iter_mut().for_each(|v| *v *= cfg.clf_weight);
            let (g_clf, dh_clf) = model.classifier.head.backward(&t_clf, &up_clf)?;
            let mut dh = dh_clf;
            for r in 0..batch.len() {
                let src = dh_lat.row(r);
                dh.row_mut(r).iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            let (g_enc, _) = model.cvae.encoder.backward(&t_enc, &dh)?;

            a_enc.step_net(&mut model.cvae.encoder, &g_enc)?;
            a_lat.step_net(&mut model.cvae.latent_head, &g_lat)?;
            a_dec.step_net(&mut model.cvae.decoder, &g_dec)?;
            a_clf.step_net(&mut model.classifier.head, &g_clf)?;
            let p = &mut model.prior;
            a_prior.step(
                vec![&mut p.weight_logits, p.means.as_mut_slice(), p.logvars.as_mut_slice()],
                vec![&pg.logits, &pg.means, &pg.logvars],
            )?;
            p.logvars.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(-6.0, 4.0));

            let kl = kl_batch / n;
            loss_sum += (cfg.recon_weight * recon + cfg.kl_weight * kl + cfg.clf_weight * bce) * n;
            kl_sum += kl * n;
        }
        let rows = x.rows() as f64;
        let loss = loss_sum / rows;
        check_finite("vcnet", epoch, loss)?;
        let kl = kl_sum / rows;
        model.curve.push(epoch, loss, Some(hits as f64 / rows));
        model.kl_curve.push(kl);
        if kl.abs() < 1e-3 {
            model.kl_collapsed = true;
            warn!("vcnet epoch {epoch}: KL {kl:.2e} below 1e-3, posterior collapse");
        }
        debug!("vcnet epoch {epoch}: loss {loss:.4} kl {kl:.4}");
    }
    Ok(model)
}
