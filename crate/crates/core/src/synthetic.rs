//! Seeded two-class tabular data for tests and examples.
//!
//! Benign and attack rows form two Gaussian blobs that separate along
//! `sep`; `shift` moves moderately with the class, `noise_a`/`noise_b` carry
//! no signal, `bytes` is a heavy-tailed count, and `proto` is a three-way
//! categorical whose distribution depends on the class.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Feature, FeatureSchema};
use crate::error::Result;
use crate::nn::Mat;
use crate::rng::rng_from;

pub const SEPARATING_FEATURE: &str = "sep";
pub const ZERO_DAY_TAG: &str = "stealth";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub rows: usize,
    pub attack_fraction: f64,
    /// Distance between the class means along `sep`, in units of its std.
    pub separation: f64,
    /// Fraction of attack rows tagged as the held-out zero-day cluster.
    pub zero_day_fraction: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            rows: 5000,
            attack_fraction: 0.5,
            separation: 6.0,
            zero_day_fraction: 0.1,
        }
    }
}

pub fn blob_schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        Feature::numerical("sep"),
        Feature::numerical("shift"),
        Feature::numerical("noise_a"),
        Feature::numerical("noise_b"),
        Feature::numerical("bytes"),
        Feature::categorical("proto", ["tcp", "udp", "icmp"]),
    ])
    .expect("static schema is valid")
}

/// Generates the two-blob dataset. Attack rows carry the tags `flood` or
/// `scan`, plus [`ZERO_DAY_TAG`] for a cluster that is shifted along
/// `shift` but still separated along `sep`; benign rows carry `normal`.
pub fn two_blobs(cfg: &BlobConfig, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from(seed, &[0x5EED]);
    let std = Normal::new(0.0, 1.0).unwrap();
    let bytes = LogNormal::new(6.0, 1.0).unwrap();
    let half = cfg.separation / 2.0;
    let mut rows = Vec::with_capacity(cfg.rows);
    let mut labels = Vec::with_capacity(cfg.rows);
    let mut tags = Vec::with_capacity(cfg.rows);
    for _ in 0..cfg.rows {
        let attack = rng.random::<f64>() < cfg.attack_fraction;
        let zero_day = attack && rng.random::<f64>() < cfg.zero_day_fraction;
        let sign = if attack { 1.0 } else { -1.0 };
        let sep = sign * half + std.sample(&mut rng);
        let shift = if zero_day { 3.0 } else { sign * 0.75 } + std.sample(&mut rng);
        let na = std.sample(&mut rng);
        let nb = 2.0 * std.sample(&mut rng) + 10.0;
        let b: f64 = bytes.sample(&mut rng);
        let b = b.round();
        let probs: [f64; 3] = if attack { [0.15, 0.3, 0.55] } else { [0.6, 0.3, 0.1] };
        let u = rng.random::<f64>();
        let proto = if u < probs[0] {
            0.0
        } else if u < probs[0] + probs[1] {
            1.0
        } else {
            2.0
        };
        rows.push(vec![sep, shift, na, nb, b, proto]);
        labels.push(u8::from(attack));
        tags.push(
            match (attack, zero_day, rng.random::<bool>()) {
                (false, _, _) => "normal",
                (true, true, _) => ZERO_DAY_TAG,
                (true, false, true) => "flood",
                (true, false, false) => "scan",
            }
            .to_string(),
        );
    }
    Dataset::new(blob_schema(), Mat::from_rows(&rows)?, labels, Some(tags))
}

/// One numerical feature drawn from `N(mean, std²)`; all rows benign.
pub fn gaussian_1d(rows: usize, mean: f64, std: f64, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from(seed, &[0x1D]);
    let n = Normal::new(mean, std).unwrap();
    let values: Vec<f64> = (0..rows).map(|_| n.sample(&mut rng)).collect();
    Dataset::new(
        FeatureSchema::new(vec![Feature::numerical("x")])?,
        Mat::from_vec(rows, 1, values)?,
        vec![0; rows],
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let cfg = BlobConfig {
            rows: 2000,
            ..Default::default()
        };
        let a = two_blobs(&cfg, 4).unwrap();
        assert_eq!(a, two_blobs(&cfg, 4).unwrap());
        let attacks = a.labels.iter().filter(|&&l| l == 1).count();
        assert!((800..1200).contains(&attacks));
        assert!(!a.indices_with_tag(ZERO_DAY_TAG).is_empty());
    }

    #[test]
    fn classes_separate_along_sep() {
        let d = two_blobs(&BlobConfig::default(), 1).unwrap();
        let wrong = (0..d.len())
            .filter(|&r| (d.rows.get(r, 0) > 0.0) != (d.labels[r] == 1))
            .count();
        assert!((wrong as f64) < 0.01 * d.len() as f64);
    }
}
