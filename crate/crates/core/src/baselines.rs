//! Gradient-descent counterfactuals in the style of Wachter et al.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{BlackBoxClassifier, DECISION_THRESHOLD};
use crate::data::FittedPreprocessor;
use crate::error::{Error, Result};
use crate::explain::{score_encoded, CounterfactualBatch};
use crate::nn::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WachterConfig {
    pub lambda_init: f64,
    pub lambda_growth: f64,
    pub max_outer: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    /// Required distance past 0.5 before the search stops.
    pub margin: f64,
}

impl Default for WachterConfig {
    fn default() -> Self {
        WachterConfig {
            lambda_init: 0.1,
            lambda_growth: 2.0,
            max_outer: 10,
            inner_steps: 100,
            step_size: 0.05,
            margin: 0.0,
        }
    }
}

impl WachterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_init > 0.0 && self.lambda_growth > 1.0 && self.step_size > 0.0 && self.margin >= 0.0) {
            return Err(Error::InvalidArgument(
                "Wachter needs positive λ and step size, growth > 1 and a non-negative margin".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WachterSearch {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// λ in force at each outer iteration that ran.
    pub lambdas: Vec<f64>,
    pub crossed: bool,
}

fn crossed(p: f64, target: u8, margin: f64) -> bool {
    if target == 0 {
        p < DECISION_THRESHOLD - margin
    } else {
        p >= DECISION_THRESHOLD + margin
    }
}

/// Minimizes `λ (f(x') − y')² + ‖x' − x‖₁` over the encoded input, raising
/// λ by `lambda_growth` after every `inner_steps` steps, and stops as soon
/// as the prediction crosses the decision threshold.
pub fn wachter_search(blackbox: &BlackBoxClassifier, x: &[f64], target: u8, cfg: &WachterConfig) -> Result<WachterSearch> {
    cfg.validate()?;
    let y = target as f64;
    let mut cur = x.to_vec();
    let mut lambda = cfg.lambda_init;
    let mut lambdas = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_outer {
        lambdas.push(lambda);
        for _ in 0..cfg.inner_steps {
            let (probs, g) = blackbox.prob_and_input_grad(&Mat::row_vector(&cur), &|_, p| 2.0 * lambda * (p - y))?;
            if crossed(probs[0], target, cfg.margin) {
                return Ok(WachterSearch { x: cur, iterations, lambdas, crossed: true });
            }
            for (j, v) in cur.iter_mut().enumerate() {
                let d = *v - x[j];
                let l1 = if d == 0.0 { 0.0 } else { d.signum() };
                *v -= cfg.step_size * (g.get(0, j) + l1);
            }
            iterations += 1;
        }
        lambda *= cfg.lambda_growth;
    }
    let p = blackbox.predict_proba(&Mat::row_vector(&cur))?[0];
    Ok(WachterSearch {
        x: cur,
        iterations,
        lambdas,
        crossed: crossed(p, target, cfg.margin),
    })
}

/// One counterfactual for a query in original units.
pub fn wachter_cf(
    blackbox: &BlackBoxClassifier,
    pp: &FittedPreprocessor,
    query_id: usize,
    query: &[f64],
    target: u8,
    cfg: &WachterConfig,
) -> Result<CounterfactualBatch> {
    let start = Instant::now();
    let x = pp.encode(&Mat::row_vector(query))?.into_vec();
    let search = wachter_search(blackbox, &x, target, cfg)?;
    let (candidates, valid, probability) = if search.iterations == 0 {
        // untouched: report the query itself rather than its decode
        let c = Mat::row_vector(query);
        let (v, p) = crate::explain::score_candidates(pp, blackbox, &c, target)?;
        (c, v, p)
    } else {
        score_encoded(pp, blackbox, &Mat::row_vector(&search.x), query, target)?
    };
    Ok(CounterfactualBatch {
        query_id,
        query: query.to_vec(),
        candidates,
        valid,
        probability,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Dense, DenseNet};
    use crate::train::TrainingCurve;

    /// f(x) = σ(w (x − b)) on a single input.
    fn logistic(w: f64, b: f64) -> BlackBoxClassifier {
        BlackBoxClassifier {
            net: DenseNet::from_layers(vec![Dense {
                weight: Mat::from_vec(1, 1, vec![w]).unwrap(),
                bias: vec![-w * b],
                activation: Activation::Sigmoid,
            }])
            .unwrap(),
            schema_hash: String::new(),
            curve: TrainingCurve::default(),
            degenerate: false,
        }
    }

    #[test]
    fn crosses_a_logistic_boundary() {
        let f = logistic(3.0, 1.0);
        let s = wachter_search(&f, &[2.5], 0, &WachterConfig::default()).unwrap();
        assert!(s.crossed);
        assert!(s.x[0] < 1.0, "{}", s.x[0]);
        assert!(s.lambdas.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn already_target_takes_no_steps() {
        let f = logistic(3.0, 1.0);
        let s = wachter_search(&f, &[-2.0], 0, &WachterConfig::default()).unwrap();
        assert_eq!(s.iterations, 0);
        assert_eq!(s.x, vec![-2.0]);
    }

    #[test]
    fn zero_budget_leaves_query() {
        let f = logistic(3.0, 1.0);
        let cfg = WachterConfig {
            max_outer: 0,
            ..Default::default()
        };
        let s = wachter_search(&f, &[2.5], 0, &cfg).unwrap();
        assert!(!s.crossed);
        assert_eq!(s.x, vec![2.5]);
        assert!(WachterConfig { lambda_growth: 1.0, ..Default::default() }.validate().is_err());
    }
}
