//! Gradient-search counterfactuals with a growing validity weight, on a
//! trained black box and on a plain logistic model.
//!
//! cargo run --release --example wachter_baseline

use tabcf::baselines::{wachter_cf, wachter_search, WachterConfig};
use tabcf::classifier::{train_blackbox, BlackBoxClassifier, BLACKBOX_HIDDEN};
use tabcf::data::{split_and_pool, FittedPreprocessor};
use tabcf::metrics::one_validity;
use tabcf::nn::{Activation, Dense, DenseNet, Mat};
use tabcf::synthetic::{two_blobs, BlobConfig};
use tabcf::train::{TrainConfig, TrainingCurve};

fn main() -> tabcf::Result<()> {
    let data = two_blobs(&BlobConfig::default(), 7)?;
    let splits = split_and_pool(&data, 0.2, 100, 7)?;
    let pp = FittedPreprocessor::fit(&splits.train, 1000)?;
    let x = pp.encode(&splits.train.rows)?;
    let cfg = WachterConfig::default();

    let mlp = train_blackbox(&x, &splits.train.labels, &BLACKBOX_HIDDEN, &TrainConfig { epochs: 20, batch_size: 256, lr: 5e-4 }, &pp.schema().hash(), 1)?;
    let mut w = Mat::zeros(pp.encoded_width(), 1);
    w.set(0, 0, 0.8);
    let logistic = BlackBoxClassifier {
        net: DenseNet::from_layers(vec![Dense { weight: w, bias: vec![0.0], activation: Activation::Sigmoid }])?,
        schema_hash: pp.schema().hash(),
        curve: TrainingCurve::default(),
        degenerate: false,
    };

    for (name, bb) in [("mlp", &mlp), ("logistic", &logistic)] {
        let mut batches = Vec::new();
        for (qid, row) in splits.pool.rows.iter_rows().enumerate() {
            batches.push(wachter_cf(bb, &pp, qid, row, 0, &cfg)?);
        }
        let q = pp.encode(&Mat::row_vector(splits.pool.rows.row(0)))?.into_vec();
        let s = wachter_search(bb, &q, 0, &cfg)?;
        println!(
            "{name:>8}: 1-validity {:.2}; first query crossed={} after {} steps, lambda reached {}",
            one_validity(&batches)?,
            s.crossed,
            s.iterations,
            s.lambdas.last().copied().unwrap_or(0.0)
        );
    }
    Ok(())
}
