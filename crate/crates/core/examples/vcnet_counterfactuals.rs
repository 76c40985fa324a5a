//! Trains the jointly optimized CVAE + classifier and flips attack rows to
//! benign by decoding with the target class.
//!
//! cargo run --release --example vcnet_counterfactuals

use tabcf::classifier::{train_blackbox, BLACKBOX_HIDDEN};
use tabcf::data::{split_and_pool, FittedPreprocessor};
use tabcf::metrics::one_validity;
use tabcf::synthetic::{two_blobs, BlobConfig};
use tabcf::train::TrainConfig;
use tabcf::vcnet::{train_vcnet, VcnetConfig};

fn main() -> tabcf::Result<()> {
    let data = two_blobs(&BlobConfig::default(), 7)?;
    let splits = split_and_pool(&data, 0.2, 100, 7)?;
    let pp = FittedPreprocessor::fit(&splits.train, 1000)?;
    let x = pp.encode(&splits.train.rows)?;
    let labels = &splits.train.labels;

    let blackbox = train_blackbox(&x, labels, &BLACKBOX_HIDDEN, &TrainConfig { epochs: 20, batch_size: 256, lr: 5e-4 }, &pp.schema().hash(), 1)?;
    let cfg = VcnetConfig { train: TrainConfig { epochs: 40, batch_size: 128, lr: 1e-3 }, ..Default::default() };
    let vcnet = train_vcnet(&x, labels, &pp.layout(), &cfg, 6)?;
    let test = pp.encode(&splits.test.rows)?;
    let own = vcnet.predict_proba(&test)?;
    let acc = own.iter().zip(&splits.test.labels).filter(|(p, &y)| u8::from(**p >= 0.5) == y).count() as f64 / own.len() as f64;
    println!("vcnet's own classifier test accuracy {acc:.3}");

    let mut batches = Vec::new();
    for (qid, row) in splits.pool.rows.iter_rows().enumerate() {
        batches.push(vcnet.generate_cf(&pp, &blackbox, qid, row, 0, 11)?);
    }
    for b in batches.iter().take(3) {
        println!("{:.2?} -> {:.2?} (black box p={:.3})", b.query, b.candidates.row(0), b.probability[0]);
    }
    println!("1-validity against the black box: {:.2}", one_validity(&batches)?);
    Ok(())
}
