//! Scores VCNet and Wachter counterfactuals with sparsity, validity and
//! log-LOF, and prints the comparison table.
//!
//! cargo run --release --example evaluate_methods

use tabcf::baselines::{wachter_cf, WachterConfig};
use tabcf::classifier::{train_blackbox, BLACKBOX_HIDDEN};
use tabcf::data::{split_and_pool, FittedPreprocessor};
use tabcf::metrics::{aggregate, EvalContext, EvalReport, LofIndex, MethodRun, DEFAULT_LOF_K, DEFAULT_SPARSITY_TOL};
use tabcf::synthetic::{two_blobs, BlobConfig};
use tabcf::train::TrainConfig;
use tabcf::vcnet::{train_vcnet, VcnetConfig};

fn main() -> tabcf::Result<()> {
    let data = two_blobs(&BlobConfig::default(), 7)?;
    let pool_size = 100;
    let splits = split_and_pool(&data, 0.2, pool_size, 7)?;
    let pp = FittedPreprocessor::fit(&splits.train, 1000)?;
    let x = pp.encode(&splits.train.rows)?;
    let labels = &splits.train.labels;
    let bb = train_blackbox(&x, labels, &BLACKBOX_HIDDEN, &TrainConfig { epochs: 20, batch_size: 256, lr: 5e-4 }, &pp.schema().hash(), 1)?;
    let clf = bb.evaluate(&pp.encode(&splits.test.rows)?, &splits.test.labels)?;
    let vcnet = train_vcnet(&x, labels, &pp.layout(), &VcnetConfig { train: TrainConfig { epochs: 40, batch_size: 128, lr: 1e-3 }, ..Default::default() }, 6)?;

    let lof = LofIndex::new(x.clone(), DEFAULT_LOF_K)?;
    let ctx = EvalContext { preprocessor: &pp, lof: &lof, tol: DEFAULT_SPARSITY_TOL };
    let queries = &splits.pool.rows;
    let mut report = EvalReport { pool_size, lof_k: DEFAULT_LOF_K, ..Default::default() };

    let vc = queries.iter_rows().enumerate().map(|(q, r)| vcnet.generate_cf(&pp, &bb, q, r, 0, 11)).collect::<tabcf::Result<Vec<_>>>()?;
    let wa = queries.iter_rows().enumerate().map(|(q, r)| wachter_cf(&bb, &pp, q, r, 0, &WachterConfig::default())).collect::<tabcf::Result<Vec<_>>>()?;
    for (name, batches) in [("vcnet", vc), ("wachter", wa)] {
        let run = MethodRun { seed: 0, records: ctx.records(name, 0, &batches), classifier: Some(clf) };
        let (row, records) = aggregate(name, vec![run]);
        report.rows.push(row);
        report.records.extend(records);
    }
    println!("{}", report.to_markdown());
    Ok(())
}
