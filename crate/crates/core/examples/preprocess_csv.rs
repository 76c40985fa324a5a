//! Writes the synthetic data to CSV, loads it back through a declarative
//! schema, drops correlated columns and fits the quantile/one-hot encoder.
//!
//! cargo run --release --example preprocess_csv

use tabcf::data::{correlation_filter, load_csv, FeatureConfig, FittedPreprocessor, SchemaConfig};
use tabcf::nn::Mat;
use tabcf::synthetic::{two_blobs, BlobConfig};

fn main() -> tabcf::Result<()> {
    let dir = std::env::temp_dir().join("tabcf-preprocess");
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join("blobs.csv");
    two_blobs(&BlobConfig { rows: 2000, ..Default::default() }, 1)?.write_csv(&csv, None)?;

    let num = |n: &str| FeatureConfig { name: n.into(), kind: "numerical".into(), categories: None };
    let schema = SchemaConfig {
        label_column: "label".into(),
        positive_label: "1".into(),
        attack_tag_column: Some("tag".into()),
        features: vec![
            num("sep"),
            num("shift"),
            num("noise_a"),
            num("noise_b"),
            num("bytes"),
            FeatureConfig { name: "proto".into(), kind: "categorical".into(), categories: Some(vec!["tcp".into(), "udp".into(), "icmp".into()]) },
        ],
    };
    let (data, report) = load_csv(&[csv.as_path()], &schema)?;
    println!("{report:?}");
    let filtered = correlation_filter(&data, 0.95)?;
    println!("dropped {:?}, zero variance {:?}", filtered.dropped, filtered.zero_variance);

    let pp = FittedPreprocessor::fit(&filtered.dataset, 1000)?;
    let first = Mat::row_vector(filtered.dataset.rows.row(0));
    let enc = pp.encode(&first)?;
    println!("row      {:.3?}", first.row(0));
    println!("encoded  {:.3?}", enc.row(0));
    println!("decoded  {:.3?}", pp.decode(&enc)?.row(0));
    Ok(())
}
