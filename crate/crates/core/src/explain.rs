//! Candidate batches shared by every explanation method, and their CSV form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;

use crate::classifier::BlackBoxClassifier;
use crate::data::{FeatureSchema, FittedPreprocessor};
use crate::error::{Error, Result};
use crate::nn::Mat;

/// Candidates for one query, all in original feature units.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualBatch {
    pub query_id: usize,
    pub query: Vec<f64>,
    pub candidates: Mat,
    pub valid: Vec<bool>,
    pub probability: Vec<f64>,
    pub seconds: f64,
}

impl CounterfactualBatch {
    pub fn k(&self) -> usize {
        self.candidates.rows()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Decodes encoded samples to original units and scores them with the
/// black box. A candidate is valid when the black box assigns it `target`.
/// Rows that are not finite are kept as the query and marked invalid.
pub fn score_encoded(
    pp: &FittedPreprocessor,
    blackbox: &BlackBoxClassifier,
    encoded: &Mat,
    query: &[f64],
    target: u8,
) -> Result<(Mat, Vec<bool>, Vec<f64>)> {
    let mut finite = vec![true; encoded.rows()];
    let mut clean = encoded.clone();
    for r in 0..clean.rows() {
        if clean.row(r).iter().any(|v| !v.is_finite()) {
            warn!("non-finite sample in row {r}; treated as invalid");
            finite[r] = false;
            clean.row_mut(r).copy_from_slice(&pp.encode(&Mat::row_vector(query))?.into_vec());
        }
    }
    let candidates = pp.decode(&clean)?;
    let (valid, probs) = score_candidates(pp, blackbox, &candidates, target)?;
    let valid = valid.into_iter().zip(finite).map(|(v, f)| v && f).collect();
    Ok((candidates, valid, probs))
}

/// Black-box verdicts on candidates already in original units.
pub fn score_candidates(
    pp: &FittedPreprocessor,
    blackbox: &BlackBoxClassifier,
    candidates: &Mat,
    target: u8,
) -> Result<(Vec<bool>, Vec<f64>)> {
    let probs = blackbox.predict_proba(&pp.encode(candidates)?)?;
    let valid = probs
        .iter()
        .map(|&p| u8::from(p >= crate::classifier::DECISION_THRESHOLD) == target)
        .collect();
    Ok((valid, probs))
}

pub fn timing_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_owned();
    s.push(".timing.csv");
    PathBuf::from(s)
}

/// Writes `query_id, chain_id, <features>, valid, probability` rows and a
/// `<path>.timing.csv` sidecar of `query_id, seconds`.
pub fn write_explanations(path: &Path, schema: &FeatureSchema, batches: &[CounterfactualBatch]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["query_id".to_string(), "chain_id".to_string()];
    header.extend(schema.names().iter().map(|s| s.to_string()));
    header.extend(["valid".to_string(), "probability".to_string()]);
    w.write_record(&header)?;
    for b in batches {
        for c in 0..b.k() {
            let mut rec = vec![b.query_id.to_string(), c.to_string()];
            rec.extend(b.candidates.row(c).iter().enumerate().map(|(j, &v)| schema.render_value(j, v)));
            rec.push(u8::from(b.valid[c]).to_string());
            rec.push(b.probability[c].to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let mut t = csv::Writer::from_path(timing_path(path))?;
    t.write_record(["query_id", "seconds"])?;
    for b in batches {
        t.write_record([b.query_id.to_string(), b.seconds.to_string()])?;
    }
    t.flush()?;
    Ok(())
}

/// Reads an explanation CSV back, joining query rows from `queries` by id
/// and timing from the sidecar when present.
pub fn read_explanations(
    path: &Path,
    pp: &FittedPreprocessor,
    queries: &BTreeMap<usize, Vec<f64>>,
) -> Result<Vec<CounterfactualBatch>> {
    let schema = pp.schema();
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let width = schema.len();
    if header.len() != width + 4 {
        return Err(Error::shape("explanation CSV columns", width + 4, header.len()));
    }
    let mut rows: BTreeMap<usize, (Vec<Vec<String>>, Vec<bool>, Vec<f64>)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |what: &str| Error::Schema(format!("bad {what} in {}", path.display()));
        let qid: usize = rec[0].parse().map_err(|_| bad("query_id"))?;
        let entry = rows.entry(qid).or_default();
        entry.0.push(rec.iter().skip(2).take(width).map(str::to_string).collect());
        entry.1.push(&rec[width + 2] == "1");
        entry.2.push(rec[width + 3].parse().map_err(|_| bad("probability"))?);
    }
    let mut seconds = BTreeMap::new();
    let tp = timing_path(path);
    if tp.exists() {
        let mut t = csv::Reader::from_path(&tp)?;
        for rec in t.records() {
            let rec = rec?;
            if let (Ok(q), Ok(s)) = (rec[0].parse::<usize>(), rec[1].parse::<f64>()) {
                seconds.insert(q, s);
            }
        }
    }
    let mut out = Vec::with_capacity(rows.len());
    for (qid, (cells, valid, probability)) in rows {
        let query = queries
            .get(&qid)
            .ok_or_else(|| Error::Schema(format!("query {qid} missing from pool")))?
            .clone();
        out.push(CounterfactualBatch {
            query_id: qid,
            query,
            candidates: pp.parse_strings(&cells)?,
            valid,
            probability,
            seconds: seconds.get(&qid).copied().unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}
