//! Sparsity, validity, plausibility and timing, aggregated over seeded runs.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{BlackBoxClassifier, ClassifierMetrics};
use crate::data::{FeatureSchema, FittedPreprocessor};
use crate::error::{Error, Result};
use crate::explain::{score_candidates, CounterfactualBatch};
use crate::nn::Mat;

pub const DEFAULT_SPARSITY_TOL: f64 = 1e-3;
pub const DEFAULT_LOF_K: usize = 20;

/// Number of features that differ between two rows in original units.
/// Categorical values differ by inequality; numerical values when
/// `|a − b| > tol · max(|a|, |b|)`.
pub fn sparsity(a: &[f64], b: &[f64], schema: &FeatureSchema, tol: f64) -> Result<usize> {
    if a.len() != schema.len() || b.len() != schema.len() {
        return Err(Error::shape("sparsity row width", schema.len(), a.len().max(b.len())));
    }
    Ok(schema
        .features()
        .iter()
        .zip(a.iter().zip(b))
        .filter(|(f, (&x, &y))| {
            if f.is_categorical() {
                x != y
            } else {
                x != y && (x - y).abs() > tol * x.abs().max(y.abs())
            }
        })
        .count())
}

/// Recounts how many candidates the black box assigns to `target`.
pub fn k_validity(batch: &CounterfactualBatch, pp: &FittedPreprocessor, blackbox: &BlackBoxClassifier, target: u8) -> Result<usize> {
    let (valid, _) = score_candidates(pp, blackbox, &batch.candidates, target)?;
    Ok(valid.into_iter().filter(|&v| v).count())
}

/// Fraction of queries with at least one valid candidate.
pub fn one_validity(batches: &[CounterfactualBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Empty("one_validity needs at least one batch".into()));
    }
    Ok(batches.iter().filter(|b| b.valid_count() > 0).count() as f64 / batches.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Local outlier factor over a fixed reference set with Euclidean distance.
/// Neighborhoods hold exactly `k` points; distance ties go to the lower
/// index.
#[derive(Clone, Debug)]
pub struct LofIndex {
    points: Mat,
    k: usize,
    k_distance: Vec<f64>,
    lrd: Vec<f64>,
}

impl LofIndex {
    pub fn new(points: Mat, k: usize) -> Result<Self> {
        if k == 0 || k >= points.rows() {
            return Err(Error::InvalidArgument(format!(
                "LOF needs 0 < k < reference size, got k = {k} with {} points",
                points.rows()
            )));
        }
        let n = points.rows();
        let neighborhoods: Vec<Vec<(f64, usize)>> = (0..n)
            .into_par_iter()
            .map(|i| Self::nearest(&points, points.row(i), k, Some(i)))
            .collect();
        let k_distance: Vec<f64> = neighborhoods.iter().map(|nb| nb[k - 1].0).collect();
        let lrd = neighborhoods
            .iter()
            .map(|nb| Self::lrd_of(nb, &k_distance))
            .collect();
        Ok(LofIndex {
            points,
            k,
            k_distance,
            lrd,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn k_distances(&self) -> &[f64] {
        &self.k_distance
    }

    fn nearest(points: &Mat, p: &[f64], k: usize, skip: Option<usize>) -> Vec<(f64, usize)> {
        let mut d: Vec<(f64, usize)> = (0..points.rows())
            .filter(|&j| Some(j) != skip)
            .map(|j| (dist(p, points.row(j)), j))
            .collect();
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d
    }

    fn lrd_of(nb: &[(f64, usize)], k_distance: &[f64]) -> f64 {
        let mean = nb.iter().map(|&(d, j)| d.max(k_distance[j])).sum::<f64>() / nb.len() as f64;
        1.0 / (mean + 1e-10)
    }

    pub fn lof(&self, x: &[f64]) -> f64 {
        let nb = Self::nearest(&self.points, x, self.k, None);
        let own = Self::lrd_of(&nb, &self.k_distance);
        nb.iter().map(|&(_, j)| self.lrd[j]).sum::<f64>() / (nb.len() as f64 * own)
    }
}

/// Natural log of the local outlier factor of an encoded row.
pub fn log_lof(index: &LofIndex, x: &[f64]) -> f64 {
    index.lof(x).ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }

    fn cell(&self, digits: usize) -> String {
        format!("{:.*}±{:.*}", digits, self.mean, digits, self.std)
    }

    fn time_cell(&self) -> String {
        if self.mean < 0.01 {
            format!("{:.1e}±{:.1e}", self.mean, self.std)
        } else {
            self.cell(3)
        }
    }
}

/// Per-query metrics retained alongside a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub method: String,
    pub seed: u64,
    pub query_id: usize,
    pub k: usize,
    pub valid_count: usize,
    pub sparsity_sum: f64,
    pub log_lof_sum: f64,
    pub seconds: f64,
}

/// Metrics of one method over one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub sparsity: f64,
    pub k_validity: f64,
    pub validity: f64,
    pub log_lof: f64,
    pub seconds: f64,
}

impl RunMetrics {
    fn from_records(records: &[QueryRecord]) -> RunMetrics {
        let candidates: usize = records.iter().map(|r| r.k).sum();
        let q = records.len() as f64;
        RunMetrics {
            sparsity: records.iter().map(|r| r.sparsity_sum).sum::<f64>() / candidates as f64,
            k_validity: records.iter().map(|r| r.valid_count as f64).sum::<f64>() / q,
            validity: records.iter().filter(|r| r.valid_count > 0).count() as f64 / q,
            log_lof: records.iter().map(|r| r.log_lof_sum).sum::<f64>() / candidates as f64,
            seconds: records.iter().map(|r| r.seconds).sum::<f64>() / q,
        }
    }
}

/// Shared inputs for scoring candidates.
pub struct EvalContext<'a> {
    pub preprocessor: &'a FittedPreprocessor,
    pub lof: &'a LofIndex,
    pub tol: f64,
}

impl EvalContext<'_> {
    pub fn records(&self, method: &str, seed: u64, batches: &[CounterfactualBatch]) -> Result<Vec<QueryRecord>> {
        let schema = self.preprocessor.schema();
        batches
            .par_iter()
            .map(|b| {
                let encoded = self.preprocessor.encode(&b.candidates)?;
                let mut sp = 0.0;
                let mut lof = 0.0;
                for c in 0..b.k() {
                    sp += sparsity(&b.query, b.candidates.row(c), schema, self.tol)? as f64;
                    lof += log_lof(self.lof, encoded.row(c));
                }
                Ok(QueryRecord {
                    method: method.to_string(),
                    seed,
                    query_id: b.query_id,
                    k: b.k(),
                    valid_count: b.valid_count(),
                    sparsity_sum: sp,
                    log_lof_sum: lof,
                    seconds: b.seconds,
                })
            })
            .collect()
    }
}

/// Outcome of one method on one seed, as fed to [`aggregate`].
pub struct MethodRun {
    pub seed: u64,
    /// Scored queries, or why the run produced none.
    pub records: Result<Vec<QueryRecord>>,
    pub classifier: Option<ClassifierMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub sparsity: Stat,
    /// Absent for single-candidate methods.
    pub k_validity: Option<Stat>,
    pub validity: Stat,
    pub log_lof: Stat,
    pub time: Stat,
    pub accuracy: Option<Stat>,
    pub f1: Option<Stat>,
    /// Set when any run failed; numeric cells then render as dashes.
    pub failure: Option<String>,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pool_size: usize,
    pub lof_k: usize,
    pub rows: Vec<EvalRow>,
    pub records: Vec<QueryRecord>,
}

/// Aggregates one method's runs into a row and its raw records.
pub fn aggregate(method: &str, runs: Vec<MethodRun>) -> (EvalRow, Vec<QueryRecord>) {
    let mut per_run = Vec::new();
    let mut records = Vec::new();
    let mut acc = Vec::new();
    let mut f1 = Vec::new();
    let mut failure = None;
    let mut multi = false;
    let seeds = runs.len();
    for run in runs {
        let scored = run.records.and_then(|r| {
            if r.is_empty() {
                return Err(Error::Empty("no queries explained".into()));
            }
            Ok(r)
        });
        match scored {
            Ok(r) => {
                multi |= r.iter().any(|q| q.k > 1);
                per_run.push(RunMetrics::from_records(&r));
                records.extend(r);
            }
            Err(e) => {
                warn!("{method} failed for seed {}: {e}", run.seed);
                failure = Some(e.to_string());
            }
        }
        if let Some(m) = run.classifier {
            acc.push(m.accuracy);
            f1.push(m.f1);
        }
    }
    let col = |f: fn(&RunMetrics) -> f64| Stat::of(&per_run.iter().map(f).collect::<Vec<_>>());
    let row = EvalRow {
        method: method.to_string(),
        sparsity: col(|m| m.sparsity),
        k_validity: multi.then(|| col(|m| m.k_validity)),
        validity: col(|m| m.validity),
        log_lof: col(|m| m.log_lof),
        time: col(|m| m.seconds),
        accuracy: (!acc.is_empty()).then(|| Stat::of(&acc)),
        f1: (!f1.is_empty()).then(|| Stat::of(&f1)),
        failure,
        seeds,
    };
    (row, records)
}

const CSV_HEADER: [&str; 17] = [
    "method",
    "sparsity_mean",
    "sparsity_std",
    "k_validity_mean",
    "k_validity_std",
    "validity_mean",
    "validity_std",
    "log_lof_mean",
    "log_lof_std",
    "time_mean",
    "time_std",
    "accuracy_mean",
    "accuracy_std",
    "f1_mean",
    "f1_std",
    "seeds",
    "status",
];

fn stat_cells(s: Option<&Stat>, failed: bool) -> [String; 2] {
    match s {
        Some(s) if !failed => [s.mean.to_string(), s.std.to_string()],
        _ => ["-".into(), "-".into()],
    }
}

impl EvalRow {
    fn csv_cells(&self) -> Vec<String> {
        let failed = self.failure.is_some();
        let mut out = vec![self.method.clone()];
        for s in [
            Some(&self.sparsity),
            self.k_validity.as_ref(),
            Some(&self.validity),
            Some(&self.log_lof),
            Some(&self.time),
        ] {
            out.extend(stat_cells(s, failed));
        }
        out.extend(stat_cells(self.accuracy.as_ref(), false));
        out.extend(stat_cells(self.f1.as_ref(), false));
        out.push(self.seeds.to_string());
        out.push(match &self.failure {
            Some(e) => format!("failed: {e}"),
            None => "ok".into(),
        });
        out
    }
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record(r.csv_cells())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_records(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Table with columns Sparsity, k-validity, validity, log-LOF, time,
    /// Acc/F1; failed methods show dashes.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Pool of {} attack queries; log-LOF is the natural log, k_lof = {}.\n",
            self.pool_size, self.lof_k
        );
        s.push_str("| Method | Sparsity | k-validity | validity | log-LOF | time (s) | Acc/F1 |\n");
        s.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let failed = r.failure.is_some();
            let cell = |st: Option<&Stat>, d: usize| match st {
                Some(st) if !failed => st.cell(d),
                _ => "-".to_string(),
            };
            let accf1 = match (&r.accuracy, &r.f1) {
                (Some(a), Some(f)) => format!("{:.2}/{:.2}", 100.0 * a.mean, 100.0 * f.mean),
                _ => "-".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.method,
                cell(Some(&r.sparsity), 2),
                cell(r.k_validity.as_ref(), 2),
                cell(Some(&r.validity), 2),
                cell(Some(&r.log_lof), 2),
                if failed { "-".to_string() } else { r.time.time_cell() },
                accf1
            );
        }
        s
    }
}

/// Reports for several pool sizes, one block per size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolSeries {
    pub blocks: Vec<EvalReport>,
}

impl PoolSeries {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["pool_size"];
        header.extend(CSV_HEADER);
        w.write_record(&header)?;
        for b in &self.blocks {
            for r in &b.rows {
                let mut rec = vec![b.pool_size.to_string()];
                rec.extend(r.csv_cells());
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
