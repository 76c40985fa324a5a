//! Tabular ingestion and preprocessing.
//!
//! Rows are held in original units: numerical features as reals and
//! categorical features as indices into the feature's vocabulary (label
//! encoding). The encoded representation used by every model is the
//! quantile-normalized numerical block followed by one one-hot group per
//! categorical feature, both in schema order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::container::{Container, DType};
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical { categories: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl Feature {
    pub fn numerical(name: impl Into<String>) -> Self {
        Feature {
            name: name.into(),
            kind: FeatureKind::Numerical,
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        Feature {
            name: name.into(),
            kind: FeatureKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { categories } => Some(categories),
            FeatureKind::Numerical => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    features: Vec<Feature>,
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &features {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name {:?}", f.name)));
            }
            if let Some(cats) = f.categories() {
                if cats.len() < 2 {
                    return Err(Error::Schema(format!(
                        "categorical feature {:?} needs at least 2 categories, has {}",
                        f.name,
                        cats.len()
                    )));
                }
                let distinct: BTreeSet<_> = cats.iter().collect();
                if distinct.len() != cats.len() {
                    return Err(Error::Schema(format!("categorical feature {:?} repeats a category", f.name)));
                }
            }
        }
        Ok(FeatureSchema { features })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn numerical_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.features[i].is_categorical()).collect()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.features[i].is_categorical()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    /// Stable short hash of the schema, recorded in model containers.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    pub fn without(&self, drop: &[usize]) -> Result<Self> {
        FeatureSchema::new(
            self.features
                .iter()
                .enumerate()
                .filter(|(i, _)| !drop.contains(i))
                .map(|(_, f)| f.clone())
                .collect(),
        )
    }

    pub fn layout(&self) -> EncodedLayout {
        let num = self.numerical_indices().len();
        let mut groups = Vec::new();
        let mut start = num;
        for f in &self.features {
            if let Some(c) = f.categories() {
                groups.push(CatGroup { start, k: c.len() });
                start += c.len();
            }
        }
        EncodedLayout { num, groups }
    }

    /// Human-readable value for feature `j` (category name or number).
    pub fn render_value(&self, j: usize, v: f64) -> String {
        match self.features[j].categories() {
            Some(c) => c.get(v as usize).cloned().unwrap_or_else(|| format!("#{v}")),
            None => format!("{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CatGroup {
    pub start: usize,
    pub k: usize,
}

impl CatGroup {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.k
    }
}

/// Column layout of the encoded representation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedLayout {
    pub num: usize,
    pub groups: Vec<CatGroup>,
}

impl EncodedLayout {
    pub fn width(&self) -> usize {
        self.num + self.groups.iter().map(|g| g.k).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    /// One row per instance, one column per schema feature.
    pub rows: Mat,
    /// 0 benign, 1 attack.
    pub labels: Vec<u8>,
    pub tags: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, rows: Mat, labels: Vec<u8>, tags: Option<Vec<String>>) -> Result<Self> {
        if rows.cols() != schema.len() {
            return Err(Error::shape("dataset row width", schema.len(), rows.cols()));
        }
        if labels.len() != rows.rows() {
            return Err(Error::shape("dataset labels", rows.rows(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("label {bad} is not binary")));
        }
        if let Some(t) = &tags {
            if t.len() != rows.rows() {
                return Err(Error::shape("dataset tags", rows.rows(), t.len()));
            }
        }
        for (j, f) in schema.features().iter().enumerate() {
            if let Some(c) = f.categories() {
                for r in 0..rows.rows() {
                    let v = rows.get(r, j);
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= c.len() {
                        return Err(Error::Schema(format!(
                            "row {r}: {v} is not a category index of {:?}",
                            f.name
                        )));
                    }
                }
            }
        }
        Ok(Dataset { schema, rows, labels, tags })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: self.rows.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            tags: self.tags.as_ref().map(|t| idx.iter().map(|&i| t[i].clone()).collect()),
        }
    }

    pub fn indices_with_label(&self, label: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn indices_with_tag(&self, tag: &str) -> Vec<usize> {
        match &self.tags {
            Some(t) => (0..self.len()).filter(|&i| t[i] == tag).collect(),
            None => Vec::new(),
        }
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&l| l as f64).collect()
    }

    /// Keeps only the named schema columns (used after correlation filtering).
    pub fn drop_features(&self, drop: &[usize]) -> Result<Dataset> {
        let schema = self.schema.without(drop)?;
        let keep: Vec<usize> = (0..self.schema.len()).filter(|j| !drop.contains(j)).collect();
        let mut rows = Mat::zeros(self.len(), keep.len());
        for r in 0..self.len() {
            let src = self.rows.row(r);
            for (o, &j) in keep.iter().enumerate() {
                rows.set(r, o, src[j]);
            }
        }
        Dataset::new(schema, rows, self.labels.clone(), self.tags.clone())
    }

    /// Writes rows in original units (category names rendered) with an
    /// optional leading id column. Tags, when present, follow the label in a
    /// `tag` column.
    pub fn write_csv(&self, path: &Path, id_column: Option<&str>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = id_column.iter().map(|s| s.to_string()).collect();
        header.extend(self.schema.names().iter().map(|s| s.to_string()));
        header.push("label".into());
        if self.tags.is_some() {
            header.push("tag".into());
        }
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = id_column.iter().map(|_| r.to_string()).collect();
            rec.extend(self.rows.row(r).iter().enumerate().map(|(j, &v)| self.schema.render_value(j, v)));
            rec.push(self.labels[r].to_string());
            if let Some(t) = &self.tags {
                rec.push(t[r].clone());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub categories: Option<Vec<String>>,
}

/// Declarative description of a CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub label_column: String,
    pub positive_label: String,
    #[serde(default)]
    pub attack_tag_column: Option<String>,
    pub features: Vec<FeatureConfig>,
}

impl SchemaConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub rows_dropped: usize,
    /// First few reasons, for diagnostics.
    pub drop_reasons: Vec<String>,
}

/// Reads one or more CSV files (same columns, any order) into one dataset.
pub fn load_csv(paths: &[&Path], cfg: &SchemaConfig) -> Result<(Dataset, LoadReport)> {
    if paths.is_empty() {
        return Err(Error::Empty("no input files".into()));
    }
    // Every record is normalized to [features.., label, tag?] in config order.
    let mut records: Vec<Vec<String>> = Vec::new();
    for path in paths {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let mut cols = cfg.features.iter().map(|f| find(&f.name)).collect::<Result<Vec<_>>>()?;
        cols.push(find(&cfg.label_column)?);
        if let Some(tag) = &cfg.attack_tag_column {
            cols.push(find(tag)?);
        }
        for rec in rdr.records() {
            let rec = rec?;
            records.push(cols.iter().map(|&c| rec.get(c).unwrap_or("").trim().to_string()).collect());
        }
    }
    let feat_cols: Vec<usize> = (0..cfg.features.len()).collect();
    let label_col = cfg.features.len();
    let tag_col = cfg.attack_tag_column.as_ref().map(|_| label_col + 1);
    if records.is_empty() {
        return Err(Error::Empty(format!("{} contains no data rows", paths[0].display())));
    }

    let mut report = LoadReport {
        rows_read: records.len(),
        ..Default::default()
    };

    let mut label_values: BTreeSet<String> = BTreeSet::new();
    for rec in &records {
        label_values.insert(rec[label_col].clone());
    }
    let negatives: Vec<&String> = label_values.iter().filter(|v| **v != cfg.positive_label).collect();
    if negatives.len() > 1 {
        return Err(Error::NonBinaryLabel(label_values.into_iter().collect()));
    }

    let mut vocab: Vec<Option<Vec<String>>> = cfg
        .features
        .iter()
        .map(|f| match f.kind.as_str() {
            "numerical" => Ok(None),
            "categorical" => Ok(Some(f.categories.clone().unwrap_or_default())),
            other => Err(Error::Config(format!("feature {:?}: unknown kind {other:?}", f.name))),
        })
        .collect::<Result<_>>()?;
    for (fi, f) in cfg.features.iter().enumerate() {
        if f.kind == "categorical" && f.categories.is_none() {
            let seen: BTreeSet<String> = records
                .iter()
                .map(|r| r[feat_cols[fi]].clone())
                .filter(|s| !s.is_empty())
                .collect();
            vocab[fi] = Some(seen.into_iter().collect());
        }
    }
    let features = cfg
        .features
        .iter()
        .zip(&vocab)
        .map(|(f, v)| match v {
            None => Feature::numerical(&f.name),
            Some(c) => Feature::categorical(&f.name, c.clone()),
        })
        .collect();
    let schema = FeatureSchema::new(features)?;
    let lookup: Vec<Option<BTreeMap<&str, usize>>> = vocab
        .iter()
        .map(|v| v.as_ref().map(|c| c.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()))
        .collect();

    let width = cfg.features.len();
    let mut data = Vec::with_capacity(records.len() * width);
    let mut labels = Vec::with_capacity(records.len());
    let mut tags = tag_col.map(|_| Vec::with_capacity(records.len()));
    let mut row = vec![0.0; width];
    'rec: for (ri, rec) in records.iter().enumerate() {
        for (fi, &c) in feat_cols.iter().enumerate() {
            let cell = rec[c].as_str();
            let parsed = match &lookup[fi] {
                None => cell.parse::<f64>().ok().filter(|v| v.is_finite()),
                Some(map) => map.get(cell).map(|&i| i as f64),
            };
            match parsed {
                Some(v) => row[fi] = v,
                None => {
                    report.rows_dropped += 1;
                    if report.drop_reasons.len() < 10 {
                        report
                            .drop_reasons
                            .push(format!("row {}: bad value {cell:?} for {:?}", ri + 1, cfg.features[fi].name));
                    }
                    continue 'rec;
                }
            }
        }
        data.extend_from_slice(&row);
        let lv = rec[label_col].as_str();
        labels.push(u8::from(lv == cfg.positive_label));
        if let (Some(t), Some(tc)) = (tags.as_mut(), tag_col) {
            t.push(rec[tc].clone());
        }
    }
    report.rows_kept = labels.len();
    if report.rows_dropped > 0 {
        warn!("dropped {} malformed rows out of {}", report.rows_dropped, report.rows_read);
    }
    let rows = Mat::from_vec(labels.len(), width, data)?;
    Ok((Dataset::new(schema, rows, labels, tags)?, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationFilter {
    pub dataset: Dataset,
    pub dropped: Vec<String>,
    /// Zero-variance numerical features: kept, never considered correlated.
    pub zero_variance: Vec<String>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Drops the later feature (schema order) of every numerical pair whose
/// absolute Pearson correlation exceeds `threshold`.
pub fn correlation_filter(d: &Dataset, threshold: f64) -> Result<CorrelationFilter> {
    let num = d.schema.numerical_indices();
    if num.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation filtering needs at least 2 numerical features, found {}",
            num.len()
        )));
    }
    let column = |j: usize| -> Vec<f64> { (0..d.len()).map(|r| d.rows.get(r, j)).collect() };
    let cols: Vec<Vec<f64>> = num.iter().map(|&j| column(j)).collect();
    let names = d.schema.names();
    let mut zero_variance = Vec::new();
    for (a, &j) in num.iter().enumerate() {
        if cols[a].iter().all(|&v| v == cols[a][0]) {
            warn!("feature {:?} has zero variance; kept", names[j]);
            zero_variance.push(names[j].to_string());
        }
    }
    let mut drop = BTreeSet::new();
    for a in 0..num.len() {
        for b in a + 1..num.len() {
            if let Some(r) = pearson(&cols[a], &cols[b]) {
                if r.abs() > threshold {
                    drop.insert(num[b]);
                }
            }
        }
    }
    let drop: Vec<usize> = drop.into_iter().collect();
    let dropped = drop.iter().map(|&j| names[j].to_string()).collect::<Vec<_>>();
    if !dropped.is_empty() {
        info!("correlation filter dropped {dropped:?}");
    }
    Ok(CorrelationFilter {
        dataset: d.drop_features(&drop)?,
        dropped,
        zero_variance,
    })
}

/// Lower/upper probability bound used before the inverse normal CDF.
const QUANTILE_BOUND: f64 = 1e-7;

/// Monotone empirical-CDF map of one numerical feature onto standard-normal
/// deviates.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileMap {
    quantiles: Vec<f64>,
}

impl QuantileMap {
    pub fn fit(values: &[f64], n_quantiles: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("quantile fit on empty column".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let nq = n_quantiles.min(sorted.len()).max(1);
        let n = sorted.len();
        let mut quantiles: Vec<f64> = (0..nq)
            .map(|i| {
                let p = if nq == 1 { 0.0 } else { i as f64 / (nq - 1) as f64 };
                let pos = p * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                sorted[lo] + frac * (sorted[hi] - sorted[lo])
            })
            .collect();
        for i in 1..quantiles.len() {
            if quantiles[i] < quantiles[i - 1] {
                quantiles[i] = quantiles[i - 1];
            }
        }
        Ok(QuantileMap { quantiles })
    }

    pub fn from_quantiles(quantiles: Vec<f64>) -> Result<Self> {
        if quantiles.is_empty() || quantiles.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("quantile table must be non-empty and non-decreasing".into()));
        }
        Ok(QuantileMap { quantiles })
    }

    pub fn quantiles(&self) -> &[f64] {
        &self.quantiles
    }

    pub fn is_constant(&self) -> bool {
        self.quantiles.first() == self.quantiles.last()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.quantiles[0], *self.quantiles.last().unwrap())
    }

    /// Empirical CDF position in [0, 1]; ties resolve to the middle of the
    /// tied knot run.
    fn position(&self, x: f64) -> f64 {
        let q = &self.quantiles;
        let last = q.len() - 1;
        if last == 0 {
            return 0.5;
        }
        let lo = q.partition_point(|&v| v < x);
        let hi_excl = q.partition_point(|&v| v <= x);
        let pos = if lo < hi_excl {
            (lo + hi_excl - 1) as f64 / 2.0
        } else if lo == 0 {
            0.0
        } else if lo > last {
            last as f64
        } else {
            let (a, b) = (q[lo - 1], q[lo]);
            (lo - 1) as f64 + (x - a) / (b - a)
        };
        pos / last as f64
    }

    pub fn transform(&self, x: f64) -> f64 {
        if self.is_constant() {
            return 0.0;
        }
        let u = self.position(x).clamp(QUANTILE_BOUND, 1.0 - QUANTILE_BOUND);
        std_normal().inverse_cdf(u)
    }

    pub fn inverse(&self, z: f64) -> f64 {
        let q = &self.quantiles;
        let last = q.len() - 1;
        let u = std_normal().cdf(z);
        let edge = QUANTILE_BOUND * (1.0 + 1e-6);
        if u <= edge || last == 0 {
            return q[0];
        }
        if u >= 1.0 - edge {
            return q[last];
        }
        let pos = u * last as f64;
        let i = (pos.floor() as usize).min(last - 1);
        let frac = pos - i as f64;
        if frac == 0.0 || q[i] == q[i + 1] {
            return q[i];
        }
        q[i] + frac * (q[i + 1] - q[i])
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Fitted preprocessing state: quantile maps, frozen vocabularies, and the
/// list of features removed by correlation filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedPreprocessor {
    schema: FeatureSchema,
    maps: Vec<QuantileMap>,
    pub dropped: Vec<String>,
    pub n_quantiles: usize,
    pub constant: Vec<String>,
}

impl FittedPreprocessor {
    pub fn fit(d: &Dataset, n_quantiles: usize) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::Empty("cannot fit a preprocessor on an empty dataset".into()));
        }
        let nq = n_quantiles.min(d.len());
        let mut maps = Vec::new();
        let mut constant = Vec::new();
        for j in d.schema.numerical_indices() {
            let col: Vec<f64> = (0..d.len()).map(|r| d.rows.get(r, j)).collect();
            let m = QuantileMap::fit(&col, nq)?;
            if m.is_constant() {
                warn!("feature {:?} is constant; encoded as 0", d.schema.features()[j].name);
                constant.push(d.schema.features()[j].name.clone());
            }
            maps.push(m);
        }
        Ok(FittedPreprocessor {
            schema: d.schema.clone(),
            maps,
            dropped: Vec::new(),
            n_quantiles: nq,
            constant,
        })
    }

    pub fn with_dropped(mut self, dropped: Vec<String>) -> Self {
        self.dropped = dropped;
        self
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn maps(&self) -> &[QuantileMap] {
        &self.maps
    }

    pub fn layout(&self) -> EncodedLayout {
        self.schema.layout()
    }

    pub fn encoded_width(&self) -> usize {
        self.layout().width()
    }

    /// Encodes rows given in original units (schema column order).
    pub fn encode(&self, rows: &Mat) -> Result<Mat> {
        if rows.cols() != self.schema.len() {
            return Err(Error::shape("encode row width", self.schema.len(), rows.cols()));
        }
        let layout = self.layout();
        let mut out = Mat::zeros(rows.rows(), layout.width());
        for r in 0..rows.rows() {
            let src = rows.row(r);
            let dst = out.row_mut(r);
            let (mut ni, mut gi) = (0, 0);
            for (j, f) in self.schema.features().iter().enumerate() {
                match f.categories() {
                    None => {
                        dst[ni] = self.maps[ni].transform(src[j]);
                        ni += 1;
                    }
                    Some(c) => {
                        let v = src[j];
                        if v < 0.0 || v.fract() != 0.0 || v as usize >= c.len() {
                            return Err(Error::UnknownCategory {
                                feature: f.name.clone(),
                                value: format!("{v}"),
                            });
                        }
                        dst[layout.groups[gi].start + v as usize] = 1.0;
                        gi += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Encodes raw string cells, rejecting categories outside the frozen
    /// vocabulary.
    pub fn encode_strings(&self, rows: &[Vec<String>]) -> Result<Mat> {
        self.encode(&self.parse_strings(rows)?)
    }

    /// Parses raw string cells into original units (category indices for
    /// categorical features).
    pub fn parse_strings(&self, rows: &[Vec<String>]) -> Result<Mat> {
        let mut parsed = Mat::zeros(rows.len(), self.schema.len());
        for (r, cells) in rows.iter().enumerate() {
            if cells.len() != self.schema.len() {
                return Err(Error::shape(format!("row {r}"), self.schema.len(), cells.len()));
            }
            for (j, (f, cell)) in self.schema.features().iter().zip(cells).enumerate() {
                let v = match f.categories() {
                    None => cell
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("{:?}: {cell:?} is not a number", f.name)))?,
                    Some(c) => c.iter().position(|s| s == cell.trim()).ok_or_else(|| Error::UnknownCategory {
                        feature: f.name.clone(),
                        value: cell.clone(),
                    })? as f64,
                };
                parsed.set(r, j, v);
            }
        }
        Ok(parsed)
    }

    /// Maps encoded rows back to original units: inverse quantile map for the
    /// numerical block, argmax per one-hot group.
    pub fn decode(&self, encoded: &Mat) -> Result<Mat> {
        let layout = self.layout();
        if encoded.cols() != layout.width() {
            return Err(Error::shape("decode encoded width", layout.width(), encoded.cols()));
        }
        let mut out = Mat::zeros(encoded.rows(), self.schema.len());
        for r in 0..encoded.rows() {
            let src = encoded.row(r);
            let dst = out.row_mut(r);
            let (mut ni, mut gi) = (0, 0);
            for (j, f) in self.schema.features().iter().enumerate() {
                if f.is_categorical() {
                    let g = layout.groups[gi];
                    dst[j] = argmax(&src[g.range()]) as f64;
                    gi += 1;
                } else {
                    dst[j] = self.maps[ni].inverse(src[ni]);
                    ni += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("preprocessor");
        c.set_meta("schema_hash", self.schema.hash());
        c.set_meta("schema", serde_json::to_string(&self.schema).expect("schema serializes"));
        c.set_meta("dropped", serde_json::to_string(&self.dropped).expect("names serialize"));
        c.set_meta("constant", serde_json::to_string(&self.constant).expect("names serialize"));
        c.set_meta("n_quantiles", self.n_quantiles);
        for (i, m) in self.maps.iter().enumerate() {
            c.push(format!("quantiles.{i}"), DType::F64, vec![m.quantiles.len()], m.quantiles.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(c.require_meta("schema")?)?;
        let schema = FeatureSchema::new(schema.features)?;
        let dropped = serde_json::from_str(c.require_meta("dropped")?)?;
        let constant = serde_json::from_str(c.meta("constant").unwrap_or("[]"))?;
        let n_quantiles = c
            .require_meta("n_quantiles")?
            .parse()
            .map_err(|_| Error::Config("bad n_quantiles".into()))?;
        let maps = (0..schema.numerical_indices().len())
            .map(|i| QuantileMap::from_quantiles(c.tensor(&format!("quantiles.{i}"))?.data.clone()))
            .collect::<Result<_>>()?;
        Ok(FittedPreprocessor {
            schema,
            maps,
            dropped,
            n_quantiles,
            constant,
        })
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub train_index: Vec<usize>,
    pub test_index: Vec<usize>,
    /// Attack rows drawn from the test split, in draw order.
    pub pool: Dataset,
    /// Positions of the pool rows within `test`.
    pub pool_index: Vec<usize>,
}

/// Label-stratified train/test split followed by a seeded attack pool drawn
/// without replacement from the test attacks.
pub fn split_and_pool(d: &Dataset, test_fraction: f64, pool_size: usize, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let (train_index, test_index) = stratified_split(d, test_fraction, seed);
    let train = d.subset(&train_index);
    let test = d.subset(&test_index);
    let pool_index = draw_pool(&test, pool_size, seed)?;
    let pool = test.subset(&pool_index);
    Ok(Splits {
        train,
        test,
        train_index,
        test_index,
        pool,
        pool_index,
    })
}

pub fn stratified_split(d: &Dataset, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [0u8, 1] {
        let mut idx = d.indices_with_label(label);
        idx.shuffle(&mut rng_from(seed, &[0x5_1717, label as u64]));
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Draws `pool_size` attack rows of `test` without replacement.
pub fn draw_pool(test: &Dataset, pool_size: usize, seed: u64) -> Result<Vec<usize>> {
    let mut attacks = test.indices_with_label(1);
    if attacks.len() < pool_size {
        return Err(Error::InsufficientAttacks {
            requested: pool_size,
            available: attacks.len(),
        });
    }
    attacks.shuffle(&mut rng_from(seed, &[0x9001]));
    attacks.truncate(pool_size);
    Ok(attacks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use std::io::Write as _;

    fn toy_config() -> SchemaConfig {
        SchemaConfig {
            label_column: "label".into(),
            positive_label: "1".into(),
            attack_tag_column: None,
            features: vec![
                FeatureConfig {
                    name: "x".into(),
                    kind: "numerical".into(),
                    categories: None,
                },
                FeatureConfig {
                    name: "proto".into(),
                    kind: "categorical".into(),
                    categories: None,
                },
            ],
        }
    }

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_toy_csv() {
        let f = write_tmp("x,proto,label\n1.5,tcp,0\n2.0,udp,1\n-3,tcp,1\n");
        let (d, rep) = load_csv(&[f.path()], &toy_config()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.rows.cols(), 2);
        assert_eq!(d.labels, vec![0, 1, 1]);
        assert_eq!(d.schema.features()[1].categories().unwrap(), &["tcp", "udp"]);
        assert_eq!(rep.rows_dropped, 0);
    }

    #[test]
    fn malformed_numeric_cell_is_dropped_and_reported() {
        let f = write_tmp("x,proto,label\n1.5,tcp,0\nabc,udp,1\n-3,tcp,1\n");
        let (d, rep) = load_csv(&[f.path()], &toy_config()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(rep.rows_dropped, 1);
        assert_eq!(rep.drop_reasons.len(), 1);
    }

    #[test]
    fn load_errors() {
        let f = write_tmp("x,label\n1,0\n");
        assert!(matches!(load_csv(&[f.path()], &toy_config()), Err(Error::MissingColumn(c)) if c == "proto"));
        let f = write_tmp("x,proto,label\n");
        assert!(matches!(load_csv(&[f.path()], &toy_config()), Err(Error::Empty(_))));
        let f = write_tmp("x,proto,label\n1,tcp,0\n1,udp,2\n1,tcp,1\n");
        assert!(matches!(load_csv(&[f.path()], &toy_config()), Err(Error::NonBinaryLabel(_))));
    }

    #[test]
    fn multiple_files_concatenate_in_config_order() {
        let a = write_tmp("x,proto,label\n1,tcp,0\n");
        let b = write_tmp("label,proto,x\n1,udp,2\n");
        let (d, _) = load_csv(&[a.path(), b.path()], &toy_config()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.rows.row(1), &[2.0, 1.0]);
        assert_eq!(d.labels, vec![0, 1]);
    }

    fn numeric_dataset(cols: Vec<Vec<f64>>) -> Dataset {
        let n = cols[0].len();
        let schema = FeatureSchema::new((0..cols.len()).map(|j| Feature::numerical(format!("f{j}"))).collect()).unwrap();
        let mut rows = Mat::zeros(n, cols.len());
        for (j, c) in cols.iter().enumerate() {
            for (r, &v) in c.iter().enumerate() {
                rows.set(r, j, v);
            }
        }
        Dataset::new(schema, rows, vec![0; n], None).unwrap()
    }

    #[test]
    fn exact_multiple_is_dropped() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        let out = correlation_filter(&numeric_dataset(vec![a, b]), 0.95).unwrap();
        assert_eq!(out.dropped, vec!["f1"]);
        assert_eq!(out.dataset.schema.len(), 1);
    }

    #[test]
    fn independent_features_are_kept() {
        let mut rng = rng_from(4, &[]);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..500).map(|_| rng.random::<f64>()).collect()).collect();
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(pearson(&cols[a], &cols[b]).unwrap().abs() < 0.95);
            }
        }
        let out = correlation_filter(&numeric_dataset(cols), 0.95).unwrap();
        assert!(out.dropped.is_empty());
    }

    #[test]
    fn identical_triplet_keeps_first() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let out = correlation_filter(&numeric_dataset(vec![a.clone(), a.clone(), a]), 0.95).unwrap();
        assert_eq!(out.dropped, vec!["f1", "f2"]);
    }

    #[test]
    fn zero_variance_feature_is_kept_and_flagged() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let out = correlation_filter(&numeric_dataset(vec![a, vec![3.0; 20]]), 0.95).unwrap();
        assert!(out.dropped.is_empty());
        assert_eq!(out.zero_variance, vec!["f1"]);
    }

    #[test]
    fn correlation_filter_needs_two_numericals() {
        let d = numeric_dataset(vec![vec![1.0, 2.0]]);
        assert!(correlation_filter(&d, 0.95).is_err());
    }

    #[test]
    fn uniform_samples_map_to_standard_normal() {
        let mut rng = rng_from(9, &[]);
        let vals: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let d = numeric_dataset(vec![vals]);
        let pp = FittedPreprocessor::fit(&d, 1000).unwrap();
        let enc = pp.encode(&d.rows).unwrap();
        let z = enc.as_slice();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn median_maps_to_zero() {
        let vals: Vec<f64> = (0..101).map(|i| (i as f64).powi(2)).collect();
        let d = numeric_dataset(vec![vals]);
        let pp = FittedPreprocessor::fit(&d, 1000).unwrap();
        assert!(pp.maps()[0].transform(2500.0).abs() < 1e-9);
    }

    #[test]
    fn constant_feature_encodes_to_zero() {
        let d = numeric_dataset(vec![vec![4.0; 30]]);
        let pp = FittedPreprocessor::fit(&d, 1000).unwrap();
        assert_eq!(pp.constant, vec!["f0"]);
        assert!(pp.encode(&d.rows).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(pp.decode(&Mat::row_vector(&[1.3])).unwrap().as_slice(), &[4.0]);
    }

    fn mixed_dataset() -> Dataset {
        let schema = FeatureSchema::new(vec![
            Feature::numerical("a"),
            Feature::categorical("c", ["x", "y", "z"]),
            Feature::numerical("b"),
        ])
        .unwrap();
        let mut rng = rng_from(2, &[]);
        let n = 300;
        let mut rows = Mat::zeros(n, 3);
        for r in 0..n {
            rows.set(r, 0, (rng.random::<f64>() * 1000.0).floor());
            rows.set(r, 1, rng.random_range(0..3) as f64);
            rows.set(r, 2, if r % 3 == 0 { 0.0 } else { rng.random::<f64>() * 1e6 });
        }
        Dataset::new(schema, rows, vec![0; n], None).unwrap()
    }

    #[test]
    fn decode_inverts_encode_on_training_rows() {
        let d = mixed_dataset();
        let pp = FittedPreprocessor::fit(&d, 1000).unwrap();
        let enc = pp.encode(&d.rows).unwrap();
        assert_eq!(enc.cols(), 2 + 3);
        let dec = pp.decode(&enc).unwrap();
        for r in 0..d.len() {
            for j in 0..3 {
                let (a, b) = (d.rows.get(r, j), dec.get(r, j));
                if j == 1 {
                    assert_eq!(a, b);
                } else {
                    assert!((a - b).abs() <= 1e-3 * a.abs().max(1e-12), "row {r} col {j}: {a} vs {b}");
                }
            }
            let g = &enc.row(r)[2..5];
            assert_eq!(g.iter().sum::<f64>(), 1.0);
            assert_eq!(g.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn out_of_range_decodes_to_endpoints() {
        let d = mixed_dataset();
        let pp = FittedPreprocessor::fit(&d, 1000).unwrap();
        let (lo, hi) = pp.maps()[0].range();
        let dec = pp.decode(&Mat::row_vector(&[-40.0, 40.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(dec.get(0, 0), lo);
        assert_eq!(dec.get(0, 2), pp.maps()[1].range().1);
        assert!(hi > lo);
    }

    #[test]
    fn unseen_category_is_an_error() {
        let d = mixed_dataset();
        let pp = FittedPreprocessor::fit(&d, 1000).unwrap();
        let err = pp
            .encode_strings(&[vec!["1".into(), "w".into(), "2".into()]])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownCategory { ref feature, ref value } if feature == "c" && value == "w"));
        assert!(pp.decode(&Mat::zeros(1, 4)).is_err());
    }

    #[test]
    fn preprocessor_round_trips_through_container() {
        let d = mixed_dataset();
        let pp = FittedPreprocessor::fit(&d, 100).unwrap().with_dropped(vec!["gone".into()]);
        let c = Container::from_bytes(&pp.to_container().to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(FittedPreprocessor::from_container(&c).unwrap(), pp);
    }

    #[test]
    fn pool_is_deterministic_and_attack_only() {
        let n = 400;
        let schema = FeatureSchema::new(vec![Feature::numerical("a"), Feature::numerical("b")]).unwrap();
        let rows = Mat::from_vec(n, 2, (0..2 * n).map(|i| i as f64).collect()).unwrap();
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        let d = Dataset::new(schema, rows, labels, None).unwrap();
        let a = split_and_pool(&d, 0.2, 30, 5).unwrap();
        let b = split_and_pool(&d, 0.2, 30, 5).unwrap();
        assert_eq!(a.pool_index, b.pool_index);
        assert_eq!(a.pool.len(), 30);
        assert!(a.pool.labels.iter().all(|&l| l == 1));
        assert_eq!(a.test.len(), 80);
        assert_eq!(a.test.indices_with_label(1).len(), 40);
        assert!(matches!(
            split_and_pool(&d, 0.2, 41, 5),
            Err(Error::InsufficientAttacks { requested: 41, available: 40 })
        ));
    }

    #[test]
    fn schema_validation() {
        assert!(FeatureSchema::new(vec![Feature::numerical("a"), Feature::numerical("a")]).is_err());
        assert!(FeatureSchema::new(vec![Feature::categorical("c", ["only"])]).is_err());
    }
}
