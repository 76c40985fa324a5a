//! Config-driven, resumable experiment runs: every stage writes artifacts
//! under the output directory and records them in `manifest.json`.

mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{ClassifierConfig, DataConfig, DataKind, ExperimentConfig, Method, MetricsConfig, RulesConfig, OUTPUT_ENV};
pub use manifest::{RunManifest, StageEntry, MANIFEST_FILE};

use crate::baselines::wachter_cf;
use crate::classifier::{metrics_from_probs, train_blackbox, train_guidance, BlackBoxClassifier, ClassifierMetrics, GuidanceClassifier};
use crate::container::Container;
use crate::data::{correlation_filter, load_csv, split_and_pool, Dataset, FittedPreprocessor, SchemaConfig, Splits};
use crate::diffusion::{train_denoiser, GuidedExplainer, NoiseSchedule, Sampler, TabularDenoiser};
use crate::distillation::{convert_to_v, run_progressive_distillation, VDenoiser};
use crate::error::{Error, Result};
use crate::explain::{read_explanations, timing_path, write_explanations, CounterfactualBatch};
use crate::metrics::{aggregate, EvalContext, EvalReport, LofIndex, MethodRun, PoolSeries};
use crate::nn::Mat;
use crate::rng::{derive_seed, rng_from};
use crate::rules::{zero_day_workflow, ZeroDayConfig, ZeroDayStage};
use crate::synthetic::two_blobs;
use crate::vcnet::{train_vcnet, Vcnet};

const PREPROCESSOR: &str = "preprocessor.tcf";
const SPLIT: &str = "split.json";
const BLACKBOX: &str = "blackbox.tcf";
const BLACKBOX_METRICS: &str = "classifier_metrics.json";
const DENOISER: &str = "denoiser.tcf";
const GUIDANCE: &str = "guidance.tcf";
const VDENOISER: &str = "vdenoiser.tcf";
const VCNET: &str = "vcnet.tcf";
const VCNET_METRICS: &str = "vcnet_metrics.json";

// sub-seeds per stage so that stages never share a random stream
const SEED_BLACKBOX: u64 = 1;
const SEED_DENOISER: u64 = 2;
const SEED_GUIDANCE: u64 = 3;
const SEED_CONVERT: u64 = 4;
const SEED_DISTILL: u64 = 5;
const SEED_VCNET: u64 = 6;
const SEED_EXPLAIN: u64 = 7;
const SEED_LOF: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SplitRecord {
    train_index: Vec<usize>,
    test_index: Vec<usize>,
    pool_index: Vec<usize>,
    dropped: Vec<String>,
}

/// Data of one seeded run after preprocessing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub splits: Splits,
    pub preprocessor: FittedPreprocessor,
}

impl Prepared {
    /// The first `n` pool rows.
    pub fn pool(&self, n: usize) -> Result<Mat> {
        if n > self.splits.pool.len() {
            return Err(Error::InsufficientAttacks {
                requested: n,
                available: self.splits.pool.len(),
            });
        }
        Ok(self.splits.pool.rows.select_rows(&(0..n).collect::<Vec<_>>()))
    }
}

/// Everything the counterfactual generators read, loaded from artifacts.
pub struct Models {
    pub blackbox: BlackBoxClassifier,
    pub denoiser: Option<TabularDenoiser>,
    pub guidance: Option<GuidanceClassifier>,
    pub distilled: Option<VDenoiser>,
    pub vcnet: Option<Vcnet>,
}

fn drop_named(d: &Dataset, names: &[String]) -> Result<Dataset> {
    if names.is_empty() {
        return Ok(d.clone());
    }
    let idx = names
        .iter()
        .map(|n| d.schema.index_of(n).ok_or_else(|| Error::MissingColumn(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    d.drop_features(&idx)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn map_queries<F>(queries: &Mat, parallel: bool, f: F) -> Result<Vec<CounterfactualBatch>>
where
    F: Fn(usize, &[f64]) -> Result<CounterfactualBatch> + Sync,
{
    if parallel {
        (0..queries.rows()).into_par_iter().map(|q| f(q, queries.row(q))).collect()
    } else {
        (0..queries.rows()).map(|q| f(q, queries.row(q))).collect()
    }
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    root: PathBuf,
    manifest: RunManifest,
    force: bool,
}

impl Pipeline {
    /// Opens (or starts) the run in the config's output directory.
    pub fn open(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.output.clone();
        std::fs::create_dir_all(&root)?;
        let manifest = RunManifest::open(&root, &cfg.hash(), force)?;
        manifest.save(&root)?;
        Ok(Pipeline {
            cfg,
            root,
            manifest,
            force,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn seed_dir(seed: u64) -> PathBuf {
        PathBuf::from(format!("seed-{seed}"))
    }

    /// Path of the explanation CSV for one method, seed and pool size.
    pub fn explanation_path(&self, seed: u64, method: Method, pool_size: usize) -> PathBuf {
        self.root
            .join(Self::seed_dir(seed))
            .join("explain")
            .join(format!("{method}-{pool_size}.csv"))
    }

    fn stage<F>(&mut self, key: &str, f: F) -> Result<bool>
    where
        F: FnOnce(&Self) -> Result<Vec<PathBuf>>,
    {
        if !self.force && self.manifest.is_complete(&self.root, key) {
            info!("{key}: up to date, skipped");
            return Ok(false);
        }
        info!("{key}: running");
        let start = Instant::now();
        let artifacts = f(self)?;
        let rel = artifacts
            .into_iter()
            .map(|p| p.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or(p))
            .collect();
        self.manifest.record(key, rel, start.elapsed().as_secs_f64());
        self.manifest.save(&self.root)?;
        Ok(true)
    }

    fn require(&self, key: &str) -> Result<()> {
        self.manifest.require(&self.root, key).map(|_| ())
    }

    fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.cfg.data;
        match d.kind {
            DataKind::Synthetic => two_blobs(&d.synthetic, d.synthetic_seed),
            DataKind::Csv => {
                self.cfg.check_paths()?;
                let schema = SchemaConfig::from_toml_file(d.schema.as_ref().expect("validated"))?;
                let paths: Vec<&Path> = d.paths.iter().map(PathBuf::as_path).collect();
                let (data, report) = load_csv(&paths, &schema)?;
                info!("loaded {} rows ({} dropped)", report.rows_kept, report.rows_dropped);
                Ok(data)
            }
        }
    }

    /// Splits the data, draws the largest attack pool, filters correlated
    /// features on the training split and fits the preprocessor.
    pub fn preprocess(&mut self, seed: u64) -> Result<bool> {
        let key = format!("seed-{seed}/preprocess");
        self.stage(&key, |p| {
            let dir = p.root.join(Self::seed_dir(seed));
            std::fs::create_dir_all(&dir)?;
            let raw = p.load_dataset()?;
            let sp = split_and_pool(&raw, p.cfg.data.test_fraction, p.cfg.largest_pool(), seed)?;
            let dropped = match p.cfg.data.correlation_threshold {
                Some(t) => correlation_filter(&sp.train, t)?.dropped,
                None => Vec::new(),
            };
            let train = drop_named(&sp.train, &dropped)?;
            let pp = FittedPreprocessor::fit(&train, p.cfg.data.n_quantiles)?.with_dropped(dropped.clone());
            pp.to_container().write(&dir.join(PREPROCESSOR))?;
            write_json(
                &dir.join(SPLIT),
                &SplitRecord {
                    train_index: sp.train_index,
                    test_index: sp.test_index,
                    pool_index: sp.pool_index,
                    dropped,
                },
            )?;
            Ok(vec![dir.join(PREPROCESSOR), dir.join(SPLIT)])
        })
    }

    pub fn prepared(&self, seed: u64) -> Result<Prepared> {
        self.require(&format!("seed-{seed}/preprocess"))?;
        let dir = self.root.join(Self::seed_dir(seed));
        let split: SplitRecord = read_json(&dir.join(SPLIT))?;
        let full = drop_named(&self.load_dataset()?, &split.dropped)?;
        let train = full.subset(&split.train_index);
        let test = full.subset(&split.test_index);
        let pool = test.subset(&split.pool_index);
        let preprocessor = FittedPreprocessor::from_container(&Container::read(&dir.join(PREPROCESSOR))?)?;
        Ok(Prepared {
            splits: Splits {
                train,
                test,
                train_index: split.train_index,
                test_index: split.test_index,
                pool,
                pool_index: split.pool_index,
            },
            preprocessor,
        })
    }

    pub fn train_classifier(&mut self, seed: u64) -> Result<bool> {
        let key = format!("seed-{seed}/train-classifier");
        self.stage(&key, |p| {
            let prep = p.prepared(seed)?;
            let pp = &prep.preprocessor;
            let train = &prep.splits.train;
            let c = &p.cfg.classifier;
            let bb = train_blackbox(
                &pp.encode(&train.rows)?,
                &train.labels,
                &c.hidden,
                &c.train,
                &train.schema.hash(),
                derive_seed(seed, &[SEED_BLACKBOX]),
            )?
            .quantized();
            let metrics = bb.evaluate(&pp.encode(&prep.splits.test.rows)?, &prep.splits.test.labels)?;
            info!("black box accuracy {:.4}, F1 {:.4}", metrics.accuracy, metrics.f1);
            let dir = p.root.join(Self::seed_dir(seed));
            bb.to_container().write(&dir.join(BLACKBOX))?;
            write_json(&dir.join(BLACKBOX_METRICS), &metrics)?;
            bb.curve.write_csv(&dir.join("blackbox_curve.csv"))?;
            Ok(vec![dir.join(BLACKBOX), dir.join(BLACKBOX_METRICS)])
        })
    }

    pub fn train_diffusion(&mut self, seed: u64) -> Result<bool> {
        let key = format!("seed-{seed}/train-diffusion");
        self.stage(&key, |p| {
            let prep = p.prepared(seed)?;
            let pp = &prep.preprocessor;
            let train = &prep.splits.train;
            let x = pp.encode(&train.rows)?;
            let layout = pp.layout();
            let schedule = NoiseSchedule::linear_scaled(p.cfg.diffusion.steps)?;
            let den = train_denoiser(&x, &layout, schedule.clone(), &p.cfg.diffusion, derive_seed(seed, &[SEED_DENOISER]))?.quantized();
            let g = &p.cfg.guide_classifier;
            let guide = train_guidance(&x, &train.labels, &layout, &schedule, &g.hidden, &g.train, derive_seed(seed, &[SEED_GUIDANCE]))?
                .quantized();
            let dir = p.root.join(Self::seed_dir(seed));
            let hash = train.schema.hash();
            den.to_container(&hash).write(&dir.join(DENOISER))?;
            guide.to_container(&hash).write(&dir.join(GUIDANCE))?;
            den.curve.write_csv(&dir.join("denoiser_curve.csv"))?;
            guide.curve.write_csv(&dir.join("guidance_curve.csv"))?;
            Ok(vec![dir.join(DENOISER), dir.join(GUIDANCE)])
        })
    }

    /// Converts the ε-denoiser to v-prediction and runs the distillation plan.
    pub fn distill(&mut self, seed: u64) -> Result<bool> {
        let key = format!("seed-{seed}/distill");
        self.require(&format!("seed-{seed}/train-diffusion"))?;
        self.stage(&key, |p| {
            let prep = p.prepared(seed)?;
            let dir = p.root.join(Self::seed_dir(seed));
            let den = TabularDenoiser::from_container(&Container::read(&dir.join(DENOISER))?, &dir.join(DENOISER))?;
            let x = prep.preprocessor.encode(&prep.splits.train.rows)?;
            let dc = &p.cfg.distillation;
            let v = convert_to_v(&den, &x, dc.convert_epochs, dc.batch_size, dc.lr, derive_seed(seed, &[SEED_CONVERT]))?;
            let plan = dc.plan(den.schedule.steps())?;
            let student = run_progressive_distillation(&v, &plan, &x, dc.batch_size, dc.lr, derive_seed(seed, &[SEED_DISTILL]))?.quantized();
            student.to_container(&prep.splits.train.schema.hash()).write(&dir.join(VDENOISER))?;
            student.curve.write_csv(&dir.join("distill_curve.csv"))?;
            Ok(vec![dir.join(VDENOISER)])
        })
    }

    pub fn train_vcnet(&mut self, seed: u64) -> Result<bool> {
        let key = format!("seed-{seed}/train-vcnet");
        self.stage(&key, |p| {
            let prep = p.prepared(seed)?;
            let pp = &prep.preprocessor;
            let train = &prep.splits.train;
            let model = train_vcnet(&pp.encode(&train.rows)?, &train.labels, &pp.layout(), &p.cfg.vcnet, derive_seed(seed, &[SEED_VCNET]))?.quantized();
            let test = &prep.splits.test;
            let metrics = metrics_from_probs(&model.predict_proba(&pp.encode(&test.rows)?)?, &test.labels)?;
            let dir = p.root.join(Self::seed_dir(seed));
            model.to_container(&train.schema.hash()).write(&dir.join(VCNET))?;
            write_json(&dir.join(VCNET_METRICS), &metrics)?;
            model.curve.write_csv(&dir.join("vcnet_curve.csv"))?;
            Ok(vec![dir.join(VCNET), dir.join(VCNET_METRICS)])
        })
    }

    /// Loads the black box plus whatever `method` needs.
    pub fn models(&self, seed: u64, method: Method) -> Result<Models> {
        let dir = self.root.join(Self::seed_dir(seed));
        let load = |stage: &str, file: &str| -> Result<(Container, PathBuf)> {
            self.require(&format!("seed-{seed}/{stage}"))?;
            let path = dir.join(file);
            Ok((Container::read(&path)?, path))
        };
        let (c, path) = load("train-classifier", BLACKBOX)?;
        let mut models = Models {
            blackbox: BlackBoxClassifier::from_container(&c, &path)?,
            denoiser: None,
            guidance: None,
            distilled: None,
            vcnet: None,
        };
        if matches!(method, Method::Tabdiff | Method::TabdiffDistilled) {
            let (c, path) = load("train-diffusion", GUIDANCE)?;
            models.guidance = Some(GuidanceClassifier::from_container(&c, &path)?);
        }
        match method {
            Method::Tabdiff => {
                let (c, path) = load("train-diffusion", DENOISER)?;
                models.denoiser = Some(TabularDenoiser::from_container(&c, &path)?);
            }
            Method::TabdiffDistilled => {
                let (c, path) = load("distill", VDENOISER)?;
                models.distilled = Some(VDenoiser::from_container(&c, &path)?);
            }
            Method::Vcnet => {
                let (c, path) = load("train-vcnet", VCNET)?;
                models.vcnet = Some(Vcnet::from_container(&c, &path)?);
            }
            Method::Wachter => {}
        }
        Ok(models)
    }

    /// Counterfactuals for `queries` (original units) with a loaded method.
    pub fn generate(&self, models: &Models, pp: &FittedPreprocessor, method: Method, queries: &Mat, seed: u64) -> Result<Vec<CounterfactualBatch>> {
        let cfg = &self.cfg;
        let target = cfg.target;
        let guided = |sampler: &dyn Sampler| {
            let ex = GuidedExplainer {
                sampler,
                guide: models.guidance.as_ref().expect("loaded with the sampler"),
                preprocessor: pp,
                blackbox: &models.blackbox,
                cfg: cfg.guidance.clone(),
            };
            ex.explain_pool(queries, target, seed, cfg.parallel)
        };
        match method {
            Method::Tabdiff => guided(models.denoiser.as_ref().expect("loaded")),
            Method::TabdiffDistilled => guided(models.distilled.as_ref().expect("loaded")),
            Method::Vcnet => {
                let v = models.vcnet.as_ref().expect("loaded");
                map_queries(queries, cfg.parallel, |q, row| v.generate_cf(pp, &models.blackbox, q, row, target, seed))
            }
            Method::Wachter => map_queries(queries, cfg.parallel, |q, row| wachter_cf(&models.blackbox, pp, q, row, target, &cfg.wachter)),
        }
    }

    /// Explains the first `pool_size` pool rows and writes the CSV plus its
    /// timing sidecar.
    pub fn explain(&mut self, seed: u64, method: Method, pool_size: usize) -> Result<bool> {
        let key = format!("seed-{seed}/explain/{method}-{pool_size}");
        self.stage(&key, |p| {
            let prep = p.prepared(seed)?;
            let models = p.models(seed, method)?;
            let queries = prep.pool(pool_size)?;
            let batches = p.generate(&models, &prep.preprocessor, method, &queries, derive_seed(seed, &[SEED_EXPLAIN]))?;
            let path = p.explanation_path(seed, method, pool_size);
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            write_explanations(&path, prep.preprocessor.schema(), &batches)?;
            let valid = batches.iter().filter(|b| b.valid_count() > 0).count();
            info!("{method}: {valid}/{} queries with a valid counterfactual", batches.len());
            Ok(vec![timing_path(&path), path])
        })
    }

    fn lof_index(&self, seed: u64, prep: &Prepared) -> Result<LofIndex> {
        let train = &prep.splits.train;
        let mut benign = train.indices_with_label(0);
        let cap = self.cfg.metrics.lof_reference_max;
        if benign.len() > cap {
            benign.shuffle(&mut rng_from(seed, &[SEED_LOF]));
            benign.truncate(cap);
            benign.sort_unstable();
        }
        LofIndex::new(prep.preprocessor.encode(&train.rows.select_rows(&benign))?, self.cfg.metrics.lof_k)
    }

    /// Scores every configured method, seed and pool size found on disk.
    pub fn evaluate(&mut self) -> Result<bool> {
        self.stage("evaluate", |p| {
            let cfg = &p.cfg;
            let mut contexts = Vec::new();
            for &seed in &cfg.seeds {
                let prep = p.prepared(seed)?;
                let lof = p.lof_index(seed, &prep)?;
                let dir = p.root.join(Self::seed_dir(seed));
                let bb: Option<ClassifierMetrics> = read_json(&dir.join(BLACKBOX_METRICS)).ok();
                let vc: Option<ClassifierMetrics> = read_json(&dir.join(VCNET_METRICS)).ok();
                contexts.push((seed, prep, lof, bb, vc));
            }
            let out = p.root.join("report");
            std::fs::create_dir_all(&out)?;
            let mut series = PoolSeries::default();
            let mut artifacts = Vec::new();
            let mut found = 0;
            for &pool in &cfg.pool_sizes {
                let mut report = EvalReport {
                    pool_size: pool,
                    lof_k: cfg.metrics.lof_k,
                    ..Default::default()
                };
                for &method in &cfg.methods {
                    let mut runs = Vec::new();
                    for (seed, prep, lof, bb, vc) in &contexts {
                        let path = p.explanation_path(*seed, method, pool);
                        let records = if path.exists() {
                            found += 1;
                            let queries: BTreeMap<usize, Vec<f64>> =
                                (0..pool.min(prep.splits.pool.len())).map(|q| (q, prep.splits.pool.rows.row(q).to_vec())).collect();
                            let ctx = EvalContext {
                                preprocessor: &prep.preprocessor,
                                lof,
                                tol: cfg.metrics.sparsity_tol,
                            };
                            read_explanations(&path, &prep.preprocessor, &queries).and_then(|b| ctx.records(method.name(), *seed, &b))
                        } else {
                            Err(Error::MissingArtifact {
                                stage: format!("seed-{seed}/explain/{method}-{pool}"),
                                path,
                            })
                        };
                        let classifier = if method == Method::Vcnet { *vc } else { *bb };
                        runs.push(MethodRun {
                            seed: *seed,
                            records,
                            classifier,
                        });
                    }
                    let (row, records) = aggregate(method.name(), runs);
                    report.rows.push(row);
                    report.records.extend(records);
                }
                let csv = out.join(format!("eval-{pool}.csv"));
                let md = out.join(format!("eval-{pool}.md"));
                let raw = out.join(format!("records-{pool}.csv"));
                report.write_csv(&csv)?;
                report.write_records(&raw)?;
                std::fs::write(&md, report.to_markdown())?;
                artifacts.extend([csv, md, raw]);
                series.blocks.push(report);
            }
            if found == 0 {
                return Err(Error::MissingArtifact {
                    stage: "explain".into(),
                    path: p.root.clone(),
                });
            }
            let s = out.join("pool-series.csv");
            series.write_csv(&s)?;
            artifacts.push(s);
            Ok(artifacts)
        })
    }

    /// Zero-day rule mining for `tag` (config default when `None`).
    pub fn rules(&mut self, tag: Option<&str>, seed: u64) -> Result<bool> {
        let tag = match tag.map(str::to_string).or_else(|| self.cfg.rules.attack_tag.clone()) {
            Some(t) => t,
            None => return Err(Error::Config("no attack tag given for rule mining".into())),
        };
        let key = format!("rules/{tag}/seed-{seed}");
        self.stage(&key, |p| {
            let cfg = &p.cfg;
            let mut data = p.load_dataset()?;
            if let Some(t) = cfg.data.correlation_threshold {
                data = correlation_filter(&data, t)?.dataset;
            }
            let zc = ZeroDayConfig {
                test_fraction: cfg.data.test_fraction,
                n_quantiles: cfg.data.n_quantiles,
                hidden: cfg.classifier.hidden.clone(),
                train: cfg.classifier.train.clone(),
                accuracy_floor: cfg.rules.accuracy_floor,
                purity: cfg.rules.purity,
                strict_leaf: cfg.rules.strict_leaf,
                contrast: cfg.rules.contrast,
            };
            let outcome = zero_day_workflow(&data, &tag, &zc, seed, |stage| p.zero_day_generate(stage))?;
            let dir = p.root.join("rules").join(&tag).join(Self::seed_dir(seed));
            std::fs::create_dir_all(&dir)?;
            let (txt, json) = (dir.join("rules.txt"), dir.join("rules.json"));
            outcome.rules.write(&txt, &json)?;
            let mut artifacts = vec![txt, json];
            if let Some(c) = &outcome.contrast {
                let (t, j) = (dir.join("training-data-rules.txt"), dir.join("training-data-rules.json"));
                c.write(&t, &j)?;
                artifacts.extend([t, j]);
            }
            let summary = dir.join("zero_day.json");
            write_json(
                &summary,
                &serde_json::json!({
                    "attack_tag": tag,
                    "held_out_accuracy": outcome.held_out_accuracy,
                    "test_metrics": outcome.test_metrics,
                    "rules": outcome.rules.rules.len(),
                    "filter": outcome.rules.filter,
                    "training_data_filter": outcome.contrast.as_ref().and_then(|c| c.filter.clone()),
                    "tree_nodes": outcome.tree.nodes.len(),
                }),
            )?;
            artifacts.push(summary);
            Ok(artifacts)
        })
    }

    fn zero_day_generate(&self, stage: &ZeroDayStage) -> Result<Vec<CounterfactualBatch>> {
        let cfg = &self.cfg;
        let pp = stage.preprocessor;
        let x = pp.encode(&stage.train.rows)?;
        let layout = pp.layout();
        let labels = &stage.train.labels;
        let seed = stage.seed;
        let mut models = Models {
            blackbox: stage.blackbox.clone(),
            denoiser: None,
            guidance: None,
            distilled: None,
            vcnet: None,
        };
        match cfg.rules.method {
            Method::Tabdiff => {
                let schedule = NoiseSchedule::linear_scaled(cfg.diffusion.steps)?;
                models.denoiser = Some(train_denoiser(&x, &layout, schedule.clone(), &cfg.diffusion, derive_seed(seed, &[SEED_DENOISER]))?);
                let g = &cfg.guide_classifier;
                models.guidance = Some(train_guidance(&x, labels, &layout, &schedule, &g.hidden, &g.train, derive_seed(seed, &[SEED_GUIDANCE]))?);
            }
            Method::Vcnet => {
                models.vcnet = Some(train_vcnet(&x, labels, &layout, &cfg.vcnet, derive_seed(seed, &[SEED_VCNET]))?);
            }
            Method::Wachter => {}
            Method::TabdiffDistilled => {
                return Err(Error::Config("rule mining supports tabdiff, vcnet and wachter generators".into()));
            }
        }
        self.generate(&models, pp, cfg.rules.method, stage.queries, derive_seed(seed, &[SEED_EXPLAIN]))
    }

    /// Collects evaluation tables, rules and stage timings into one
    /// markdown file.
    pub fn report(&mut self) -> Result<bool> {
        self.stage("report", |p| {
            let out = p.root.join("report");
            std::fs::create_dir_all(&out)?;
            let mut s = String::from("# Experiment report\n\n");
            let _ = writeln!(s, "Config hash `{}`.\n", p.manifest.config_hash);
            for &pool in &p.cfg.pool_sizes {
                if let Ok(md) = std::fs::read_to_string(out.join(format!("eval-{pool}.md"))) {
                    let _ = writeln!(s, "## Pool of {pool}\n\n{md}");
                }
            }
            let rules_root = p.root.join("rules");
            for (key, entry) in &p.manifest.stages {
                let Some(rest) = key.strip_prefix("rules/") else { continue };
                let _ = writeln!(s, "## Rules {rest}\n");
                for a in &entry.artifacts {
                    let path = p.root.join(a);
                    if path.extension().is_some_and(|e| e == "txt") {
                        let label = path.file_stem().and_then(|f| f.to_str()).unwrap_or("rules");
                        let body = std::fs::read_to_string(&path).unwrap_or_default();
                        let _ = writeln!(s, "{label}:\n\n```\n{body}```\n");
                    }
                }
                let summary = rules_root.join(rest).join("zero_day.json");
                if let Ok(j) = std::fs::read_to_string(summary) {
                    let _ = writeln!(s, "```json\n{j}\n```\n");
                }
            }
            s.push_str("## Stage timings\n\n| Stage | seconds |\n|---|---|\n");
            for (key, entry) in &p.manifest.stages {
                let _ = writeln!(s, "| {key} | {:.1} |", entry.seconds);
            }
            let path = out.join("report.md");
            std::fs::write(&path, s)?;
            Ok(vec![path])
        })
    }

    /// Every stage for the selected seeds, methods and pool sizes, in order.
    pub fn run_all(&mut self, seeds: &[u64], methods: &[Method], pools: &[usize]) -> Result<()> {
        for &seed in seeds {
            self.preprocess(seed)?;
            self.train_classifier(seed)?;
            if methods.iter().any(|m| matches!(m, Method::Tabdiff | Method::TabdiffDistilled)) {
                self.train_diffusion(seed)?;
            }
            if methods.contains(&Method::TabdiffDistilled) {
                self.distill(seed)?;
            }
            if methods.contains(&Method::Vcnet) {
                self.train_vcnet(seed)?;
            }
            for &m in methods {
                for &pool in pools {
                    self.explain(seed, m, pool)?;
                }
            }
        }
        self.evaluate()?;
        if self.cfg.rules.attack_tag.is_some() {
            self.rules(None, seeds[0])?;
        }
        self.report()?;
        Ok(())
    }
}
