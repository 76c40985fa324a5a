use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::WachterConfig;
use crate::classifier::{blackbox_train_config, BLACKBOX_HIDDEN};
use crate::diffusion::{DenoiserConfig, GuidanceConfig};
use crate::distillation::DistillConfig;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_LOF_K, DEFAULT_SPARSITY_TOL};
use crate::rules::DEFAULT_PURITY;
use crate::synthetic::BlobConfig;
use crate::train::TrainConfig;
use crate::vcnet::VcnetConfig;

/// Environment variable that overrides the output directory.
pub const OUTPUT_ENV: &str = "TABCF_OUTPUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tabdiff,
    TabdiffDistilled,
    Vcnet,
    Wachter,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Tabdiff, Method::TabdiffDistilled, Method::Vcnet, Method::Wachter];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tabdiff => "tabdiff",
            Method::TabdiffDistilled => "tabdiff-distilled",
            Method::Vcnet => "vcnet",
            Method::Wachter => "wachter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}; expected one of tabdiff, tabdiff-distilled, vcnet, wachter")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// CSV inputs, relative to the config file.
    pub paths: Vec<PathBuf>,
    /// Schema TOML for CSV inputs, relative to the config file.
    pub schema: Option<PathBuf>,
    pub synthetic: BlobConfig,
    /// Seed of the synthetic generator; the dataset is shared by all runs.
    pub synthetic_seed: u64,
    pub test_fraction: f64,
    pub n_quantiles: usize,
    /// Drop the later feature of numerical pairs with |r| above this.
    pub correlation_threshold: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            paths: Vec::new(),
            schema: None,
            synthetic: BlobConfig::default(),
            synthetic_seed: 0,
            test_fraction: 0.2,
            n_quantiles: 1000,
            correlation_threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: BLACKBOX_HIDDEN.to_vec(),
            train: blackbox_train_config(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub lof_k: usize,
    pub sparsity_tol: f64,
    /// Benign training rows kept as the LOF reference set.
    pub lof_reference_max: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            lof_k: DEFAULT_LOF_K,
            sparsity_tol: DEFAULT_SPARSITY_TOL,
            lof_reference_max: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesConfig {
    pub attack_tag: Option<String>,
    /// Generator used for the held-out attack; the distilled sampler is not
    /// supported here.
    pub method: Method,
    pub purity: f64,
    pub strict_leaf: bool,
    pub accuracy_floor: f64,
    pub contrast: bool,
}

impl Default for RulesConfig {
    fn default() -> Self {
        RulesConfig {
            attack_tag: None,
            method: Method::Tabdiff,
            purity: DEFAULT_PURITY,
            strict_leaf: false,
            accuracy_floor: 0.5,
            contrast: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    pub pool_sizes: Vec<usize>,
    pub max_pool_size: usize,
    /// Class counterfactuals should reach; 0 is benign.
    pub target: u8,
    pub methods: Vec<Method>,
    /// Explain queries on the rayon pool.
    pub parallel: bool,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub diffusion: DenoiserConfig,
    pub guidance: GuidanceConfig,
    /// Noise-aware classifier that steers sampling.
    pub guide_classifier: ClassifierConfig,
    pub distillation: DistillConfig,
    pub vcnet: VcnetConfig,
    pub wachter: WachterConfig,
    pub metrics: MetricsConfig,
    pub rules: RulesConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output: PathBuf::from("runs/default"),
            seeds: vec![0],
            pool_sizes: vec![1000],
            max_pool_size: 4000,
            target: 0,
            methods: Method::ALL.to_vec(),
            parallel: true,
            data: DataConfig::default(),
            classifier: ClassifierConfig::default(),
            diffusion: DenoiserConfig::default(),
            guidance: GuidanceConfig::default(),
            guide_classifier: ClassifierConfig {
                hidden: BLACKBOX_HIDDEN.to_vec(),
                train: TrainConfig {
                    epochs: 100,
                    batch_size: 256,
                    lr: 1e-3,
                },
            },
            distillation: DistillConfig::default(),
            vcnet: VcnetConfig::default(),
            wachter: WachterConfig::default(),
            metrics: MetricsConfig::default(),
            rules: RulesConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML and resolves relative data paths against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        cfg.data.paths = cfg.data.paths.iter().map(resolve).collect();
        cfg.data.schema = cfg.data.schema.as_ref().map(resolve);
        if let Ok(out) = std::env::var(OUTPUT_ENV) {
            cfg.output = PathBuf::from(out);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.pool_sizes.is_empty() || self.pool_sizes.contains(&0) {
            return bad("pool sizes must be positive".into());
        }
        if let Some(&p) = self.pool_sizes.iter().find(|&&p| p > self.max_pool_size) {
            return bad(format!("pool size {p} exceeds max_pool_size {}", self.max_pool_size));
        }
        if self.target > 1 {
            return bad(format!("target {} is not a class", self.target));
        }
        if self.data.kind == DataKind::Csv {
            if self.data.paths.is_empty() {
                return bad("csv data needs at least one path".into());
            }
            if self.data.schema.is_none() {
                return bad("csv data needs a schema file".into());
            }
        }
        self.guidance.validate(self.diffusion.steps)?;
        self.distillation.plan(self.diffusion.steps)?;
        self.wachter.validate()?;
        Ok(())
    }

    /// Checks that referenced input files exist.
    pub fn check_paths(&self) -> Result<()> {
        for p in self.data.paths.iter().chain(&self.data.schema) {
            if !p.exists() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn largest_pool(&self) -> usize {
        self.pool_sizes.iter().copied().max().unwrap_or(0)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![1];
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.pool_sizes = vec![5000];
        assert!(c.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("dice".parse::<Method>().is_err());
    }

    #[test]
    fn parses_partial_toml() {
        let c = ExperimentConfig::from_toml("seeds = [1, 2]\n[diffusion]\nsteps = 100\n", Path::new(".")).unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.diffusion.steps, 100);
        assert_eq!(c.guidance.k, 10);
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
        let syn = ExperimentConfig::from_file(&dir.join("synthetic.toml")).unwrap();
        assert_eq!(syn.rules.attack_tag.as_deref(), Some("stealth"));
        let unsw = ExperimentConfig::from_file(&dir.join("unsw.toml")).unwrap();
        assert_eq!(unsw.distillation.plan(unsw.diffusion.steps).unwrap().final_steps(), 250);
        let schema = crate::data::SchemaConfig::from_toml_file(&dir.join("unsw_schema.toml")).unwrap();
        assert_eq!(schema.features.len(), 42);
    }
}
