//! Run configuration file.
//!
//! ```toml
//! seed = 7
//! corpus = "corpus/manifest.toml"
//! out_dir = "out"
//! templates = ["yesno", "wh"]
//! overlap_threshold = 0.5
//! companion = "companion.jsonl"
//! images_root = "images"
//! bench_samples_per_relation = 3
//! n_per_subset = 5
//! n_positive = 15
//!
//! [gateway]
//! backend = "mock"
//! mock_script = "mock/dataset.jsonl"
//! cache_dir = "out/cache"
//!
//! [collect]
//! model_label = "my-model"
//! image_url_template = "file:///data/images/{image_id}.jpg"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::default_positive_count;
use crate::gateway::GatewayConfig;
use crate::prompt::TemplateKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

fn default_overlap() -> f64 {
    crate::annotation::DEFAULT_OVERLAP_THRESHOLD
}
fn default_templates() -> Vec<TemplateKind> {
    vec![TemplateKind::Yesno, TemplateKind::Wh]
}
fn default_samples() -> u32 {
    1
}
fn default_n_per_subset() -> usize {
    500
}
fn default_bench_name() -> String {
    "benchmark".into()
}
fn default_image_url() -> String {
    "{image_id}".into()
}
fn default_model_label() -> String {
    "model".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectSection {
    #[serde(default = "default_model_label")]
    pub model_label: String,
    #[serde(default = "default_image_url")]
    pub image_url_template: String,
    /// Endpoint of the model under evaluation; the generator gateway when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway: Option<GatewayConfig>,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self {
            model_label: default_model_label(),
            image_url_template: default_image_url(),
            gateway: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub gateway: GatewayConfig,
    #[serde(default = "default_templates")]
    pub templates: Vec<TemplateKind>,
    #[serde(default = "default_overlap")]
    pub overlap_threshold: f64,
    /// Directory of template TOML files replacing the built-in set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal_phrases: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub companion: Option<PathBuf>,
    /// Image files served during review; `images/` beside the corpus
    /// manifest when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images_root: Option<PathBuf>,
    #[serde(default = "default_samples")]
    pub bench_samples_per_relation: u32,
    #[serde(default = "default_n_per_subset")]
    pub n_per_subset: usize,
    /// Defaults to three times `n_per_subset`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_positive: Option<usize>,
    #[serde(default = "default_bench_name")]
    pub bench_name: String,
    #[serde(default)]
    pub collect: CollectSection,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_gateway(base: &Path, g: &mut GatewayConfig) {
    for p in [&mut g.cache_dir, &mut g.mock_script, &mut g.usage_ledger]
        .into_iter()
        .flatten()
    {
        resolve(base, p);
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus);
        resolve(base, &mut self.out_dir);
        for p in [&mut self.template_dir, &mut self.companion, &mut self.images_root].into_iter().flatten() {
            resolve(base, p);
        }
        resolve_gateway(base, &mut self.gateway);
        if let Some(g) = &mut self.collect.gateway {
            resolve_gateway(base, g);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.templates.is_empty() {
            return bad("templates must name at least one template".into());
        }
        if self.templates.contains(&TemplateKind::Classifier) {
            return bad("templates: classifier is not a generation template".into());
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return bad(format!("overlap_threshold {} is outside [0, 1]", self.overlap_threshold));
        }
        if self.bench_samples_per_relation == 0 {
            return bad("bench_samples_per_relation must be positive".into());
        }
        self.gateway
            .validate()
            .or_else(|e| bad(format!("gateway: {e}")))?;
        if let Some(g) = &self.collect.gateway {
            g.validate().or_else(|e| bad(format!("collect.gateway: {e}")))?;
        }
        Ok(())
    }

    pub fn template_kinds(&self) -> BTreeSet<TemplateKind> {
        self.templates.iter().copied().collect()
    }

    pub fn n_positive(&self) -> usize {
        self.n_positive.unwrap_or_else(|| default_positive_count(self.n_per_subset))
    }

    /// Hex SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn images_root(&self) -> PathBuf {
        self.images_root.clone().unwrap_or_else(|| {
            self.corpus
                .parent()
                .unwrap_or(Path::new("."))
                .join("images")
        })
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.jsonl")
    }
    pub fn pool_path(&self) -> PathBuf {
        self.out_dir.join("pool.jsonl")
    }
    pub fn benchmark_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}.jsonl", self.bench_name))
    }
    pub fn responses_path(&self) -> PathBuf {
        self.out_dir.join("responses.jsonl")
    }
    pub fn runs_dir(&self) -> PathBuf {
        self.out_dir.join("runs")
    }
    pub fn retry_path(&self, stage: &str) -> PathBuf {
        self.out_dir.join(format!("retry-{stage}.jsonl"))
    }
}
