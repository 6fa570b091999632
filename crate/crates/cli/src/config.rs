//! Run configuration: one JSON document, dotted `--set` overrides, and the
//! resolved form with every default filled in.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use embedhead::dataset::{ClassCatalog, SynthParams};
use embedhead::features::{FeatureOptions, MetadataSchema};
use embedhead::losses::LossConfig;
use embedhead::metrics::CostMatrix;
use embedhead::model::{AuxHeads, FusionConfig, HeadConfig, MlpHeadConfig};
use embedhead::sampler::SamplerConfig;
use embedhead::trainer::{AdamWConfig, RankMetric, SchedulerConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    /// Root seed of the validation-pool split.
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Fusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxSection {
    pub poison: bool,
    /// Taxonomy ranks with their own logit head.
    pub taxonomy: Vec<String>,
}

impl Default for AuxSection {
    fn default() -> Self {
        Self {
            poison: true,
            taxonomy: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub aux_heads: AuxSection,
    /// Fusion only.
    pub meta_hidden_dim: usize,
    pub heads: usize,
    /// Fusion only; zero means four times the embedding width.
    pub ff_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden_dim: 4096,
            dropout: 0.2,
            aux_heads: AuxSection::default(),
            meta_hidden_dim: 256,
            heads: 8,
            ff_dim: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(alias = "batch")]
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub scheduler: SchedulerConfig,
    pub top_k: usize,
    pub rank_metric: RankMetric,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            scheduler: t.scheduler,
            top_k: t.top_k,
            rank_metric: t.rank_metric,
            grad_clip: t.grad_clip,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub costs: CostMatrix,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            costs: CostMatrix::default(),
            batch_size: 1024,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub features: FeatureOptions,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    /// Directory of the config file; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A configuration problem the user must fix (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

/// Parses `key=value`; the value is JSON when it parses as JSON and a plain
/// string otherwise.
pub fn parse_override(s: &str) -> anyhow::Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_error(format!("override `{s}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((key.to_owned(), value))
}

/// Sets a dotted path inside `doc`, creating objects along the way.
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = match cur {
            Value::Object(m) => m,
            _ => return Err(config_error(format!("cannot set `{key}`: `{}` is not an object", parts[..i].join(".")))),
        };
        if i + 1 == parts.len() {
            map.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = map.entry((*part).to_owned()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}

/// Deserializes with the dotted path of the first offending field in the
/// error message.
pub fn from_value_with_path<T: DeserializeOwned>(doc: Value, what: &str) -> anyhow::Result<T> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            config_error(format!("invalid {what}: {inner}"))
        } else {
            config_error(format!("invalid {what} at `{path}`: {inner}"))
        }
    })
}

pub fn read_json_doc(path: &Path) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{} is not valid JSON: {e}", path.display())))
}

/// Loads `path` (or the all-defaults document) and applies overrides in order.
pub fn load_doc(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Value> {
    let mut doc = match path {
        Some(p) => read_json_doc(p)?,
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(config_error("config root must be a JSON object"));
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply_override(&mut doc, &k, v)?;
    }
    Ok(doc)
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let doc = load_doc(path, overrides)?;
        let mut cfg: RunConfig = from_value_with_path(doc, "config")?;
        cfg.base_dir = path.and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    /// The config as JSON with every default materialized.
    pub fn resolved(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Single-line JSON for file headers.
    pub fn resolved_line(&self) -> String {
        serde_json::to_string(&self.resolved()).expect("config serializes")
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.dataset.manifest.is_absolute() {
            self.dataset.manifest.clone()
        } else {
            self.base_dir.join(&self.dataset.manifest)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            scheduler: t.scheduler,
            top_k: t.top_k,
            rank_metric: t.rank_metric,
            grad_clip: t.grad_clip,
            seed: t.seed,
            loss: self.loss.clone(),
            sampler: self.sampler.clone(),
            costs: self.eval.costs,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let path_err = |section: &str, e: embedhead::Error| match e {
            embedhead::Error::InvalidArgument { arg, reason } => config_error(format!("invalid config at `{section}.{arg}`: {reason}")),
            other => config_error(format!("invalid config in `{section}`: {other}")),
        };
        let m = &self.model;
        if m.kind == ModelKind::Mlp && m.hidden_dim == 0 {
            return Err(config_error("invalid config at `model.hidden_dim`: must be positive"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(config_error(format!("invalid config at `model.dropout`: must be in [0, 1), got {}", m.dropout)));
        }
        if m.kind == ModelKind::Fusion && (m.heads == 0 || m.meta_hidden_dim == 0) {
            return Err(config_error("invalid config at `model.heads`: fusion needs positive heads and meta_hidden_dim"));
        }
        if self.eval.batch_size == 0 {
            return Err(config_error("invalid config at `eval.batch_size`: must be positive"));
        }
        let t = self.train_config();
        // attribute failures to the section that owns the field
        self.loss.validate().map_err(|e| path_err("loss", e))?;
        t.costs.validate().map_err(|e| path_err("eval", e))?;
        let eps = self.sampler.floor_eps;
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(config_error("invalid config at `sampler.floor_eps`: must be finite and nonnegative"));
        }
        t.validate().map_err(|e| path_err("train", e))
    }

    /// Head architecture for the given data dimensions.
    pub fn head_config(&self, embedding_dim: usize, schema: &MetadataSchema, catalog: &ClassCatalog) -> anyhow::Result<HeadConfig> {
        let mut taxonomy = BTreeMap::new();
        for rank in &self.model.aux_heads.taxonomy {
            let map = catalog
                .taxonomy_maps
                .get(rank)
                .ok_or_else(|| config_error(format!("invalid config at `model.aux_heads.taxonomy`: no `{rank}` labels in the training pool")))?;
            taxonomy.insert(rank.clone(), map.labels.len());
        }
        let aux = AuxHeads {
            poison: self.model.aux_heads.poison,
            taxonomy,
        };
        let metadata_dim = if self.features.enable_metadata { schema.width } else { 0 };
        let m = &self.model;
        let cfg = match m.kind {
            ModelKind::Mlp => HeadConfig::Mlp(MlpHeadConfig {
                embedding_dim,
                metadata_dim,
                hidden_dim: m.hidden_dim,
                n_classes: catalog.n_classes(),
                dropout: m.dropout,
                aux,
            }),
            ModelKind::Fusion => HeadConfig::Fusion(FusionConfig {
                embedding_dim,
                metadata_dim,
                meta_hidden_dim: m.meta_hidden_dim,
                heads: m.heads,
                ff_dim: if m.ff_dim == 0 { 4 * embedding_dim } else { m.ff_dim },
                n_classes: catalog.n_classes(),
                dropout: m.dropout,
                aux,
            }),
        };
        cfg.validate().map_err(|e| config_error(format!("invalid model config: {e}")))?;
        Ok(cfg)
    }
}

/// Synthetic-data parameters from an optional JSON file plus overrides.
pub fn load_synth_params(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<SynthParams> {
    let doc = load_doc(path, overrides)?;
    from_value_with_path(doc, "synth parameters")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!("{} is malformed: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
