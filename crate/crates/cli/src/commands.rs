//! Subcommand bodies. Each takes plain arguments and returns what it wrote so
//! tests can drive them without a process boundary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use embedhead::dataset::io::MANIFEST_VERSION;
use embedhead::dataset::{
    assemble_fold, build_class_catalog, load_dataset, make_synthetic, stratified_three_way_split, write_embeddings,
    write_metadata, ClassCatalog, Dataset, DatasetManifest, ObservationRecord, PoolEntry, SplitAssignment,
};
use embedhead::diagnostics::{self, ComponentCheck};
use embedhead::features::MetadataSchema;
use embedhead::inference::predict_records;
use embedhead::metrics::{argmax, evaluate_run, top_k, write_per_class_csv, Report};
use embedhead::model::{load_checkpoint, save_checkpoint, Model};
use embedhead::tensor::sigmoid;
use embedhead::trainer::{run_cross_validation, write_history_csv, EpochRecord, FitContext};
use serde::Serialize;
use serde_json::Value;

use crate::config::{self, config_error, read_json, write_json, RunConfig};

pub const TRAIN_POOL: &str = "train";
pub const VAL_POOL: &str = "val";
pub const SPLIT_FILE: &str = "split.json";
pub const CATALOG_FILE: &str = "catalog.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const RESOLVED_FILE: &str = "resolved_config.json";

fn resolved_preamble(cfg: &RunConfig) -> Vec<String> {
    vec![format!("resolved_config {}", cfg.resolved_line())]
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(config_error(format!("manifest not found: {}", path.display())));
    }
    Ok(DatasetManifest::load(path)?)
}

// ---- synth ----

pub struct SynthArgs {
    pub params: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub out: PathBuf,
}

/// Writes `train`/`val` pools (EMB1 + CSV), the manifest and the resolved
/// parameters. Returns the manifest path.
pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let params = config::load_synth_params(a.params.as_deref(), &a.overrides)?;
    let (train, val) = make_synthetic(&params).map_err(|e| config_error(format!("invalid synth parameters: {e}")))?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut manifest = DatasetManifest {
        schema_version: MANIFEST_VERSION,
        dim: params.dim,
        pools: Vec::new(),
        base_dir: a.out.clone(),
    };
    for (name, records) in [(TRAIN_POOL, &train), (VAL_POOL, &val)] {
        let emb = PathBuf::from(format!("{name}.emb"));
        let csv = PathBuf::from(format!("{name}.csv"));
        write_embeddings(
            &a.out.join(&emb),
            params.dim,
            records.iter().map(|r| (r.observation_id.as_str(), r.embedding.as_slice())),
        )?;
        write_metadata(&a.out.join(&csv), records.iter())?;
        manifest.pools.push(PoolEntry {
            name: name.to_owned(),
            embeddings: emb,
            metadata: csv,
            count: records.len(),
        });
    }
    let path = a.out.join("manifest.json");
    manifest.save(&path)?;
    write_json(&a.out.join("synth.json"), &params)?;
    Ok(path)
}

// ---- prepare ----

pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

pub struct PrepareArgs {
    pub config: ConfigArgs,
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct PrepareOutput {
    pub section_sizes: [usize; 3],
    pub n_classes: usize,
    pub schema_width: usize,
}

fn load_pools(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = load_manifest(&cfg.manifest_path())?;
    let ds = load_dataset(&manifest)?;
    for name in [TRAIN_POOL, VAL_POOL] {
        if ds.pool(name).is_err() {
            return Err(config_error(format!("manifest has no `{name}` pool")));
        }
    }
    Ok(ds)
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<PrepareOutput> {
    let cfg = a.config.load()?;
    let ds = load_pools(&cfg)?;
    let (train, val) = (ds.pool(TRAIN_POOL)?, ds.pool(VAL_POOL)?);
    let catalog = build_class_catalog(train, val)?;
    let split = stratified_three_way_split(val, cfg.dataset.seed)?;
    let schema = MetadataSchema::fit(train, cfg.features);
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    write_json(&a.out.join(SPLIT_FILE), &split)?;
    write_json(&a.out.join(CATALOG_FILE), &catalog)?;
    write_json(&a.out.join(SCHEMA_FILE), &schema)?;
    write_json(&a.out.join(RESOLVED_FILE), &cfg.resolved())?;
    Ok(PrepareOutput {
        section_sizes: split.section_sizes(),
        n_classes: catalog.n_classes(),
        schema_width: schema.width,
    })
}

// ---- train ----

struct Prepared {
    split: SplitAssignment,
    catalog: ClassCatalog,
    schema: MetadataSchema,
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    for f in [SPLIT_FILE, CATALOG_FILE, SCHEMA_FILE] {
        if !dir.join(f).is_file() {
            return Err(config_error(format!("{} is missing; run `prepare` first", dir.join(f).display())));
        }
    }
    Ok(Prepared {
        split: read_json(&dir.join(SPLIT_FILE))?,
        catalog: read_json(&dir.join(CATALOG_FILE))?,
        schema: read_json(&dir.join(SCHEMA_FILE))?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldSelection {
    One(usize),
    All,
}

impl std::str::FromStr for FoldSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(FoldSelection::All),
            _ => s.parse().map(FoldSelection::One).map_err(|_| format!("expected a fold index or `all`, got `{s}`")),
        }
    }
}

pub struct TrainArgs {
    pub config: ConfigArgs,
    pub prepared: PathBuf,
    pub out: PathBuf,
    pub fold: FoldSelection,
}

#[derive(Debug)]
pub struct TrainedFold {
    pub fold: usize,
    pub history: Vec<EpochRecord>,
    pub history_path: PathBuf,
    /// Best first.
    pub checkpoints: Vec<PathBuf>,
    pub best_epochs: Vec<usize>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<Vec<TrainedFold>> {
    let cfg = a.config.load()?;
    let prep = load_prepared(&a.prepared)?;
    if prep.split.seed != cfg.dataset.seed {
        return Err(config_error(format!(
            "invalid config at `dataset.seed`: prepared split used seed {} but the config has {}",
            prep.split.seed, cfg.dataset.seed
        )));
    }
    let ds = load_pools(&cfg)?;
    let folds: Vec<usize> = match a.fold {
        FoldSelection::All => (0..prep.split.fold_layout.len()).collect(),
        FoldSelection::One(f) if f < prep.split.fold_layout.len() => vec![f],
        FoldSelection::One(f) => return Err(config_error(format!("fold {f} not in 0..{}", prep.split.fold_layout.len()))),
    };
    let head = cfg.head_config(ds.dim, &prep.schema, &prep.catalog)?;
    let train_cfg = cfg.train_config();
    let run_config = cfg.resolved();
    let ctx = FitContext {
        catalog: &prep.catalog,
        schema: Some(&prep.schema).filter(|_| cfg.features.enable_metadata),
        model: &head,
        train: &train_cfg,
        run_config: &run_config,
    };
    let results = run_cross_validation(ds.pool(TRAIN_POOL)?, ds.pool(VAL_POOL)?, &prep.split, &folds, ctx)?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut out = Vec::new();
    for r in results {
        let history_path = a.out.join(format!("fold{}-history.csv", r.fold));
        let mut preamble = resolved_preamble(&cfg);
        preamble.push(format!("fold {}", r.fold));
        let mut w = create(&history_path)?;
        write_history_csv(&mut w, &r.fit.history, &preamble)?;
        w.flush()?;
        let mut checkpoints = Vec::new();
        for (rank, k) in r.fit.checkpoints.iter().enumerate() {
            let path = a.out.join(format!("fold{}-top{}.ckpt", r.fold, rank + 1));
            save_checkpoint(&k.model, &k.meta, &path)?;
            checkpoints.push(path);
        }
        out.push(TrainedFold {
            fold: r.fold,
            best_epochs: r.fit.checkpoints.iter().map(|k| k.epoch).collect(),
            history: r.fit.history,
            history_path,
            checkpoints,
        });
    }
    Ok(out)
}

// ---- evaluate / predict ----

/// Config from `--config`, or else the one embedded in the first checkpoint.
fn config_for_checkpoints(args: &ConfigArgs, first_meta: &Value) -> Result<RunConfig> {
    if args.config.is_some() {
        return args.load();
    }
    let mut doc = first_meta.clone();
    for o in &args.overrides {
        let (k, v) = config::parse_override(o)?;
        config::apply_override(&mut doc, &k, v)?;
    }
    let cfg: RunConfig = config::from_value_with_path(doc, "checkpoint config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_models(paths: &[PathBuf]) -> Result<(Vec<Model>, Value)> {
    if paths.is_empty() {
        return Err(config_error("at least one checkpoint is required"));
    }
    let mut models = Vec::new();
    let mut first_config = Value::Null;
    for (i, p) in paths.iter().enumerate() {
        if !p.is_file() {
            return Err(config_error(format!("checkpoint not found: {}", p.display())));
        }
        let (m, meta) = load_checkpoint(p)?;
        if i == 0 {
            first_config = meta.run_config;
        }
        models.push(m);
    }
    Ok((models, first_config))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slice {
    /// The section no fold trains or validates on.
    Heldout,
    /// The validation section of `--fold`.
    Val,
    /// The training set of `--fold`.
    Train,
    /// A whole manifest pool.
    Pool,
}

impl Slice {
    pub fn name(self) -> &'static str {
        match self {
            Slice::Heldout => "heldout",
            Slice::Val => "val",
            Slice::Train => "train",
            Slice::Pool => "pool",
        }
    }
}

pub struct EvaluateArgs {
    pub config: ConfigArgs,
    pub prepared: PathBuf,
    pub manifest: Option<PathBuf>,
    pub slice: Slice,
    pub fold: usize,
    pub pool: String,
    pub checkpoints: Vec<PathBuf>,
    pub out: PathBuf,
    pub per_class: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct EvaluateOutput {
    #[serde(flatten)]
    pub report: Report,
    pub slice: String,
    pub n_models: usize,
    pub resolved_config: Value,
}

fn dataset_for(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Dataset> {
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| cfg.manifest_path());
    Ok(load_dataset(&load_manifest(&path)?)?)
}

fn select<'a>(ds: &'a Dataset, split: &SplitAssignment, slice: Slice, fold: usize, pool: &str) -> Result<Vec<&'a ObservationRecord>> {
    if slice == Slice::Pool {
        return Ok(ds.pool(pool)?.iter().collect());
    }
    let layout = split.fold_layout.len();
    if fold >= layout {
        return Err(config_error(format!("fold {fold} not in 0..{layout}")));
    }
    let sets = assemble_fold(ds.pool(TRAIN_POOL)?, ds.pool(VAL_POOL)?, split, fold)?;
    Ok(match slice {
        Slice::Heldout => sets.test,
        Slice::Val => sets.val,
        Slice::Train => sets.train,
        Slice::Pool => unreachable!(),
    })
}

fn incompatible_is_config(e: embedhead::Error) -> anyhow::Error {
    match e {
        embedhead::Error::Incompatible { .. } => config_error(e.to_string()),
        other => other.into(),
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<EvaluateOutput> {
    let (models, embedded) = load_models(&a.checkpoints)?;
    let cfg = config_for_checkpoints(&a.config, &embedded)?;
    let prep = load_prepared(&a.prepared)?;
    let ds = dataset_for(&cfg, a.manifest.as_deref())?;
    let records = select(&ds, &prep.split, a.slice, a.fold, &a.pool)?;
    let schema = Some(&prep.schema).filter(|_| models[0].config.metadata_dim() > 0);
    let eval = evaluate_run(&models, &records, &prep.catalog, schema, &cfg.eval.costs, cfg.eval.batch_size)
        .map_err(incompatible_is_config)?;
    let out = EvaluateOutput {
        report: Report::new(&eval.scores, &cfg.eval.costs),
        slice: a.slice.name().to_owned(),
        n_models: models.len(),
        resolved_config: cfg.resolved(),
    };
    write_json(&a.out, &out)?;
    if let Some(p) = &a.per_class {
        let mut w = create(p)?;
        for line in resolved_preamble(&cfg) {
            writeln!(w, "# {line}")?;
        }
        write_per_class_csv(&mut w, &eval.per_class, Some(&prep.catalog.species_names))?;
        w.flush()?;
    }
    Ok(out)
}

pub struct PredictArgs {
    pub config: ConfigArgs,
    pub prepared: PathBuf,
    pub manifest: Option<PathBuf>,
    pub pool: String,
    pub checkpoints: Vec<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct PredictOutput {
    pub rows: usize,
    pub seconds: f64,
}

impl PredictOutput {
    pub fn seconds_per_image(&self) -> f64 {
        self.seconds / self.rows.max(1) as f64
    }
}

pub fn cmd_predict(a: &PredictArgs) -> Result<PredictOutput> {
    let (models, embedded) = load_models(&a.checkpoints)?;
    let cfg = config_for_checkpoints(&a.config, &embedded)?;
    let prep = load_prepared(&a.prepared)?;
    for m in &models[1..] {
        embedhead::model::checkpoint::ensure_compatible(&models[0].config, &m.config).map_err(incompatible_is_config)?;
    }
    let n_classes = models[0].config.n_classes();
    if n_classes != prep.catalog.n_classes() {
        return Err(config_error(format!(
            "incompatible config field `n_classes`: expected {}, found {n_classes}",
            prep.catalog.n_classes()
        )));
    }
    let ds = dataset_for(&cfg, a.manifest.as_deref())?;
    let records: Vec<&ObservationRecord> = ds.pool(&a.pool)?.iter().collect();
    if records.is_empty() {
        bail!("pool `{}` is empty", a.pool);
    }
    let schema = Some(&prep.schema).filter(|_| models[0].config.metadata_dim() > 0);
    let start = Instant::now();
    let out = predict_records(&models, &records, schema, cfg.eval.batch_size)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut w = create(&a.out)?;
    for line in resolved_preamble(&cfg) {
        writeln!(w, "# {line}")?;
    }
    let mut csv = csv::Writer::from_writer(&mut w);
    csv.write_record(["observation_id", "predicted_class_index", "predicted_species", "poison_probability", "top3"])?;
    for (i, r) in records.iter().enumerate() {
        let row = out.class_logits.row(i);
        let class = argmax(row);
        let poison = match &out.poison_logit {
            Some(z) => sigmoid(z.data()[i]),
            // no poison head: probability mass on poisonous species
            None => {
                let mut p = row.to_vec();
                embedhead::tensor::softmax_in_place(&mut p);
                p.iter().zip(&prep.catalog.poison_map).filter(|(_, &t)| t).map(|(v, _)| v).sum()
            }
        };
        let top3: Vec<String> = top_k(row, 3).iter().map(usize::to_string).collect();
        csv.write_record([
            r.observation_id.clone(),
            class.to_string(),
            prep.catalog.species_names[class].clone(),
            poison.to_string(),
            top3.join(" "),
        ])?;
    }
    csv.flush()?;
    drop(csv);
    w.flush()?;
    Ok(PredictOutput {
        rows: records.len(),
        seconds,
    })
}

// ---- gradcheck ----

pub struct GradcheckArgs {
    pub seeds: u64,
    pub tolerance: f64,
    /// Adds a case with a deliberately wrong backward rule.
    pub include_corrupted: bool,
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Vec<ComponentCheck>> {
    if a.seeds == 0 {
        return Err(config_error("--seeds must be positive"));
    }
    let corrupted = a.include_corrupted;
    Ok(diagnostics::run_suite(0..a.seeds, diagnostics::GRADCHECK_EPS, move |s| {
        if corrupted {
            vec![diagnostics::corrupted_case(s)]
        } else {
            Vec::new()
        }
    })?)
}
