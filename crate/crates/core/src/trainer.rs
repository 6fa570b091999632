//! AdamW, learning-rate schedules, the epoch loop with top-k checkpoint
//! retention, and the two-fold cross-validation driver.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{assemble_fold, frequencies, ClassCatalog, ObservationRecord, RecordSlice, SplitAssignment};
use crate::error::{Error, Result};
use crate::features::MetadataSchema;
use crate::inference::{batch_inputs, concat_outputs};
use crate::losses::{composite_loss, LossConfig, LossContext, Targets};
use crate::metrics::{evaluate_logits, poison_confusion, CostMatrix};
use crate::model::{forward, CheckpointMeta, HeadConfig, HeadOutput, Model, Params};
use crate::rng;
use crate::sampler::{compute_sampling_weights, SamplerConfig, SamplerWeights};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, one per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &Params, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
    pub fn step(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Dimension {
                context: "gradient list".into(),
                expected: self.m.len(),
                actual: grads.len(),
            });
        }
        for (name, g) in params.names().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of `{name}`"),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((t, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * weight_decay * *theta;
            }
        }
        Ok(())
    }
}

/// SGDR learning rate at (possibly fractional) epoch `t`.
pub fn cosine_warm_restart_lr(t: f64, eta_max: f64, eta_min: f64, t0: usize, t_mult: usize) -> f64 {
    let mut period = t0.max(1) as f64;
    let mut cur = t.max(0.0);
    while cur >= period {
        cur -= period;
        period *= t_mult.max(1) as f64;
    }
    eta_min + 0.5 * (eta_max - eta_min) * (1.0 + (std::f64::consts::PI * cur / period).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerConfig {
    CosineWarmRestarts {
        #[serde(default)]
        eta_min: f64,
        #[serde(default = "default_t0")]
        t0: usize,
        #[serde(default = "default_t_mult")]
        t_mult: usize,
    },
    ReduceOnPlateau {
        #[serde(default = "default_factor")]
        factor: f64,
        #[serde(default = "default_patience")]
        patience: usize,
        #[serde(default)]
        threshold: f64,
    },
    Constant,
}

fn default_t0() -> usize {
    10
}
fn default_t_mult() -> usize {
    2
}
fn default_factor() -> f64 {
    0.5
}
fn default_patience() -> usize {
    2
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig::CosineWarmRestarts {
            eta_min: 0.0,
            t0: default_t0(),
            t_mult: default_t_mult(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self, eta_max: f64) -> Result<()> {
        match *self {
            SchedulerConfig::CosineWarmRestarts { eta_min, t0, t_mult } => {
                if !(0.0..=eta_max).contains(&eta_min) {
                    return Err(Error::invalid("eta_min", format!("{eta_min} outside [0, lr = {eta_max}]")));
                }
                if t0 == 0 || t_mult == 0 {
                    return Err(Error::invalid("t0", "t0 and t_mult must be at least 1"));
                }
            }
            SchedulerConfig::ReduceOnPlateau { factor, threshold, .. } => {
                if !(factor > 0.0 && factor < 1.0) {
                    return Err(Error::invalid("factor", format!("{factor} outside (0, 1)")));
                }
                if !(threshold >= 0.0) {
                    return Err(Error::invalid("threshold", "must be nonnegative"));
                }
            }
            SchedulerConfig::Constant => {}
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the metric has failed to
/// improve by more than `threshold` for more than `patience` evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct ReduceOnPlateau {
    pub lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    direction: Direction,
    best: Option<f64>,
    bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64, direction: Direction) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            direction,
            best: None,
            bad: 0,
        }
    }

    pub fn step(&mut self, metric: f64) -> f64 {
        let improved = match (self.best, self.direction) {
            (None, _) => true,
            (Some(b), Direction::Minimize) => metric < b - self.threshold,
            (Some(b), Direction::Maximize) => metric > b + self.threshold,
        };
        if improved {
            self.best = Some(metric);
            self.bad = 0;
        } else {
            self.bad += 1;
            if self.bad > self.patience {
                self.lr *= self.factor;
                self.bad = 0;
            }
        }
        self.lr
    }
}

/// Validation metric used for plateau detection and checkpoint ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    Track1,
    Track2,
    Track3,
    Top1,
    Top3,
    MacroF1,
    PoisonAcc,
    ValLoss,
}

impl RankMetric {
    pub fn direction(self) -> Direction {
        match self {
            RankMetric::Top1 | RankMetric::Top3 | RankMetric::MacroF1 | RankMetric::PoisonAcc => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }

    pub fn of(self, e: &EpochRecord) -> f64 {
        match self {
            RankMetric::Track1 => e.track1,
            RankMetric::Track2 => e.track2,
            RankMetric::Track3 => e.track3,
            RankMetric::Top1 => e.top1,
            RankMetric::Top3 => e.top3,
            RankMetric::MacroF1 => e.macro_f1,
            RankMetric::PoisonAcc => e.poison_acc,
            RankMetric::ValLoss => e.val_loss,
        }
    }

    /// `a` ranks strictly ahead of `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self.direction() {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: AdamWConfig,
    pub scheduler: SchedulerConfig,
    pub top_k: usize,
    pub rank_metric: RankMetric,
    /// Global gradient-norm bound; zero disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub costs: CostMatrix,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 512,
            lr: 1e-4,
            optimizer: AdamWConfig::default(),
            scheduler: SchedulerConfig::default(),
            top_k: 2,
            rank_metric: RankMetric::Track3,
            grad_clip: 5.0,
            seed: 0,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            costs: CostMatrix::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epochs", self.epochs), ("batch_size", self.batch_size), ("top_k", self.top_k)] {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be positive and finite, got {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid("grad_clip", "must be nonnegative"));
        }
        self.scheduler.validate(self.lr)?;
        self.loss.validate()?;
        self.costs.validate()
    }
}

/// One row of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub top1: f64,
    pub top3: f64,
    pub macro_f1: f64,
    /// Share of samples whose predicted species carries the true poison flag.
    pub poison_acc: f64,
    pub track1: f64,
    pub track2: f64,
    pub track3: f64,
}

pub const HISTORY_COLUMNS: [&str; 11] = [
    "epoch",
    "lr",
    "train_loss",
    "val_loss",
    "top1",
    "top3",
    "macro_f1",
    "poison_acc",
    "track1",
    "track2",
    "track3",
];

impl EpochRecord {
    fn fields(&self) -> [f64; 10] {
        [
            self.lr,
            self.train_loss,
            self.val_loss,
            self.top1,
            self.top3,
            self.macro_f1,
            self.poison_acc,
            self.track1,
            self.track2,
            self.track3,
        ]
    }

    pub fn metrics(&self) -> std::collections::BTreeMap<String, f64> {
        HISTORY_COLUMNS[1..].iter().map(|s| s.to_string()).zip(self.fields()).collect()
    }
}

/// Writes the history CSV, preceded by `# ` comment lines from `preamble`.
pub fn write_history_csv<W: Write>(mut out: W, history: &[EpochRecord], preamble: &[String]) -> Result<()> {
    for line in preamble {
        writeln!(out, "# {line}").map_err(|e| Error::io("history", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HISTORY_COLUMNS)?;
    for e in history {
        let mut row = vec![e.epoch.to_string()];
        row.extend(e.fields().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("history", e))
}

#[derive(Clone, Debug)]
pub struct RetainedCheckpoint {
    pub epoch: usize,
    pub metric: f64,
    pub model: Model,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub history: Vec<EpochRecord>,
    /// Best first; at most `top_k`.
    pub checkpoints: Vec<RetainedCheckpoint>,
}

/// Everything `fit` needs besides the data.
#[derive(Clone, Copy, Debug)]
pub struct FitContext<'a> {
    pub catalog: &'a ClassCatalog,
    pub schema: Option<&'a MetadataSchema>,
    pub model: &'a HeadConfig,
    pub train: &'a TrainConfig,
    /// Echoed into checkpoint headers.
    pub run_config: &'a serde_json::Value,
}

fn targets_for(records: &[&ObservationRecord], catalog: &ClassCatalog, config: &HeadConfig) -> Targets {
    Targets {
        class: records.iter().map(|r| catalog.class_of(&r.species)).collect(),
        poison: records.iter().map(|r| r.poisonous).collect(),
        taxonomy: config
            .aux()
            .taxonomy
            .keys()
            .map(|rank| {
                let labels = records
                    .iter()
                    .map(|r| catalog.taxonomy_label(rank, r).unwrap_or(0))
                    .collect();
                (rank.clone(), labels)
            })
            .collect(),
    }
}

/// Eval-mode outputs and mean composite loss over `records`.
fn evaluate_records(
    model: &Model,
    records: &[&ObservationRecord],
    ctx: &FitContext<'_>,
    loss: &LossContext,
) -> Result<(HeadOutput, f64)> {
    let mut parts = Vec::new();
    let mut total = 0.0;
    let mut unused = rng::stream(0, rng::DROPOUT);
    for chunk in records.chunks(ctx.train.batch_size) {
        let inputs = batch_inputs(chunk, model.config.embedding_dim(), ctx.schema)?;
        let mut tape = Tape::new().with_finite_checks(false);
        let (bound, _) = model.bind(&mut tape, false);
        let e = tape.constant(inputs.embeddings);
        let m = inputs.metadata.map(|m| tape.constant(m));
        let out = forward(&model.config, &mut tape, &bound, e, m, false, &mut unused)?;
        let l = composite_loss(&mut tape, &out, &targets_for(chunk, ctx.catalog, &model.config), loss)?;
        total += tape.value(l).item() * chunk.len() as f64;
        parts.push(out.values(&tape));
    }
    Ok((concat_outputs(&parts)?, total / records.len() as f64))
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { context } => Error::Diverged {
            epoch,
            batch,
            reason: format!("non-finite {context}"),
        },
        other => other,
    }
}

/// Trains one head on `train`, evaluating on `val` after every epoch.
pub fn fit(train: &RecordSlice<'_>, val: &RecordSlice<'_>, ctx: FitContext<'_>) -> Result<FitOutput> {
    let cfg = ctx.train;
    cfg.validate()?;
    ctx.model.validate()?;
    if ctx.model.n_classes() != ctx.catalog.n_classes() {
        return Err(Error::Incompatible {
            field: "n_classes".into(),
            expected: ctx.catalog.n_classes().to_string(),
            found: ctx.model.n_classes().to_string(),
        });
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let train_records: Vec<&ObservationRecord> = train.iter().collect();
    let val_records: Vec<&ObservationRecord> = val.iter().collect();
    let catalog = ctx.catalog;

    let train_counts = catalog.counts(train_records.iter().copied());
    let sample_classes: Vec<usize> = train_records.iter().map(|r| catalog.class_of(&r.species)).collect();
    let sampler = if cfg.sampler.enabled {
        let target = frequencies(&catalog.counts(val_records.iter().copied()));
        let w = compute_sampling_weights(&frequencies(&train_counts), &target, cfg.sampler.floor_eps)?;
        SamplerWeights::new(w, &sample_classes)?
    } else {
        SamplerWeights::uniform(train_records.len())?
    };
    let loss = LossContext::new(cfg.loss.clone(), &train_counts)?;
    let val_truth: Vec<usize> = val_records.iter().map(|r| catalog.class_of(&r.species)).collect();

    let mut model = Model::new(ctx.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.params, cfg.optimizer);
    let mut plateau = match cfg.scheduler {
        SchedulerConfig::ReduceOnPlateau {
            factor,
            patience,
            threshold,
        } => Some(ReduceOnPlateau::new(cfg.lr, factor, patience, threshold, cfg.rank_metric.direction())),
        _ => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut kept: Vec<RetainedCheckpoint> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let lr = match (cfg.scheduler, &plateau) {
            (SchedulerConfig::CosineWarmRestarts { eta_min, t0, t_mult }, _) => {
                cosine_warm_restart_lr((epoch - 1) as f64, cfg.lr, eta_min, t0, t_mult)
            }
            (_, Some(p)) => p.lr,
            _ => cfg.lr,
        };
        let order = sampler.draw_epoch_indices(train_records.len(), &mut rng::substream(cfg.seed, rng::SAMPLER, epoch as u64));
        let mut dropout_rng = rng::substream(cfg.seed, rng::DROPOUT, epoch as u64);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = batch + 1;
            let records: Vec<&ObservationRecord> = idx.iter().map(|&i| train_records[i]).collect();
            let inputs = batch_inputs(&records, model.config.embedding_dim(), ctx.schema)?;
            let mut tape = Tape::new().with_finite_checks(false);
            let (bound, vars) = model.bind(&mut tape, true);
            let e = tape.constant(inputs.embeddings);
            let m = inputs.metadata.map(|m| tape.constant(m));
            let out = forward(&model.config, &mut tape, &bound, e, m, true, &mut dropout_rng)?;
            let l = composite_loss(&mut tape, &out, &targets_for(&records, catalog, &model.config), &loss)?;
            let value = tape.value(l).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    reason: format!("loss is {value}"),
                });
            }
            loss_sum += value * records.len() as f64;
            tape.backward(l)?;
            let mut grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();
            if cfg.grad_clip > 0.0 {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    grads.iter_mut().flatten().for_each(|g| *g *= s);
                }
            }
            opt.step(&mut model.params, &grads, lr).map_err(|e| diverged(epoch, batch, e))?;
            model.params.tensors_mut().for_each(|t| t.round_to_f32());
            if !model.params.tensors().all(|t| t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    reason: "non-finite parameters after update".into(),
                });
            }
        }

        let (out, val_loss) = evaluate_records(&model, &val_records, &ctx, &loss)?;
        let eval = evaluate_logits(&out.class_logits, &val_truth, &catalog.poison_map, &cfg.costs)?;
        let conf = poison_confusion(&eval.predictions, &val_truth, &catalog.poison_map)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_records.len() as f64,
            val_loss,
            top1: eval.scores.accuracy,
            top3: eval.scores.top3_accuracy.unwrap_or(f64::NAN),
            macro_f1: eval.scores.macro_f1,
            poison_acc: conf.agreement(),
            track1: eval.scores.track1,
            track2: eval.scores.track2,
            track3: eval.scores.track3,
        };
        let metric = cfg.rank_metric.of(&record);
        if !metric.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                reason: format!("validation {:?} is {metric}", cfg.rank_metric),
            });
        }
        if let Some(p) = &mut plateau {
            p.step(metric);
        }
        // ties keep the earlier epoch
        let pos = kept.iter().position(|k| cfg.rank_metric.better(metric, k.metric)).unwrap_or(kept.len());
        if pos < cfg.top_k {
            kept.insert(
                pos,
                RetainedCheckpoint {
                    epoch,
                    metric,
                    model: model.clone(),
                    meta: CheckpointMeta {
                        seed: cfg.seed,
                        epoch,
                        metrics: record.metrics(),
                        run_config: ctx.run_config.clone(),
                    },
                },
            );
            kept.truncate(cfg.top_k);
        }
        history.push(record);
    }
    Ok(FitOutput {
        history,
        checkpoints: kept,
    })
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub fit: FitOutput,
    pub test_ids: Vec<String>,
    /// Reads of held-out records during training; always zero.
    pub test_reads: usize,
}

/// Runs `fit` on each requested fold. The held-out section is wrapped in a
/// counting view that training never receives.
pub fn run_cross_validation(
    train_pool: &[ObservationRecord],
    val_pool: &[ObservationRecord],
    split: &SplitAssignment,
    folds: &[usize],
    ctx: FitContext<'_>,
) -> Result<Vec<FoldResult>> {
    folds
        .iter()
        .map(|&fold| {
            let sets = assemble_fold(train_pool, val_pool, split, fold)?;
            let test = RecordSlice::new(sets.test);
            let out = fit(&RecordSlice::new(sets.train), &RecordSlice::new(sets.val), ctx)?;
            if test.reads() != 0 {
                return Err(Error::invalid("fold", format!("held-out section read {} times during training", test.reads())));
            }
            Ok(FoldResult {
                fold,
                fit: out,
                test_ids: test.ids().into_iter().map(str::to_owned).collect(),
                test_reads: test.reads(),
            })
        })
        .collect()
}
