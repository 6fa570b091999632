//! Top-k accuracy, macro-F1, poisonous/edible confusion and track scores.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassCatalog, ObservationRecord};
use crate::error::{Error, Result};
use crate::features::MetadataSchema;
use crate::inference::predict_records;
use crate::model::{checkpoint::ensure_compatible, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostMatrix {
    pub cost_poisonous_as_edible: f64,
    pub cost_edible_as_poisonous: f64,
}

impl Default for CostMatrix {
    fn default() -> Self {
        Self {
            cost_poisonous_as_edible: 100.0,
            cost_edible_as_poisonous: 5.0,
        }
    }
}

impl CostMatrix {
    pub fn validate(&self) -> Result<()> {
        for v in [self.cost_poisonous_as_edible, self.cost_edible_as_poisonous] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid("costs", format!("must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn argmax(row: &[f64]) -> usize {
    top_k(row, 1)[0]
}

fn check_aligned(pred: usize, truth: usize) -> Result<()> {
    if pred != truth {
        return Err(Error::Dimension {
            context: "predictions vs truth".into(),
            expected: truth,
            actual: pred,
        });
    }
    if truth == 0 {
        return Err(Error::Empty("truth labels"));
    }
    Ok(())
}

pub fn topk_accuracy(logits: &Tensor, truth: &[usize], k: usize) -> Result<f64> {
    let c = logits.last_dim();
    if k == 0 || k > c {
        return Err(Error::invalid("k", format!("{k} outside 1..={c}")));
    }
    check_aligned(logits.rows(), truth.len())?;
    let hits = truth
        .iter()
        .enumerate()
        .filter(|&(i, t)| top_k(logits.row(i), k).contains(t))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class scores for every class with support in `truth`, ascending.
pub fn per_class_report(pred: &[usize], truth: &[usize]) -> Result<Vec<ClassReport>> {
    check_aligned(pred.len(), truth.len())?;
    let n = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let (mut tp, mut predicted, mut support) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    for (&p, &t) in pred.iter().zip(truth) {
        predicted[p] += 1;
        support[t] += 1;
        if p == t {
            tp[t] += 1;
        }
    }
    Ok((0..n)
        .filter(|&c| support[c] > 0)
        .map(|c| {
            let precision = if predicted[c] > 0 { tp[c] as f64 / predicted[c] as f64 } else { 0.0 };
            let recall = tp[c] as f64 / support[c] as f64;
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassReport {
                class: c,
                support: support[c],
                precision,
                recall,
                f1,
            }
        })
        .collect())
}

/// Unweighted mean F1 over classes that occur in `truth`.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let rows = per_class_report(pred, truth)?;
    Ok(rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfusion {
    pub poisonous_as_edible: usize,
    pub edible_as_poisonous: usize,
    pub n_poisonous: usize,
    pub n_edible: usize,
}

impl PoisonConfusion {
    /// `None` when there are no poisonous truths.
    pub fn psc_rate(&self) -> Option<f64> {
        (self.n_poisonous > 0).then(|| self.poisonous_as_edible as f64 / self.n_poisonous as f64)
    }

    /// `None` when there are no edible truths.
    pub fn esc_rate(&self) -> Option<f64> {
        (self.n_edible > 0).then(|| self.edible_as_poisonous as f64 / self.n_edible as f64)
    }

    pub fn n(&self) -> usize {
        self.n_poisonous + self.n_edible
    }

    /// Share of samples whose predicted species has the true poison flag.
    pub fn agreement(&self) -> f64 {
        1.0 - (self.poisonous_as_edible + self.edible_as_poisonous) as f64 / self.n() as f64
    }
}

pub fn poison_confusion(pred: &[usize], truth: &[usize], poison_map: &[bool]) -> Result<PoisonConfusion> {
    check_aligned(pred.len(), truth.len())?;
    let flag = |c: usize| {
        poison_map
            .get(c)
            .copied()
            .ok_or_else(|| Error::invalid("poison_map", format!("class {c} not covered ({} entries)", poison_map.len())))
    };
    let mut out = PoisonConfusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (flag(t)?, flag(p)?) {
            (true, false) => {
                out.n_poisonous += 1;
                out.poisonous_as_edible += 1;
            }
            (true, true) => out.n_poisonous += 1,
            (false, true) => {
                out.n_edible += 1;
                out.edible_as_poisonous += 1;
            }
            (false, false) => out.n_edible += 1,
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackScores {
    pub track1: f64,
    pub track2: f64,
    pub track3: f64,
    pub accuracy: f64,
    pub top3_accuracy: Option<f64>,
    pub macro_f1: f64,
    /// Zero when undefined; see `psc_defined`.
    pub psc_rate: f64,
    pub esc_rate: f64,
    pub psc_defined: bool,
    pub esc_defined: bool,
    pub n_samples: usize,
}

/// `track1 = 1 - accuracy`, `track2 = (c_pe * #P->E + c_ep * #E->P) / N`,
/// `track3 = track1 + track2`.
pub fn track_scores(pred: &[usize], truth: &[usize], poison_map: &[bool], costs: &CostMatrix) -> Result<TrackScores> {
    costs.validate()?;
    let conf = poison_confusion(pred, truth, poison_map)?;
    let n = truth.len();
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / n as f64;
    let track1 = 1.0 - accuracy;
    let track2 = (costs.cost_poisonous_as_edible * conf.poisonous_as_edible as f64
        + costs.cost_edible_as_poisonous * conf.edible_as_poisonous as f64)
        / n as f64;
    Ok(TrackScores {
        track1,
        track2,
        track3: track1 + track2,
        accuracy,
        top3_accuracy: None,
        macro_f1: macro_f1(pred, truth)?,
        psc_rate: conf.psc_rate().unwrap_or(0.0),
        esc_rate: conf.esc_rate().unwrap_or(0.0),
        psc_defined: conf.psc_rate().is_some(),
        esc_defined: conf.esc_rate().is_some(),
        n_samples: n,
    })
}

/// Scores and per-class rows from `[N, C]` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: TrackScores,
    pub poison: PoisonConfusion,
    pub per_class: Vec<ClassReport>,
    pub predictions: Vec<usize>,
}

pub fn evaluate_logits(logits: &Tensor, truth: &[usize], poison_map: &[bool], costs: &CostMatrix) -> Result<Evaluation> {
    check_aligned(logits.rows(), truth.len())?;
    let predictions: Vec<usize> = (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
    let mut scores = track_scores(&predictions, truth, poison_map, costs)?;
    scores.top3_accuracy = Some(topk_accuracy(logits, truth, logits.last_dim().min(3))?);
    Ok(Evaluation {
        scores,
        poison: poison_confusion(&predictions, truth, poison_map)?,
        per_class: per_class_report(&predictions, truth)?,
        predictions,
    })
}

/// Logit-averaged inference of `models` over `records`, scored against the
/// catalog's class indices and poison flags.
pub fn evaluate_run(
    models: &[Model],
    records: &[&ObservationRecord],
    catalog: &ClassCatalog,
    schema: Option<&MetadataSchema>,
    costs: &CostMatrix,
    batch_size: usize,
) -> Result<Evaluation> {
    let first = models.first().ok_or(Error::Empty("checkpoint list"))?;
    for m in &models[1..] {
        ensure_compatible(&first.config, &m.config)?;
    }
    if first.config.n_classes() != catalog.n_classes() {
        return Err(Error::Incompatible {
            field: "n_classes".into(),
            expected: catalog.n_classes().to_string(),
            found: first.config.n_classes().to_string(),
        });
    }
    let out = predict_records(models, records, schema, batch_size)?;
    let truth: Vec<usize> = records.iter().map(|r| catalog.class_of(&r.species)).collect();
    evaluate_logits(&out.class_logits, &truth, &catalog.poison_map, costs)
}

/// Machine-readable evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub track1: f64,
    pub track2: f64,
    pub track3: f64,
    pub accuracy: f64,
    pub top3: f64,
    pub macro_f1: f64,
    pub psc_rate: f64,
    pub esc_rate: f64,
    pub costs: CostMatrix,
    pub n_samples: usize,
}

impl Report {
    pub fn new(scores: &TrackScores, costs: &CostMatrix) -> Self {
        Self {
            track1: scores.track1,
            track2: scores.track2,
            track3: scores.track3,
            accuracy: scores.accuracy,
            top3: scores.top3_accuracy.unwrap_or(f64::NAN),
            macro_f1: scores.macro_f1,
            psc_rate: scores.psc_rate,
            esc_rate: scores.esc_rate,
            costs: *costs,
            n_samples: scores.n_samples,
        }
    }
}

/// `class,support,precision,recall,f1` with class names when given.
pub fn write_per_class_csv<W: Write>(out: W, rows: &[ClassReport], names: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "support", "precision", "recall", "f1"])?;
    for r in rows {
        let class = names.and_then(|n| n.get(r.class)).cloned().unwrap_or_else(|| r.class.to_string());
        w.write_record([
            class,
            r.support.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("per-class report", e))
}
