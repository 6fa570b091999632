//! Classification objectives on the tape.
//!
//! All class losses take `[batch, C]` logits and one target index per row
//! and average over the batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadVars;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    WeightedCe,
    Focal,
    Seesaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Poison BCE weight.
    pub alpha: f64,
    pub gamma: f64,
    /// Seesaw mitigation exponent.
    pub p: f64,
    /// Seesaw compensation exponent.
    pub q: f64,
    /// Weight for taxonomy ranks not listed in `aux_weights`.
    pub aux_weight: f64,
    pub aux_weights: BTreeMap<String, f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Seesaw,
            alpha: 0.1,
            gamma: 2.0,
            p: 0.8,
            q: 2.0,
            aux_weight: 0.1,
            aux_weights: BTreeMap::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be finite and nonnegative, got {v}")))
            }
        };
        check("alpha", self.alpha)?;
        check("gamma", self.gamma)?;
        check("p", self.p)?;
        check("q", self.q)?;
        check("aux_weight", self.aux_weight)?;
        self.aux_weights.values().try_for_each(|&w| check("aux_weights", w))
    }

    pub fn rank_weight(&self, rank: &str) -> f64 {
        self.aux_weights.get(rank).copied().unwrap_or(self.aux_weight)
    }
}

/// Per-class training counts for the seesaw factors.
#[derive(Clone, Debug, PartialEq)]
pub struct SeesawState {
    class_counts: Vec<f64>,
    pub p: f64,
    pub q: f64,
}

impl SeesawState {
    /// Zero counts are floored to one.
    pub fn new(counts: &[usize], p: f64, q: f64) -> Result<Self> {
        if p < 0.0 || q < 0.0 {
            return Err(Error::invalid("seesaw", format!("exponents must be nonnegative, got p={p} q={q}")));
        }
        Ok(Self {
            class_counts: counts.iter().map(|&n| n.max(1) as f64).collect(),
            p,
            q,
        })
    }

    pub fn counts(&self) -> &[f64] {
        &self.class_counts
    }

    /// `log S_tj` for one row of logits, zero on the target.
    pub fn log_factors(&self, logits: &[f64], target: usize) -> Vec<f64> {
        let nt = self.class_counts[target];
        let zt = logits[target];
        logits
            .iter()
            .zip(&self.class_counts)
            .enumerate()
            .map(|(j, (&zj, &nj))| {
                if j == target {
                    return 0.0;
                }
                // sigma_j / sigma_t = exp(z_j - z_t)
                let m = if nj < nt && self.p != 0.0 { self.p * (nj / nt).ln() } else { 0.0 };
                let c = if zj > zt && self.q != 0.0 { self.q * (zj - zt) } else { 0.0 };
                m + c
            })
            .collect()
    }
}

/// Inverse training frequency, normalized to mean one. Zero counts are
/// floored to one.
pub fn inverse_frequency_weights(counts: &[usize]) -> Vec<f64> {
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len().max(1) as f64;
    inv.iter().map(|w| w / mean).collect()
}

fn check_logits(tape: &Tape, logits: Var, targets: &[usize]) -> Result<()> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Shape {
            op: "class loss",
            left: s.to_vec(),
            right: vec![targets.len()],
        });
    }
    if targets.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    Ok(())
}

/// `-sum_i w_{t_i} log softmax(z_i)[t_i] / sum_i w_{t_i}`; plain mean when
/// `class_weights` is `None`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
    check_logits(tape, logits, targets)?;
    let lp = tape.log_softmax_lastdim(logits)?;
    let picked = tape.pick_lastdim(lp, targets)?;
    match class_weights {
        None => {
            let m = tape.reduce_mean(picked)?;
            tape.scale(m, -1.0)
        }
        Some(w) => {
            let c = tape.shape(logits)[1];
            if w.len() != c {
                return Err(Error::Dimension {
                    context: "class weights".into(),
                    expected: c,
                    actual: w.len(),
                });
            }
            let per: Vec<f64> = targets.iter().map(|&t| w[t]).collect();
            let total: f64 = per.iter().sum();
            if !(total > 0.0) {
                return Err(Error::invalid("class_weights", "batch weight sum is not positive"));
            }
            let wv = tape.constant(Tensor::new(vec![per.len()], per)?);
            let weighted = tape.mul(picked, wv)?;
            let s = tape.reduce_sum(weighted)?;
            tape.scale(s, -1.0 / total)
        }
    }
}

/// `-(1 - p_t)^gamma log p_t`, batch mean.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &[usize], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid("gamma", format!("must be nonnegative, got {gamma}")));
    }
    check_logits(tape, logits, targets)?;
    let lp = tape.log_softmax_lastdim(logits)?;
    let picked = tape.pick_lastdim(lp, targets)?;
    let pt = tape.exp(picked)?;
    let neg = tape.scale(pt, -1.0)?;
    let rest = tape.add_scalar(neg, 1.0)?;
    // (1 - p_t)^gamma with a zero derivative where 1 - p_t underflows to 0
    let modulator = tape.elementwise(
        rest,
        |v| v.powf(gamma),
        |v| if v > 0.0 { gamma * v.powf(gamma - 1.0) } else { 0.0 },
    )?;
    let terms = tape.mul(modulator, picked)?;
    let m = tape.reduce_mean(terms)?;
    tape.scale(m, -1.0)
}

/// Cross-entropy on logits shifted by the detached `log S`.
pub fn seesaw_loss(tape: &mut Tape, logits: Var, targets: &[usize], state: &SeesawState) -> Result<Var> {
    check_logits(tape, logits, targets)?;
    let z = tape.value(logits);
    let c = z.last_dim();
    if state.class_counts.len() != c {
        return Err(Error::Dimension {
            context: "seesaw class counts".into(),
            expected: c,
            actual: state.class_counts.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::invalid("targets", format!("index {bad} out of range for {c} classes")));
    }
    let shift: Vec<f64> = targets
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| state.log_factors(z.row(i), t))
        .collect();
    let shift = Tensor::new(z.shape().to_vec(), shift)?;
    seesaw_with_factors(tape, logits, targets, &shift)
}

/// Seesaw loss for given `log S`, e.g. frozen at an earlier point.
pub fn seesaw_with_factors(tape: &mut Tape, logits: Var, targets: &[usize], log_factors: &Tensor) -> Result<Var> {
    if tape.shape(logits) != log_factors.shape() {
        return Err(Error::Shape {
            op: "seesaw factors",
            left: tape.shape(logits).to_vec(),
            right: log_factors.shape().to_vec(),
        });
    }
    let shift = tape.constant(log_factors.clone());
    let adjusted = tape.add(logits, shift)?;
    cross_entropy(tape, adjusted, targets, None)
}

/// Logit-space binary cross-entropy `softplus(x * (1 - 2y))`, batch mean.
pub fn poison_bce(tape: &mut Tape, logit: Var, labels: &[bool]) -> Result<Var> {
    let s = tape.shape(logit);
    if s != [labels.len()] {
        return Err(Error::Shape {
            op: "poison_bce",
            left: s.to_vec(),
            right: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let sign = labels.iter().map(|&y| if y { -1.0 } else { 1.0 }).collect();
    let sign = tape.constant(Tensor::new(vec![labels.len()], sign)?);
    let signed = tape.mul(logit, sign)?;
    let sp = tape.softplus(signed)?;
    tape.reduce_mean(sp)
}

/// Targets for one batch.
#[derive(Clone, Debug, Default)]
pub struct Targets {
    pub class: Vec<usize>,
    pub poison: Vec<bool>,
    /// Rank to label index per row.
    pub taxonomy: BTreeMap<String, Vec<usize>>,
}

/// Everything the composite loss needs besides the batch.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub config: LossConfig,
    pub class_weights: Vec<f64>,
    pub seesaw: SeesawState,
}

impl LossContext {
    pub fn new(config: LossConfig, train_counts: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            class_weights: inverse_frequency_weights(train_counts),
            seesaw: SeesawState::new(train_counts, config.p, config.q)?,
            config,
        })
    }

    pub fn primary(&self, tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
        match self.config.kind {
            LossKind::Ce => cross_entropy(tape, logits, targets, None),
            LossKind::WeightedCe => cross_entropy(tape, logits, targets, Some(&self.class_weights)),
            LossKind::Focal => focal_loss(tape, logits, targets, self.config.gamma),
            LossKind::Seesaw => seesaw_loss(tape, logits, targets, &self.seesaw),
        }
    }
}

/// `primary + alpha * poison_bce + sum_r beta_r * CE_r`. Terms with zero
/// weight are left off the tape.
pub fn composite_loss(tape: &mut Tape, out: &HeadVars, targets: &Targets, ctx: &LossContext) -> Result<Var> {
    let mut total = ctx.primary(tape, out.class_logits, &targets.class)?;
    let alpha = ctx.config.alpha;
    if alpha > 0.0 {
        let z = out
            .poison_logit
            .ok_or_else(|| Error::invalid("alpha", format!("alpha = {alpha} requires the poison head")))?;
        let bce = poison_bce(tape, z, &targets.poison)?;
        let term = tape.scale(bce, alpha)?;
        total = tape.add(total, term)?;
    }
    for (rank, logits) in &out.taxonomy_logits {
        let beta = ctx.config.rank_weight(rank);
        if beta == 0.0 {
            continue;
        }
        let labels = targets
            .taxonomy
            .get(rank)
            .ok_or_else(|| Error::invalid("targets", format!("no labels for taxonomy rank `{rank}`")))?;
        let ce = cross_entropy(tape, *logits, labels, None)?;
        let term = tape.scale(ce, beta)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}
