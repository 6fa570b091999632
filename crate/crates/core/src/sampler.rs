//! Distribution-matching weighted sampling.
//!
//! Class `c` gets weight `target_c / train_c`, so drawing training samples
//! in proportion to their class weight reproduces the target class
//! distribution in expectation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub enabled: bool,
    /// Weight of target-absent classes as a fraction of the smallest
    /// positive weight.
    pub floor_eps: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            floor_eps: 0.01,
        }
    }
}

/// Per-class weights. Classes absent from training get 0, classes absent
/// from the target get `floor_eps` times the smallest positive weight.
pub fn compute_sampling_weights(train_freq: &[f64], target_freq: &[f64], floor_eps: f64) -> Result<Vec<f64>> {
    if train_freq.len() != target_freq.len() {
        return Err(Error::Dimension {
            context: "target frequencies".into(),
            expected: train_freq.len(),
            actual: target_freq.len(),
        });
    }
    if !(floor_eps.is_finite() && floor_eps >= 0.0) {
        return Err(Error::invalid("floor_eps", format!("must be finite and nonnegative, got {floor_eps}")));
    }
    if let Some(v) = train_freq.iter().chain(target_freq).find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid("frequencies", format!("must be finite and nonnegative, got {v}")));
    }
    let mut w: Vec<f64> = train_freq
        .iter()
        .zip(target_freq)
        .map(|(&tr, &tg)| if tr > 0.0 { tg / tr } else { 0.0 })
        .collect();
    let min_pos = w.iter().copied().filter(|&v| v > 0.0).min_by(f64::total_cmp);
    let Some(min_pos) = min_pos else {
        return Err(Error::invalid("target_freq", "no training class has target mass"));
    };
    for (wc, &tr) in w.iter_mut().zip(train_freq) {
        if tr > 0.0 && *wc == 0.0 {
            *wc = floor_eps * min_pos;
        }
    }
    Ok(w)
}

/// Vose alias table over unnormalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        if n == 0 || !(total > 0.0 && total.is_finite()) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("weights", "need finite nonnegative weights with positive sum"));
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![1.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers hold 1 up to rounding
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Ok(Self { prob, alias })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }

    /// Exact draw probability of every index, read off the table.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.prob.len() as f64;
        let mut p: Vec<f64> = self.prob.iter().map(|q| q / n).collect();
        for (i, &a) in self.alias.iter().enumerate() {
            p[a] += (1.0 - self.prob[i]) / n;
        }
        p
    }
}

/// Sample-level sampler over one training set.
#[derive(Clone, Debug)]
pub struct SamplerWeights {
    pub class_weights: Vec<f64>,
    table: AliasTable,
}

impl SamplerWeights {
    /// `sample_classes[i]` is the class of training sample `i`.
    pub fn new(class_weights: Vec<f64>, sample_classes: &[usize]) -> Result<Self> {
        let per_sample: Vec<f64> = sample_classes
            .iter()
            .map(|&c| {
                class_weights
                    .get(c)
                    .copied()
                    .ok_or_else(|| Error::invalid("sample_classes", format!("class {c} has no weight")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            class_weights,
            table: AliasTable::new(&per_sample)?,
        })
    }

    /// All samples equally likely.
    pub fn uniform(n: usize) -> Result<Self> {
        Ok(Self {
            class_weights: vec![1.0],
            table: AliasTable::new(&vec![1.0; n])?,
        })
    }

    pub fn table(&self) -> &AliasTable {
        &self.table
    }

    /// Draws `n_draws` sample indices with replacement.
    pub fn draw_epoch_indices(&self, n_draws: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n_draws).map(|_| self.table.sample(rng)).collect()
    }
}
