//! Desk-scale synthetic stand-in for the training and validation pools.
//!
//! Class `c` receives a share of the pool proportional to `(c + 1)^-a`.
//! Embeddings are drawn from isotropic unit-variance Gaussians whose means
//! sit at distance `separation * sqrt(2)` from the origin along mutually
//! orthogonal directions, so every pairwise decision boundary lies
//! `separation` standard deviations from each of the two means.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Metadata, ObservationRecord};
use crate::error::{Error, Result};
use crate::rng;

const SUBSTRATES: [&str; 5] = ["bark", "leaf litter", "moss", "soil", "wood"];
const METASUBSTRATES: [&str; 3] = ["other", "soil", "wood"];
const HABITATS: [&str; 4] = ["bog", "deciduous forest", "meadow", "park"];
const MISSING_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub n_classes: usize,
    pub dim: usize,
    /// Total over both pools.
    pub n_samples: usize,
    pub imbalance_exponent: f64,
    pub poison_fraction: f64,
    pub seed: u64,
    /// Margin between class means, in noise standard deviations.
    pub separation: f64,
    pub val_fraction: f64,
    /// Extra species that only occur in the validation pool.
    pub unknown_species: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_classes: 10,
            dim: 64,
            n_samples: 5000,
            imbalance_exponent: 1.0,
            poison_fraction: 0.3,
            seed: 0,
            separation: 4.0,
            val_fraction: 0.3,
            unknown_species: 0,
        }
    }
}

/// Splits `total` among classes proportionally to `(c + 1)^-exponent`, at
/// least one each, by largest remainder (ties to the lower index).
pub fn power_law_counts(total: usize, n_classes: usize, exponent: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..n_classes).map(|c| ((c + 1) as f64).powf(-exponent)).collect();
    let wsum: f64 = weights.iter().sum();
    let floor = usize::from(total >= n_classes);
    let rest = total - floor * n_classes;
    let quotas: Vec<f64> = weights.iter().map(|w| rest as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a].fract(), quotas[b].fract());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = rest - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts.iter().map(|c| c + floor).collect()
}

fn class_means(n: usize, dim: usize, radius: f64, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n);
    while means.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if dim >= n {
            for m in &means {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() / (radius * radius);
                v.iter_mut().zip(m).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        means.push(v.iter().map(|x| x * radius / norm).collect());
    }
    means
}

fn pick(rng: &mut rng::Rng, vocab: &[&str]) -> Option<String> {
    if rng.random::<f64>() < MISSING_RATE {
        None
    } else {
        Some(vocab[rng.random_range(0..vocab.len())].to_owned())
    }
}

fn maybe<T>(rng: &mut rng::Rng, f: impl FnOnce(&mut rng::Rng) -> T) -> Option<T> {
    if rng.random::<f64>() < MISSING_RATE {
        None
    } else {
        Some(f(rng))
    }
}

fn species_name(c: usize) -> String {
    format!("species_{c:03}")
}

/// Generates `(train_pool, val_pool)`.
pub fn make_synthetic(p: &SynthParams) -> Result<(Vec<ObservationRecord>, Vec<ObservationRecord>)> {
    if p.n_classes < 2 {
        return Err(Error::invalid("n_classes", format!("need at least 2, got {}", p.n_classes)));
    }
    if p.dim < 2 {
        return Err(Error::invalid("dim", format!("need at least 2, got {}", p.dim)));
    }
    if !(0.0..1.0).contains(&p.val_fraction) || !(0.0..=1.0).contains(&p.poison_fraction) {
        return Err(Error::invalid("fraction", "val_fraction must lie in [0, 1) and poison_fraction in [0, 1]"));
    }
    let n_val = (p.n_samples as f64 * p.val_fraction).round() as usize;
    let n_train = p.n_samples - n_val;
    if p.n_samples < p.n_classes || n_train < p.n_classes {
        return Err(Error::invalid(
            "n_samples",
            format!("{} samples cannot cover {} classes", p.n_samples, p.n_classes),
        ));
    }
    let mut rng = rng::stream(p.seed, rng::SYNTH);
    let n_species = p.n_classes + p.unknown_species;
    let means = class_means(n_species, p.dim, p.separation * std::f64::consts::SQRT_2, &mut rng);

    let mut order: Vec<usize> = (0..n_species).collect();
    order.shuffle(&mut rng);
    let n_poison = (p.poison_fraction * n_species as f64).round() as usize;
    let mut poisonous = vec![false; n_species];
    for &c in &order[..n_poison] {
        poisonous[c] = true;
    }

    let make_pool = |prefix: char, counts: &[usize], rng: &mut rng::Rng| -> Vec<ObservationRecord> {
        let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let embedding = means[c].iter().map(|m| (m + rng.sample::<f64, _>(StandardNormal)) as f32).collect();
                let metadata = Metadata {
                    substrate: pick(rng, &SUBSTRATES),
                    metasubstrate: pick(rng, &METASUBSTRATES),
                    habitat: pick(rng, &HABITATS),
                    month: maybe(rng, |r| r.random_range(1..=12)),
                    day: maybe(rng, |r| r.random_range(1..=31)),
                    latitude: maybe(rng, |r| (r.random_range(54.5..57.8f64) * 1e5).round() / 1e5),
                    longitude: maybe(rng, |r| (r.random_range(8.0..13.0f64) * 1e5).round() / 1e5),
                };
                let mut taxonomy = BTreeMap::new();
                taxonomy.insert("phylum".to_owned(), "Basidiomycota".to_owned());
                taxonomy.insert("family".to_owned(), format!("family_{:02}", c / 4));
                taxonomy.insert("genus".to_owned(), format!("genus_{:02}", c / 2));
                ObservationRecord {
                    observation_id: format!("{prefix}{i:06}"),
                    embedding,
                    species: species_name(c),
                    poisonous: poisonous[c],
                    metadata,
                    taxonomy,
                }
            })
            .collect()
    };

    let mut train_counts = power_law_counts(n_train, p.n_classes, p.imbalance_exponent);
    train_counts.resize(n_species, 0);
    let val_counts = power_law_counts(n_val, n_species, p.imbalance_exponent);
    let train = make_pool('t', &train_counts, &mut rng);
    let val = make_pool('v', &val_counts, &mut rng);
    Ok((train, val))
}
