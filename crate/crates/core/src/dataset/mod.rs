//! Observation records, the class catalog, splits and folds.

pub mod io;
pub mod split;
pub mod synth;

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, read_embeddings, read_metadata, write_embeddings, write_metadata, Dataset, DatasetManifest, PoolEntry};
pub use split::{assemble_fold, stratified_three_way_split, FoldLayout, FoldSets, SplitAssignment};
pub use synth::{make_synthetic, SynthParams};

/// Label of the reserved class for species never seen in training.
pub const UNKNOWN_SPECIES: &str = "unknown";

pub const TAXONOMY_RANKS: [&str; 5] = ["phylum", "class", "order", "family", "genus"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub substrate: Option<String>,
    pub metasubstrate: Option<String>,
    pub habitat: Option<String>,
    pub month: Option<u8>,
    pub day: Option<u8>,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
}

impl Metadata {
    pub fn categorical(&self, column: &str) -> Option<&str> {
        match column {
            "substrate" => self.substrate.as_deref(),
            "metasubstrate" => self.metasubstrate.as_deref(),
            "habitat" => self.habitat.as_deref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRecord {
    pub observation_id: String,
    pub embedding: Vec<f32>,
    pub species: String,
    pub poisonous: bool,
    pub metadata: Metadata,
    /// rank name (one of [`TAXONOMY_RANKS`]) to label
    pub taxonomy: BTreeMap<String, String>,
}

impl ObservationRecord {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.embedding.len() != dim {
            return Err(Error::Dimension {
                context: format!("embedding of `{}`", self.observation_id),
                expected: dim,
                actual: self.embedding.len(),
            });
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding of `{}`", self.observation_id),
            });
        }
        let m = &self.metadata;
        let bad = |arg, ok: bool, value: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(arg, format!("record `{}`: {value} out of range", self.observation_id)))
            }
        };
        if let Some(v) = m.month {
            bad("month", (1..=12).contains(&v), v.to_string())?;
        }
        if let Some(v) = m.day {
            bad("day", (1..=31).contains(&v), v.to_string())?;
        }
        if let Some(v) = m.latitude {
            bad("latitude", (-90.0..=90.0).contains(&v), v.to_string())?;
        }
        if let Some(v) = m.longitude {
            bad("longitude", (-180.0..=180.0).contains(&v), v.to_string())?;
        }
        Ok(())
    }
}

/// Per-rank label vocabulary and the label of each class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyMap {
    /// Sorted labels; the last entry is the reserved unknown label.
    pub labels: Vec<String>,
    pub label_of_class: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub species_names: Vec<String>,
    pub index_of: BTreeMap<String, usize>,
    pub unknown_index: usize,
    pub poison_map: Vec<bool>,
    pub taxonomy_maps: BTreeMap<String, TaxonomyMap>,
    pub train_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub train_freq: Vec<f64>,
    pub target_freq: Vec<f64>,
}

impl ClassCatalog {
    pub fn n_classes(&self) -> usize {
        self.species_names.len()
    }

    /// Index of `species`; anything unseen in training maps to the unknown class.
    pub fn class_of(&self, species: &str) -> usize {
        self.index_of.get(species).copied().unwrap_or(self.unknown_index)
    }

    pub fn counts<'a>(&self, records: impl IntoIterator<Item = &'a ObservationRecord>) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for r in records {
            counts[self.class_of(&r.species)] += 1;
        }
        counts
    }

    /// Label index of `record` at `rank`, with missing and unseen labels
    /// mapped to that rank's unknown label.
    pub fn taxonomy_label(&self, rank: &str, record: &ObservationRecord) -> Option<usize> {
        let map = self.taxonomy_maps.get(rank)?;
        let unknown = map.labels.len() - 1;
        let class = self.class_of(&record.species);
        if class == self.unknown_index {
            return Some(unknown);
        }
        Some(map.label_of_class[class])
    }
}

/// Normalizes counts into a probability vector; all-zero counts give zeros.
pub fn frequencies(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Indexes every training species (sorted by name) and reserves the last
/// index for the unknown class. Validation-only species relabel to unknown.
pub fn build_class_catalog(train: &[ObservationRecord], val: &[ObservationRecord]) -> Result<ClassCatalog> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(r) = train.iter().chain(val).find(|r| r.species.is_empty()) {
        return Err(Error::invalid("species", format!("record `{}` has an empty species", r.observation_id)));
    }
    let mut names: Vec<String> = train
        .iter()
        .map(|r| r.species.clone())
        .filter(|s| s != UNKNOWN_SPECIES)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let unknown_index = names.len();
    let index_of: BTreeMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    names.push(UNKNOWN_SPECIES.to_owned());
    let n = names.len();

    let mut poison_map = vec![false; n];
    for r in train {
        if let Some(&i) = index_of.get(&r.species) {
            poison_map[i] |= r.poisonous;
        }
    }

    let mut taxonomy_maps = BTreeMap::new();
    for rank in TAXONOMY_RANKS {
        let mut per_class: Vec<BTreeMap<&str, usize>> = vec![BTreeMap::new(); n];
        let mut any = false;
        for r in train {
            if let (Some(&i), Some(label)) = (index_of.get(&r.species), r.taxonomy.get(rank)) {
                *per_class[i].entry(label.as_str()).or_default() += 1;
                any = true;
            }
        }
        if !any {
            continue;
        }
        let mut labels: Vec<String> = per_class
            .iter()
            .flat_map(|m| m.keys().map(|s| s.to_string()))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .filter(|s| s != UNKNOWN_SPECIES)
            .collect();
        labels.push(UNKNOWN_SPECIES.to_owned());
        let unknown_label = labels.len() - 1;
        let label_of_class = per_class
            .iter()
            .map(|m| {
                // most frequent label, ties to the lexicographically smallest
                m.iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .and_then(|(l, _)| labels.binary_search_by(|x| x.as_str().cmp(l)).ok())
                    .unwrap_or(unknown_label)
            })
            .collect();
        taxonomy_maps.insert(rank.to_owned(), TaxonomyMap { labels, label_of_class });
    }

    let mut catalog = ClassCatalog {
        species_names: names,
        index_of,
        unknown_index,
        poison_map,
        taxonomy_maps,
        train_counts: Vec::new(),
        target_counts: Vec::new(),
        train_freq: Vec::new(),
        target_freq: Vec::new(),
    };
    catalog.train_counts = catalog.counts(train);
    catalog.target_counts = catalog.counts(val);
    catalog.train_freq = frequencies(&catalog.train_counts);
    catalog.target_freq = frequencies(&catalog.target_counts);
    Ok(catalog)
}

/// Rewrites every species unknown to `catalog` to [`UNKNOWN_SPECIES`].
pub fn relabel_unknown(records: &mut [ObservationRecord], catalog: &ClassCatalog) {
    for r in records {
        if !catalog.index_of.contains_key(&r.species) {
            r.species = UNKNOWN_SPECIES.to_owned();
        }
    }
}

/// A borrowed view of records that counts how many times records are read.
#[derive(Debug)]
pub struct RecordSlice<'a> {
    records: Vec<&'a ObservationRecord>,
    reads: Cell<usize>,
}

impl<'a> RecordSlice<'a> {
    pub fn new(records: Vec<&'a ObservationRecord>) -> Self {
        Self {
            records,
            reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, i: usize) -> &'a ObservationRecord {
        self.reads.set(self.reads.get() + 1);
        self.records[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a ObservationRecord> + '_ {
        (0..self.records.len()).map(|i| self.get(i))
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    /// Observation ids without touching the read counter.
    pub fn ids(&self) -> Vec<&'a str> {
        self.records.iter().map(|r| r.observation_id.as_str()).collect()
    }
}
