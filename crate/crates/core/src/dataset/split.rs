//! Stratified three-way split of the validation pool and two-fold assembly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ObservationRecord;
use crate::error::{Error, Result};
use crate::rng;

pub const SECTIONS: usize = 3;

/// Roles of the three sections within one fold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldLayout {
    pub train_extension: u8,
    pub validation: u8,
    pub test: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub section_of: BTreeMap<String, u8>,
    pub fold_layout: Vec<FoldLayout>,
}

impl SplitAssignment {
    pub fn section_sizes(&self) -> [usize; SECTIONS] {
        let mut sizes = [0; SECTIONS];
        for &s in self.section_of.values() {
            sizes[s as usize] += 1;
        }
        sizes
    }
}

/// Two folds share the held-out section 2 and swap sections 0 and 1
/// between training extension and validation.
pub fn default_fold_layout() -> Vec<FoldLayout> {
    vec![
        FoldLayout {
            train_extension: 0,
            validation: 1,
            test: 2,
        },
        FoldLayout {
            train_extension: 1,
            validation: 0,
            test: 2,
        },
    ]
}

/// Splits the pool into three sections, stratified by species.
///
/// Within each species the records are sorted by id, shuffled with a stream
/// keyed by the species name, and dealt round-robin starting at a section
/// picked by a seeded hash of the name so that remainders spread evenly.
pub fn stratified_three_way_split(records: &[ObservationRecord], seed: u64) -> Result<SplitAssignment> {
    if records.is_empty() {
        return Err(Error::Empty("validation pool"));
    }
    let mut by_species: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        by_species.entry(r.species.as_str()).or_default().push(r.observation_id.as_str());
    }
    let mut section_of = BTreeMap::new();
    for (species, mut ids) in by_species {
        ids.sort_unstable();
        let key = rng::fnv1a64(species.as_bytes());
        ids.shuffle(&mut rng::substream(seed, rng::SPLIT, key));
        let start = (rng::stream_seed(seed ^ key, rng::SPLIT) % SECTIONS as u64) as usize;
        for (i, id) in ids.into_iter().enumerate() {
            let section = ((start + i) % SECTIONS) as u8;
            if section_of.insert(id.to_owned(), section).is_some() {
                return Err(Error::invalid("observation_id", format!("duplicate id `{id}` in validation pool")));
            }
        }
    }
    Ok(SplitAssignment {
        seed,
        section_of,
        fold_layout: default_fold_layout(),
    })
}

/// Records of one fold, borrowed from the two pools.
#[derive(Clone, Debug)]
pub struct FoldSets<'a> {
    pub train: Vec<&'a ObservationRecord>,
    pub val: Vec<&'a ObservationRecord>,
    pub test: Vec<&'a ObservationRecord>,
}

/// Training set = full training pool + the fold's extension section; the
/// validation and held-out sections come from the validation pool.
pub fn assemble_fold<'a>(
    train: &'a [ObservationRecord],
    val: &'a [ObservationRecord],
    split: &SplitAssignment,
    fold: usize,
) -> Result<FoldSets<'a>> {
    let layout = split
        .fold_layout
        .get(fold)
        .ok_or_else(|| Error::invalid("fold", format!("fold {fold} not in 0..{}", split.fold_layout.len())))?;
    let mut sets = FoldSets {
        train: train.iter().collect(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in val {
        let section = *split.section_of.get(&r.observation_id).ok_or_else(|| Error::Join {
            id: r.observation_id.clone(),
            missing: "split section",
        })?;
        if section == layout.train_extension {
            sets.train.push(r);
        } else if section == layout.validation {
            sets.val.push(r);
        } else if section == layout.test {
            sets.test.push(r);
        }
    }
    Ok(sets)
}
