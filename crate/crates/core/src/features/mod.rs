//! Fixed-width numeric encoding of observation metadata.
//!
//! A [`MetadataSchema`] is fitted once on training records and then applied
//! unchanged at validation and inference time. The encoded vector is the
//! concatenation of its blocks in declaration order:
//!
//! | block      | width          | contents                                   |
//! |------------|----------------|--------------------------------------------|
//! | one-hot    | vocabulary + 1 | indicator per value, last slot = missing   |
//! | cyclical   | 3              | `sin`, `cos` of the phase, presence bit    |
//! | geohash    | 5              | normalized prefix levels 2-5, presence bit |

pub mod geohash;

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::dataset::ObservationRecord;

pub use geohash::{geohash_encode, geohash_levels_normalize};

pub const SCHEMA_VERSION: u32 = 1;
pub const MONTH_PERIOD: u32 = 12;
pub const DAY_PERIOD: u32 = 31;
pub const GEOHASH_PRECISION: usize = 5;

pub const CATEGORICAL_COLUMNS: [&str; 3] = ["substrate", "metasubstrate", "habitat"];

/// One-hot vector over `vocabulary` plus a trailing missing slot. Values not
/// in the vocabulary land in the missing slot.
pub fn onehot_encode(value: Option<&str>, vocabulary: &[String]) -> Vec<f64> {
    let mut out = vec![0.0; vocabulary.len() + 1];
    let slot = value
        .and_then(|v| vocabulary.binary_search_by(|w| w.as_str().cmp(v)).ok())
        .unwrap_or(vocabulary.len());
    out[slot] = 1.0;
    out
}

/// `(sin(2πv/p), cos(2πv/p))`; `v` and `v + p` encode identically.
pub fn cyclical_encode(value: i64, period: u32) -> (f64, f64) {
    let phase = value.rem_euclid(i64::from(period)) as f64 / f64::from(period);
    let angle = TAU * phase;
    (angle.sin(), angle.cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureBlock {
    OneHot { column: String, vocabulary: Vec<String> },
    Cyclical { column: String, period: u32 },
    Geohash { precision: usize },
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        match self {
            FeatureBlock::OneHot { vocabulary, .. } => vocabulary.len() + 1,
            FeatureBlock::Cyclical { .. } => 3,
            FeatureBlock::Geohash { .. } => 5,
        }
    }
}

/// Which metadata encoders are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub enable_metadata: bool,
    pub cyclical: bool,
    pub geohash: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            enable_metadata: true,
            cyclical: true,
            geohash: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataSchema {
    pub version: u32,
    pub blocks: Vec<FeatureBlock>,
    pub width: usize,
}

/// Encoded metadata of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFeatures {
    pub values: Vec<f64>,
}

impl MetadataSchema {
    /// Builds vocabularies from the categorical values seen in `records`.
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a ObservationRecord>, options: FeatureOptions) -> Self {
        if !options.enable_metadata {
            return Self::from_blocks(Vec::new());
        }
        let mut vocab: Vec<BTreeSet<String>> = vec![BTreeSet::new(); CATEGORICAL_COLUMNS.len()];
        for r in records {
            for (set, column) in vocab.iter_mut().zip(CATEGORICAL_COLUMNS) {
                if let Some(v) = r.metadata.categorical(column) {
                    set.insert(v.to_owned());
                }
            }
        }
        let mut blocks: Vec<FeatureBlock> = CATEGORICAL_COLUMNS
            .iter()
            .zip(vocab)
            .map(|(c, v)| FeatureBlock::OneHot {
                column: (*c).to_owned(),
                vocabulary: v.into_iter().collect(),
            })
            .collect();
        if options.cyclical {
            blocks.push(FeatureBlock::Cyclical {
                column: "month".into(),
                period: MONTH_PERIOD,
            });
            blocks.push(FeatureBlock::Cyclical {
                column: "day".into(),
                period: DAY_PERIOD,
            });
        }
        if options.geohash {
            blocks.push(FeatureBlock::Geohash {
                precision: GEOHASH_PRECISION,
            });
        }
        Self::from_blocks(blocks)
    }

    pub fn from_blocks(blocks: Vec<FeatureBlock>) -> Self {
        let width = blocks.iter().map(FeatureBlock::width).sum();
        Self {
            version: SCHEMA_VERSION,
            blocks,
            width,
        }
    }

    pub fn encode(&self, record: &ObservationRecord) -> EncodedFeatures {
        let mut values = vec![0.0; self.width];
        self.encode_into(record, &mut values);
        EncodedFeatures { values }
    }

    /// Writes the encoding of `record` into `out`, which must be `width` long.
    pub fn encode_into(&self, record: &ObservationRecord, out: &mut [f64]) {
        assert_eq!(out.len(), self.width, "output slice does not match schema width");
        let meta = &record.metadata;
        let mut offset = 0;
        for block in &self.blocks {
            let slot = &mut out[offset..offset + block.width()];
            slot.fill(0.0);
            match block {
                FeatureBlock::OneHot { column, vocabulary } => {
                    slot.copy_from_slice(&onehot_encode(meta.categorical(column), vocabulary));
                }
                FeatureBlock::Cyclical { column, period } => {
                    let value = match column.as_str() {
                        "month" => meta.month,
                        "day" => meta.day,
                        _ => None,
                    };
                    if let Some(v) = value {
                        let (s, c) = cyclical_encode(i64::from(v), *period);
                        slot.copy_from_slice(&[s, c, 1.0]);
                    }
                }
                FeatureBlock::Geohash { precision } => {
                    let levels = match (meta.latitude, meta.longitude) {
                        (Some(lat), Some(lon)) => geohash_encode(lat, lon, *precision)
                            .and_then(|code| geohash_levels_normalize(&code))
                            .ok(),
                        _ => None,
                    };
                    if let Some(levels) = levels {
                        slot[..4].copy_from_slice(&levels);
                        slot[4] = 1.0;
                    }
                }
            }
            offset += block.width();
        }
    }
}
