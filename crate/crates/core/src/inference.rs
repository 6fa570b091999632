//! Batch assembly and (ensembled) eval-mode inference over records.

use crate::dataset::ObservationRecord;
use crate::error::{Error, Result};
use crate::features::MetadataSchema;
use crate::model::{average_logits, HeadOutput, Model};
use crate::tensor::Tensor;

/// Dense inputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInputs {
    /// `[B, D]`
    pub embeddings: Tensor,
    /// `[B, W]`, absent when no schema is used.
    pub metadata: Option<Tensor>,
}

pub fn batch_inputs(records: &[&ObservationRecord], dim: usize, schema: Option<&MetadataSchema>) -> Result<BatchInputs> {
    let b = records.len();
    let mut emb = Vec::with_capacity(b * dim);
    for r in records {
        if r.embedding.len() != dim {
            return Err(Error::Dimension {
                context: format!("embedding of `{}`", r.observation_id),
                expected: dim,
                actual: r.embedding.len(),
            });
        }
        emb.extend(r.embedding.iter().map(|&v| f64::from(v)));
    }
    let metadata = match schema {
        Some(s) if s.width > 0 => {
            let mut meta = vec![0.0; b * s.width];
            for (r, row) in records.iter().zip(meta.chunks_mut(s.width)) {
                s.encode_into(r, row);
            }
            Some(Tensor::new(vec![b, s.width], meta)?)
        }
        _ => None,
    };
    Ok(BatchInputs {
        embeddings: Tensor::new(vec![b, dim], emb)?,
        metadata,
    })
}

/// Appends `part` rows onto `acc` (both batch-major).
fn append_rows(acc: &mut Option<Tensor>, part: &Tensor) -> Result<()> {
    match acc {
        None => *acc = Some(part.clone()),
        Some(t) => {
            if t.shape()[1..] != part.shape()[1..] {
                return Err(Error::Shape {
                    op: "append_rows",
                    left: t.shape().to_vec(),
                    right: part.shape().to_vec(),
                });
            }
            let mut shape = t.shape().to_vec();
            shape[0] += part.shape()[0];
            let mut data = std::mem::replace(t, Tensor::zeros(&[0])).into_data();
            data.extend_from_slice(part.data());
            *t = Tensor::new(shape, data)?;
        }
    }
    Ok(())
}

/// Concatenates per-batch outputs along the batch axis.
pub fn concat_outputs(parts: &[HeadOutput]) -> Result<HeadOutput> {
    let first = parts.first().ok_or(Error::Empty("output batches"))?;
    let mut class = None;
    let mut poison = None;
    let mut taxonomy: Vec<(String, Option<Tensor>)> = first.taxonomy_logits.iter().map(|(r, _)| (r.clone(), None)).collect();
    for p in parts {
        append_rows(&mut class, &p.class_logits)?;
        if let Some(z) = &p.poison_logit {
            append_rows(&mut poison, z)?;
        }
        for ((_, acc), (_, t)) in taxonomy.iter_mut().zip(&p.taxonomy_logits) {
            append_rows(acc, t)?;
        }
    }
    Ok(HeadOutput {
        class_logits: class.expect("at least one batch"),
        poison_logit: poison,
        taxonomy_logits: taxonomy.into_iter().map(|(r, t)| (r, t.expect("at least one batch"))).collect(),
    })
}

/// Eval-mode outputs of every model, logit-averaged across models, for all
/// `records` in order.
pub fn predict_records(
    models: &[Model],
    records: &[&ObservationRecord],
    schema: Option<&MetadataSchema>,
    batch_size: usize,
) -> Result<HeadOutput> {
    let first = models.first().ok_or(Error::Empty("model list"))?;
    if records.is_empty() {
        return Err(Error::Empty("record list"));
    }
    let schema = schema.filter(|_| first.config.metadata_dim() > 0);
    let dim = first.config.embedding_dim();
    let mut parts = Vec::new();
    for chunk in records.chunks(batch_size.max(1)) {
        let inputs = batch_inputs(chunk, dim, schema)?;
        let outs = models
            .iter()
            .map(|m| m.predict(&inputs.embeddings, inputs.metadata.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        parts.push(if outs.len() == 1 { outs.into_iter().next().unwrap() } else { average_logits(&outs)? });
    }
    concat_outputs(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::rec;
    use crate::features::{FeatureOptions, MetadataSchema};
    use crate::model::{AuxHeads, HeadConfig, MlpHeadConfig};

    #[test]
    fn batched_prediction_matches_single_pass() {
        let records: Vec<_> = (0..7)
            .map(|i| {
                let mut r = rec(&format!("o{i}"), "a");
                r.embedding = vec![i as f32 * 0.1, 1.0 - i as f32 * 0.2];
                r
            })
            .collect();
        let refs: Vec<&ObservationRecord> = records.iter().collect();
        let schema = MetadataSchema::fit(&records, FeatureOptions::default());
        let cfg = HeadConfig::Mlp(MlpHeadConfig {
            embedding_dim: 2,
            metadata_dim: schema.width,
            hidden_dim: 6,
            n_classes: 3,
            dropout: 0.5,
            aux: AuxHeads {
                poison: true,
                taxonomy: Default::default(),
            },
        });
        let model = Model::new(cfg, 0).unwrap();
        let whole = predict_records(std::slice::from_ref(&model), &refs, Some(&schema), 100).unwrap();
        let batched = predict_records(std::slice::from_ref(&model), &refs, Some(&schema), 3).unwrap();
        assert_eq!(whole.class_logits.shape(), &[7, 3]);
        for (a, b) in whole.class_logits.data().iter().zip(batched.class_logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(batched.poison_logit.unwrap().shape(), &[7]);
        let twice = predict_records(&[model.clone(), model], &refs, Some(&schema), 3).unwrap();
        assert_eq!(twice.class_logits, batched.class_logits);
    }
}
