//! Classifier heads over frozen embeddings.
//!
//! Two architectures share one output stage (class logits, an optional
//! binary poison logit and optional per-rank taxonomy logits):
//!
//! * [`HeadConfig::Mlp`]: `concat(embedding, metadata) -> linear -> GELU ->
//!   dropout -> output heads`.
//! * [`HeadConfig::Fusion`]: metadata is projected to the embedding width by
//!   a small MLP and added to the embedding; the sum passes as a single token
//!   through one pre-norm transformer encoder block before the output heads.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Auxiliary outputs sharing the trunk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxHeads {
    pub poison: bool,
    /// Taxonomy rank to number of labels at that rank.
    pub taxonomy: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpHeadConfig {
    pub embedding_dim: usize,
    /// Zero disables metadata input.
    pub metadata_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub aux: AuxHeads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Model width of the transformer block.
    pub embedding_dim: usize,
    pub metadata_dim: usize,
    pub meta_hidden_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub aux: AuxHeads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    Mlp(MlpHeadConfig),
    Fusion(FusionConfig),
}

impl HeadConfig {
    pub fn n_classes(&self) -> usize {
        match self {
            HeadConfig::Mlp(c) => c.n_classes,
            HeadConfig::Fusion(c) => c.n_classes,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            HeadConfig::Mlp(c) => c.embedding_dim,
            HeadConfig::Fusion(c) => c.embedding_dim,
        }
    }

    pub fn metadata_dim(&self) -> usize {
        match self {
            HeadConfig::Mlp(c) => c.metadata_dim,
            HeadConfig::Fusion(c) => c.metadata_dim,
        }
    }

    pub fn aux(&self) -> &AuxHeads {
        match self {
            HeadConfig::Mlp(c) => &c.aux,
            HeadConfig::Fusion(c) => &c.aux,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            HeadConfig::Mlp(c) => c.dropout,
            HeadConfig::Fusion(c) => c.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: usize| {
            if v == 0 {
                Err(Error::invalid(name, "must be positive"))
            } else {
                Ok(())
            }
        };
        positive("embedding_dim", self.embedding_dim())?;
        if self.n_classes() < 2 {
            return Err(Error::invalid("n_classes", format!("need at least 2, got {}", self.n_classes())));
        }
        if !(0.0..1.0).contains(&self.dropout()) {
            return Err(Error::invalid("dropout", format!("{} outside [0, 1)", self.dropout())));
        }
        if let Some((rank, _)) = self.aux().taxonomy.iter().find(|(_, &n)| n < 2) {
            return Err(Error::invalid("aux.taxonomy", format!("rank `{rank}` needs at least 2 labels")));
        }
        match self {
            HeadConfig::Mlp(c) => positive("hidden_dim", c.hidden_dim),
            HeadConfig::Fusion(c) => {
                positive("heads", c.heads)?;
                positive("ff_dim", c.ff_dim)?;
                if c.metadata_dim > 0 {
                    positive("meta_hidden_dim", c.meta_hidden_dim)?;
                }
                if c.embedding_dim % c.heads != 0 {
                    return Err(Error::invalid(
                        "heads",
                        format!("embedding_dim {} not divisible by {} heads", c.embedding_dim, c.heads),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`.
    FanInUniform(f64),
    Zeros,
    Ones,
}

const GELU_GAIN: f64 = std::f64::consts::SQRT_2;
const LINEAR_GAIN: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3): bound 1/sqrt(fan_in)

fn linear_layout(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    out.push((format!("{name}.weight"), vec![fan_in, fan_out], Init::FanInUniform(gain)));
    out.push((format!("{name}.bias"), vec![fan_out], Init::Zeros));
}

fn norm_layout(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, width: usize) {
    out.push((format!("{name}.gain"), vec![width], Init::Ones));
    out.push((format!("{name}.bias"), vec![width], Init::Zeros));
}

fn output_layout(out: &mut Vec<(String, Vec<usize>, Init)>, trunk: usize, n_classes: usize, aux: &AuxHeads) {
    linear_layout(out, "class", trunk, n_classes, LINEAR_GAIN);
    if aux.poison {
        linear_layout(out, "poison", trunk, 1, LINEAR_GAIN);
    }
    for (rank, &n) in &aux.taxonomy {
        linear_layout(out, &format!("taxonomy.{rank}"), trunk, n, LINEAR_GAIN);
    }
}

/// Parameter names, shapes and initializers, in storage order.
fn layout(config: &HeadConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    match config {
        HeadConfig::Mlp(c) => {
            linear_layout(&mut out, "hidden", c.embedding_dim + c.metadata_dim, c.hidden_dim, GELU_GAIN);
            output_layout(&mut out, c.hidden_dim, c.n_classes, &c.aux);
        }
        HeadConfig::Fusion(c) => {
            let d = c.embedding_dim;
            if c.metadata_dim > 0 {
                linear_layout(&mut out, "meta.0", c.metadata_dim, c.meta_hidden_dim, GELU_GAIN);
                linear_layout(&mut out, "meta.1", c.meta_hidden_dim, d, LINEAR_GAIN);
            }
            norm_layout(&mut out, "ln1", d);
            for p in ["q", "k", "v", "o"] {
                linear_layout(&mut out, &format!("attn.{p}"), d, d, LINEAR_GAIN);
            }
            norm_layout(&mut out, "ln2", d);
            linear_layout(&mut out, "ff.0", d, c.ff_dim, GELU_GAIN);
            linear_layout(&mut out, "ff.1", c.ff_dim, d, LINEAR_GAIN);
            norm_layout(&mut out, "ln_f", d);
            output_layout(&mut out, d, c.n_classes, &c.aux);
        }
    }
    out
}

pub fn param_count(config: &HeadConfig) -> usize {
    layout(config).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }
}

/// Parameters placed on a tape, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    index: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new<'a>(names: impl IntoIterator<Item = &'a str>, vars: &[Var]) -> Self {
        Self {
            index: names.into_iter().map(str::to_owned).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing parameter `{name}`")))
    }
}

/// Output handles of one forward pass.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub class_logits: Var,
    pub poison_logit: Option<Var>,
    pub taxonomy_logits: Vec<(String, Var)>,
}

/// Output values of one forward pass, batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[batch, n_classes]`
    pub class_logits: Tensor,
    /// `[batch]`
    pub poison_logit: Option<Tensor>,
    pub taxonomy_logits: Vec<(String, Tensor)>,
}

impl HeadVars {
    pub fn values(&self, tape: &Tape) -> HeadOutput {
        HeadOutput {
            class_logits: tape.value(self.class_logits).clone(),
            poison_logit: self.poison_logit.map(|v| tape.value(v).clone()),
            taxonomy_logits: self.taxonomy_logits.iter().map(|(r, v)| (r.clone(), tape.value(*v).clone())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: HeadConfig,
    pub params: Params,
}

/// Fan-in scaled uniform weights, zero biases, unit norm gains. Values are
/// rounded to `f32` so that checkpoints store them exactly.
pub fn init_head(config: &HeadConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::INIT);
    let entries = layout(config)
        .into_iter()
        .map(|(name, shape, init)| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanInUniform(gain) => {
                    let bound = gain * (3.0 / shape[0] as f64).sqrt();
                    (0..n).map(|_| f64::from(rng.random_range(-bound..bound) as f32)).collect()
                }
            };
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok(Params::new(entries))
}

impl Model {
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        let params = init_head(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Validates that `params` carries exactly the tensors `config` needs.
    pub fn from_params(config: HeadConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let want = layout(&config);
        if want.len() != params.len() {
            return Err(Error::Incompatible {
                field: "parameter count".into(),
                expected: want.len().to_string(),
                found: params.len().to_string(),
            });
        }
        for ((name, shape, _), (have_name, t)) in want.iter().zip(params.entries()) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::Incompatible {
                    field: format!("parameter `{name}`"),
                    expected: format!("{name} {shape:?}"),
                    found: format!("{have_name} {:?}", t.shape()),
                });
            }
        }
        Ok(Self { config, params })
    }

    /// Puts parameters on `tape`, tracked for gradients when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (Bound, Vec<Var>) {
        let vars: Vec<Var> = self
            .params
            .tensors()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        (Bound::new(self.params.names(), &vars), vars)
    }

    /// Eval-mode forward pass; a pure function of parameters and inputs.
    pub fn predict(&self, embeddings: &Tensor, metadata: Option<&Tensor>) -> Result<HeadOutput> {
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape, false);
        let emb = tape.constant(embeddings.clone());
        let meta = metadata.map(|m| tape.constant(m.clone()));
        // eval mode never draws from the generator
        let mut unused = rng::stream(0, rng::DROPOUT);
        let out = forward(&self.config, &mut tape, &bound, emb, meta, false, &mut unused)?;
        Ok(out.values(&tape))
    }
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let h = tape.matmul(x, w)?;
    tape.add(h, b)
}

fn norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{name}.gain"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

fn check_input(tape: &Tape, what: &'static str, x: Var, width: usize) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::Shape {
            op: what,
            left: s.to_vec(),
            right: vec![s.first().copied().unwrap_or(0), width],
        });
    }
    Ok(s[0])
}

fn output_heads(tape: &mut Tape, p: &Bound, aux: &AuxHeads, trunk: Var) -> Result<HeadVars> {
    let class_logits = linear(tape, p, "class", trunk)?;
    let poison_logit = if aux.poison {
        let z = linear(tape, p, "poison", trunk)?;
        let rows = tape.shape(z)[0];
        Some(tape.reshape(z, &[rows])?)
    } else {
        None
    };
    let taxonomy_logits = aux
        .taxonomy
        .keys()
        .map(|rank| Ok((rank.clone(), linear(tape, p, &format!("taxonomy.{rank}"), trunk)?)))
        .collect::<Result<_>>()?;
    Ok(HeadVars {
        class_logits,
        poison_logit,
        taxonomy_logits,
    })
}

/// Forward pass of either architecture. `metadata` is required exactly when
/// the config's `metadata_dim` is positive.
pub fn forward(
    config: &HeadConfig,
    tape: &mut Tape,
    params: &Bound,
    embeddings: Var,
    metadata: Option<Var>,
    train: bool,
    rng: &mut Rng,
) -> Result<HeadVars> {
    let batch = check_input(tape, "embeddings", embeddings, config.embedding_dim())?;
    let meta = match (config.metadata_dim(), metadata) {
        (0, _) => None,
        (w, Some(m)) => {
            if check_input(tape, "metadata", m, w)? != batch {
                return Err(Error::Shape {
                    op: "metadata batch",
                    left: tape.shape(embeddings).to_vec(),
                    right: tape.shape(m).to_vec(),
                });
            }
            Some(m)
        }
        (_, None) => return Err(Error::invalid("metadata", "model expects metadata input")),
    };
    match config {
        HeadConfig::Mlp(c) => forward_mlp(c, tape, params, embeddings, meta, train, rng),
        HeadConfig::Fusion(c) => forward_fusion(c, tape, params, embeddings, meta, train, rng),
    }
}

fn forward_mlp(
    c: &MlpHeadConfig,
    tape: &mut Tape,
    p: &Bound,
    emb: Var,
    meta: Option<Var>,
    train: bool,
    rng: &mut Rng,
) -> Result<HeadVars> {
    let x = match meta {
        Some(m) => tape.concat_lastdim(&[emb, m])?,
        None => emb,
    };
    let h = linear(tape, p, "hidden", x)?;
    let h = tape.gelu(h)?;
    let h = tape.dropout(h, c.dropout, train, rng)?;
    output_heads(tape, p, &c.aux, h)
}

fn forward_fusion(
    c: &FusionConfig,
    tape: &mut Tape,
    p: &Bound,
    emb: Var,
    meta: Option<Var>,
    train: bool,
    rng: &mut Rng,
) -> Result<HeadVars> {
    let mut x = emb;
    if let Some(m) = meta {
        let h = linear(tape, p, "meta.0", m)?;
        let h = tape.gelu(h)?;
        let proj = linear(tape, p, "meta.1", h)?;
        x = tape.add(x, proj)?;
    }
    // single-token self-attention sub-layer
    let h = norm(tape, p, "ln1", x)?;
    let q = linear(tape, p, "attn.q", h)?;
    let k = linear(tape, p, "attn.k", h)?;
    let v = linear(tape, p, "attn.v", h)?;
    let a = tape.attention(q, k, v, c.heads, 1)?;
    let a = linear(tape, p, "attn.o", a)?;
    x = tape.add(x, a)?;
    // feed-forward sub-layer
    let h = norm(tape, p, "ln2", x)?;
    let h = linear(tape, p, "ff.0", h)?;
    let h = tape.gelu(h)?;
    let h = tape.dropout(h, c.dropout, train, rng)?;
    let h = linear(tape, p, "ff.1", h)?;
    x = tape.add(x, h)?;
    let trunk = norm(tape, p, "ln_f", x)?;
    output_heads(tape, p, &c.aux, trunk)
}

/// Mean of every logit across heads.
pub fn average_logits(outputs: &[HeadOutput]) -> Result<HeadOutput> {
    let first = outputs.first().ok_or(Error::Empty("ensemble output list"))?;
    let mean = |pick: &dyn Fn(&HeadOutput) -> Option<&Tensor>| -> Result<Option<Tensor>> {
        let Some(t0) = pick(first) else {
            if outputs.iter().any(|o| pick(o).is_some()) {
                return Err(Error::invalid("outputs", "heads disagree on which outputs exist"));
            }
            return Ok(None);
        };
        let mut parts = Vec::with_capacity(outputs.len());
        for o in outputs {
            let t = pick(o).ok_or_else(|| Error::invalid("outputs", "heads disagree on which outputs exist"))?;
            if t.shape() != t0.shape() {
                return Err(Error::Shape {
                    op: "average_logits",
                    left: t0.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            parts.push(t.data());
        }
        let k = parts.len() as f64;
        let mut column = vec![0.0; parts.len()];
        let mean = (0..t0.len())
            .map(|i| {
                // sorted offsets from the minimum: order-independent, and
                // exact when all heads agree
                column.iter_mut().zip(&parts).for_each(|(c, p)| *c = p[i]);
                column.sort_by(f64::total_cmp);
                column[0] + column.iter().map(|v| v - column[0]).sum::<f64>() / k
            })
            .collect();
        Ok(Some(Tensor::new(t0.shape().to_vec(), mean)?))
    };
    let class_logits = mean(&|o| Some(&o.class_logits))?.expect("class logits always present");
    let poison_logit = mean(&|o| o.poison_logit.as_ref())?;
    let mut taxonomy_logits = Vec::new();
    for (i, (rank, _)) in first.taxonomy_logits.iter().enumerate() {
        if outputs.iter().any(|o| o.taxonomy_logits.get(i).map(|(r, _)| r) != Some(rank)) {
            return Err(Error::invalid("outputs", format!("heads disagree on taxonomy rank `{rank}`")));
        }
        let t = mean(&|o| o.taxonomy_logits.get(i).map(|(_, t)| t))?.expect("rank present in all heads");
        taxonomy_logits.push((rank.clone(), t));
    }
    if outputs.iter().any(|o| o.taxonomy_logits.len() != first.taxonomy_logits.len()) {
        return Err(Error::invalid("outputs", "heads disagree on taxonomy outputs"));
    }
    Ok(HeadOutput {
        class_logits,
        poison_logit,
        taxonomy_logits,
    })
}
