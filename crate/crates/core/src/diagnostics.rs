//! Finite-difference gradient checks over every tape op, both heads and all
//! losses.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::Result;
use crate::losses::{self, LossConfig, LossContext, LossKind, SeesawState, Targets};
use crate::model::{self, AuxHeads, Bound, FusionConfig, HeadConfig, HeadVars, MlpHeadConfig, Model};
use crate::rng;
use crate::tensor::{finite_diff_check, Tape, Tensor, Var};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A scalar function of its inputs to be differentiated.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

impl ComponentCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn uniform(r: &mut rng::Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinks stay out of the stencil.
fn away_from_zero(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.5);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(w * x)` with fixed random `w`, so every output coordinate matters.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = uniform(&mut rng::stream(seed, "gradcheck/projection"), &shape, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.reduce_sum(p)
}

fn case(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name: name.to_owned(),
        inputs,
        build: Box::new(build),
    }
}

fn unary(name: &str, x: Tensor, seed: u64, op: fn(&mut Tape, Var) -> Result<Var>) -> GradCase {
    case(name, vec![x], move |t, v| {
        let y = op(t, v[0])?;
        project(t, y, seed)
    })
}

/// One case per tape op.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng::stream(seed, "gradcheck/ops");
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4, 2], -1.0, 1.0);
    let c = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let row = uniform(&mut r, &[4], -1.0, 1.0);
    let pos = uniform(&mut r, &[3, 4], 0.2, 2.0);
    let kinked = away_from_zero(&mut r, &[3, 4]);
    let gain = uniform(&mut r, &[4], 0.5, 1.5);
    let d = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let attn = [uniform(&mut r, &[4, 4], -1.0, 1.0), uniform(&mut r, &[4, 4], -1.0, 1.0), uniform(&mut r, &[4, 4], -1.0, 1.0)];
    let s = seed;
    vec![
        case("op/matmul", vec![a.clone(), b], move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        }),
        case("op/add", vec![a.clone(), c.clone()], move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        }),
        case("op/add_broadcast", vec![a.clone(), row.clone()], move |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, s)
        }),
        case("op/sub", vec![a.clone(), c.clone()], move |t, v| {
            let y = t.sub(v[0], v[1])?;
            project(t, y, s)
        }),
        case("op/mul", vec![a.clone(), c.clone()], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            project(t, y, s)
        }),
        unary("op/scale", a.clone(), s, |t, x| t.scale(x, -1.7)),
        unary("op/add_scalar", a.clone(), s, |t, x| t.add_scalar(x, 0.3)),
        unary("op/relu", kinked, s, |t, x| t.relu(x)),
        unary("op/gelu", a.clone(), s, |t, x| t.gelu(x)),
        unary("op/exp", a.clone(), s, |t, x| t.exp(x)),
        unary("op/log", pos.clone(), s, |t, x| t.log(x)),
        unary("op/softplus", a.clone(), s, |t, x| t.softplus(x)),
        unary("op/powf", pos, s, |t, x| t.powf(x, 1.7)),
        unary("op/elementwise", a.clone(), s, |t, x| t.elementwise(x, f64::sin, f64::cos)),
        unary("op/softmax", a.clone(), s, |t, x| t.softmax_lastdim(x)),
        unary("op/log_softmax", a.clone(), s, |t, x| t.log_softmax_lastdim(x)),
        case("op/layer_norm", vec![a.clone(), gain, row], move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], model::LAYER_NORM_EPS)?;
            project(t, y, s)
        }),
        case("op/concat", vec![a.clone(), d], move |t, v| {
            let y = t.concat_lastdim(&[v[0], v[1]])?;
            project(t, y, s)
        }),
        case("op/reduce_sum", vec![a.clone()], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.reduce_sum(sq)
        }),
        case("op/reduce_mean", vec![a.clone()], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.reduce_mean(sq)
        }),
        case("op/dropout", vec![a.clone()], move |t, v| {
            // same mask on every evaluation
            let mut dr = rng::stream(s, rng::DROPOUT);
            let y = t.dropout(v[0], 0.3, true, &mut dr)?;
            project(t, y, s)
        }),
        case("op/pick", vec![a.clone()], move |t, v| {
            let y = t.pick_lastdim(v[0], &[3, 0, 2])?;
            project(t, y, s)
        }),
        case("op/reshape", vec![a], move |t, v| {
            let y = t.reshape(v[0], &[2, 6])?;
            project(t, y, s)
        }),
        case("op/attention", attn.to_vec(), move |t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, 2)?;
            project(t, y, s)
        }),
    ]
}

fn head_configs() -> [(&'static str, HeadConfig); 2] {
    let aux = AuxHeads {
        poison: true,
        taxonomy: [("genus".to_string(), 3)].into_iter().collect(),
    };
    [
        (
            "head/mlp",
            HeadConfig::Mlp(MlpHeadConfig {
                embedding_dim: 5,
                metadata_dim: 3,
                hidden_dim: 6,
                n_classes: 4,
                dropout: 0.2,
                aux: aux.clone(),
            }),
        ),
        (
            "head/fusion",
            HeadConfig::Fusion(FusionConfig {
                embedding_dim: 4,
                metadata_dim: 3,
                meta_hidden_dim: 5,
                heads: 2,
                ff_dim: 6,
                n_classes: 4,
                dropout: 0.2,
                aux,
            }),
        ),
    ]
}

fn head_case(name: &str, cfg: HeadConfig, seed: u64, score: impl Fn(&mut Tape, &HeadVars) -> Result<Var> + 'static) -> Result<GradCase> {
    let m = Model::new(cfg.clone(), seed)?;
    let mut r = rng::stream(seed, "gradcheck/heads");
    let emb = uniform(&mut r, &[3, cfg.embedding_dim()], -1.0, 1.0);
    let meta = uniform(&mut r, &[3, cfg.metadata_dim()], -1.0, 1.0);
    let names: Vec<String> = m.params.names().map(str::to_owned).collect();
    Ok(case(name, m.params.tensors().cloned().collect(), move |t, v| {
        let bound = Bound::new(names.iter().map(String::as_str), v);
        let e = t.constant(emb.clone());
        let md = t.constant(meta.clone());
        // training mode with a fixed dropout mask
        let mut dr = rng::stream(seed, rng::DROPOUT);
        let out = model::forward(&cfg, t, &bound, e, Some(md), true, &mut dr)?;
        score(t, &out)
    }))
}

fn project_heads(t: &mut Tape, out: &HeadVars, seed: u64) -> Result<Var> {
    let mut total = project(t, out.class_logits, seed)?;
    let extras: Vec<Var> = out.poison_logit.iter().copied().chain(out.taxonomy_logits.iter().map(|(_, v)| *v)).collect();
    for (i, v) in extras.into_iter().enumerate() {
        let p = project(t, v, seed + 1 + i as u64)?;
        total = t.add(total, p)?;
    }
    Ok(total)
}

/// Both heads under a random projection of every output, and the composite
/// objective through the MLP head.
pub fn head_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (name, cfg) in head_configs() {
        out.push(head_case(name, cfg, seed, move |t, o| project_heads(t, o, seed))?);
    }
    let targets = Targets {
        class: vec![0, 3, 1],
        poison: vec![true, false, true],
        taxonomy: [("genus".to_string(), vec![2, 0, 1])].into_iter().collect(),
    };
    // q = 0 keeps the seesaw factors independent of the logits
    let config = LossConfig {
        kind: LossKind::Seesaw,
        alpha: 0.1,
        q: 0.0,
        ..Default::default()
    };
    let ctx = LossContext::new(config, &[40, 10, 3, 1])?;
    let (_, mlp) = head_configs().into_iter().next().unwrap();
    out.push(head_case("loss/composite_mlp", mlp, seed, move |t, o| {
        losses::composite_loss(t, o, &targets, &ctx)
    })?);
    Ok(out)
}

/// Each class loss on random logits.
pub fn loss_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut r = rng::stream(seed, "gradcheck/losses");
    let logits = uniform(&mut r, &[5, 4], -1.5, 1.5);
    let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
    let poison = uniform(&mut r, &[5], -3.0, 3.0);
    let labels: Vec<bool> = (0..5).map(|_| r.random::<bool>()).collect();
    let counts = [20usize, 10, 4, 2];
    let weights = losses::inverse_frequency_weights(&counts);
    let state = SeesawState::new(&counts, 0.8, 2.0)?;
    // compensation factors frozen at the evaluation point, as in training
    let frozen: Vec<f64> = targets
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| state.log_factors(logits.row(i), t))
        .collect();
    let frozen = Tensor::new(vec![5, 4], frozen)?;
    let (t1, t2, t3, t4) = (targets.clone(), targets.clone(), targets.clone(), targets);
    Ok(vec![
        case("loss/ce", vec![logits.clone()], move |t, v| losses::cross_entropy(t, v[0], &t1, None)),
        case("loss/weighted_ce", vec![logits.clone()], move |t, v| {
            losses::cross_entropy(t, v[0], &t2, Some(&weights))
        }),
        case("loss/focal", vec![logits.clone()], move |t, v| losses::focal_loss(t, v[0], &t3, 2.0)),
        case("loss/seesaw", vec![logits], move |t, v| losses::seesaw_with_factors(t, v[0], &t4, &frozen)),
        case("loss/poison_bce", vec![poison], move |t, v| losses::poison_bce(t, v[0], &labels)),
    ])
}

pub fn all_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = op_cases(seed);
    cases.extend(head_cases(seed)?);
    cases.extend(loss_cases(seed)?);
    Ok(cases)
}

/// A case whose backward rule is deliberately wrong (`d/dx sin = -cos`).
pub fn corrupted_case(seed: u64) -> GradCase {
    let x = uniform(&mut rng::stream(seed, "gradcheck/corrupted"), &[2, 3], -1.0, 1.0);
    unary("corrupted/sin", x, seed, |t, x| t.elementwise(x, f64::sin, |v| -v.cos()))
}

pub fn run_case(c: &GradCase, eps: f64) -> Result<ComponentCheck> {
    let r = finite_diff_check(&c.build, &c.inputs, eps)?;
    Ok(ComponentCheck {
        component: c.name.clone(),
        max_rel_error: r.max_rel_error,
        coords: r.coords,
    })
}

/// Worst error per component over `seeds`, in case order.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, eps: f64, extra: impl Fn(u64) -> Vec<GradCase>) -> Result<Vec<ComponentCheck>> {
    let mut worst: BTreeMap<String, (usize, ComponentCheck)> = BTreeMap::new();
    for seed in seeds {
        let mut cases = all_cases(seed)?;
        cases.extend(extra(seed));
        for (i, c) in cases.iter().enumerate() {
            let check = run_case(c, eps)?;
            let slot = worst.entry(check.component.clone()).or_insert((i, check.clone()));
            if check.max_rel_error > slot.1.max_rel_error || check.max_rel_error.is_nan() {
                slot.1.max_rel_error = check.max_rel_error;
            }
            slot.1.coords = slot.1.coords.max(check.coords);
        }
    }
    let mut out: Vec<(usize, ComponentCheck)> = worst.into_values().collect();
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, c)| c).collect())
}
