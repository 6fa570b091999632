//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Oracles are computed here, independently of the library.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use embedhead::dataset::{
    assemble_fold, build_class_catalog, make_synthetic, read_embeddings, read_metadata, stratified_three_way_split,
    ObservationRecord, RecordSlice, SynthParams,
};
use embedhead::diagnostics::{self, GRADCHECK_EPS, GRADCHECK_TOL};
use embedhead::features::geohash::{geohash_encode, geohash_levels_normalize};
use embedhead::features::{FeatureOptions, MetadataSchema};
use embedhead::inference::predict_records;
use embedhead::losses::{self, LossConfig, LossContext, LossKind, SeesawState, Targets};
use embedhead::metrics::{track_scores, CostMatrix};
use embedhead::model::{average_logits, AuxHeads, HeadConfig, HeadOutput, HeadVars, MlpHeadConfig, Model};
use embedhead::rng;
use embedhead::sampler::{compute_sampling_weights, SamplerWeights};
use embedhead::tensor::{Tape, Tensor};
use embedhead::trainer::{run_cross_validation, FitContext, TrainConfig};
use embedhead_cli::commands::{self, ConfigArgs, FoldSelection, PrepareArgs, SynthArgs, TrainArgs};
use rand::Rng as _;

// same allocator as the binary, so timings reflect it
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---- 1: track arithmetic ----

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let costs = CostMatrix::default();
    let mut r = rng::stream(1, "acceptance/tracks");
    for _ in 0..1000 {
        let c = r.random_range(2..20);
        let n = r.random_range(1..300);
        let poison: Vec<bool> = (0..c).map(|_| r.random::<bool>()).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let s = track_scores(&pred, &truth, &poison, &costs).unwrap();
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        let pe = pred.iter().zip(&truth).filter(|(&p, &t)| poison[t] && !poison[p]).count();
        let ep = pred.iter().zip(&truth).filter(|(&p, &t)| !poison[t] && poison[p]).count();
        let acc = correct as f64 / n as f64;
        let track2 = (100.0 * pe as f64 + 5.0 * ep as f64) / n as f64;
        if s.track3 != s.track1 + s.track2 || s.track1 != 1.0 - s.accuracy || s.accuracy != acc {
            return outcome(false, format!("additivity broken at n={n}, c={c}"));
        }
        if (s.track2 - track2).abs() > 1e-12 {
            return outcome(false, format!("track2 {} vs oracle {track2}", s.track2));
        }
    }
    // confusions built to hit the printed triples at N = 10000:
    // 100a + 5b = 10000 * track2 with a P->E and b E->P errors
    let mut triples = Vec::new();
    for (errors, a, b, want) in [(2160, 12, 18, (0.216, 0.129, 0.345)), (2210, 38, 10, (0.221, 0.385, 0.606))] {
        // classes 0, 1 edible; 2, 3 poisonous
        let poison = [false, false, true, true];
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        let mut push = |t: usize, p: usize, k: usize| {
            truth.extend(std::iter::repeat_n(t, k));
            pred.extend(std::iter::repeat_n(p, k));
        };
        push(2, 0, a);
        push(0, 2, b);
        let rest = errors - a - b;
        push(0, 1, rest / 2);
        push(3, 2, rest - rest / 2);
        push(1, 1, 10_000 - errors);
        let s = track_scores(&pred, &truth, &poison, &costs).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() < 5e-4;
        triples.push(format!("({:.3}, {:.3}) -> {:.3}", s.track1, s.track2, s.track3));
        if !(close(s.track1, want.0) && close(s.track2, want.1) && close(s.track3, want.2)) || s.track3 != s.track1 + s.track2 {
            return outcome(false, format!("triple {:?} gave {}", want, triples.last().unwrap()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(secs < 1.0, format!("1000 fixtures exact; {}; {secs:.3} s", triples.join(", ")))
}

// ---- 2: gradient oracle ----

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let checks = match diagnostics::run_suite(0..10, GRADCHECK_EPS, |_| Vec::new()) {
        Ok(c) => c,
        Err(e) => return outcome(false, e.to_string()),
    };
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed(GRADCHECK_TOL)).map(|c| c.component.as_str()).collect();
    let required = ["head/mlp", "head/fusion", "loss/ce", "loss/weighted_ce", "loss/focal", "loss/seesaw", "loss/composite_mlp"];
    let missing: Vec<&str> = required.iter().copied().filter(|n| !checks.iter().any(|c| c.component == *n)).collect();
    let n_ops = checks.iter().filter(|c| c.component.starts_with("op/")).count();
    let corrupted = diagnostics::run_case(&diagnostics::corrupted_case(0), GRADCHECK_EPS).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failed.is_empty() && missing.is_empty() && !corrupted.passed(GRADCHECK_TOL) && secs < 60.0,
        format!(
            "{} components ({n_ops} ops), 10 seeds, worst {worst:.2e}, failed {failed:?}, missing {missing:?}, corrupted rule flagged at {:.2}; {secs:.1} s",
            checks.len(),
            corrupted.max_rel_error
        ),
    )
}

// ---- 3: loss identities ----

fn scalar(tape: &Tape, v: embedhead::tensor::Var) -> f64 {
    tape.value(v).item()
}

fn criterion_3() -> Outcome {
    let mut r = rng::stream(3, "acceptance/losses");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (b, c) = (r.random_range(1..16), r.random_range(2..12));
        let z = Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-6.0..6.0)).collect()).unwrap();
        let t: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let counts: Vec<usize> = (0..c).map(|_| r.random_range(1..500)).collect();
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let ce = losses::cross_entropy(&mut tape, zv, &t, None).unwrap();
        let state = SeesawState::new(&counts, 0.0, 0.0).unwrap();
        let ss = losses::seesaw_loss(&mut tape, zv, &t, &state).unwrap();
        let fo = losses::focal_loss(&mut tape, zv, &t, 0.0).unwrap();
        worst = worst.max((scalar(&tape, ss) - scalar(&tape, ce)).abs());
        worst = worst.max((scalar(&tape, fo) - scalar(&tape, ce)).abs());

        // composite(α) = composite(0) + α * poison term
        let pz = Tensor::new(vec![b], (0..b).map(|_| r.random_range(-5.0..5.0)).collect()).unwrap();
        let labels: Vec<bool> = (0..b).map(|_| r.random::<bool>()).collect();
        let pv = tape.constant(pz);
        let head = HeadVars {
            class_logits: zv,
            poison_logit: Some(pv),
            taxonomy_logits: Vec::new(),
        };
        let targets = Targets {
            class: t.clone(),
            poison: labels.clone(),
            taxonomy: BTreeMap::new(),
        };
        let at = |tape: &mut Tape, alpha: f64| {
            let cfg = LossConfig {
                kind: LossKind::Seesaw,
                alpha,
                ..Default::default()
            };
            let ctx = LossContext::new(cfg, &counts).unwrap();
            let l = losses::composite_loss(tape, &head, &targets, &ctx).unwrap();
            tape.value(l).item()
        };
        let alpha = r.random_range(0.0..2.0);
        let l0 = at(&mut tape, 0.0);
        let la = at(&mut tape, alpha);
        let bce = losses::poison_bce(&mut tape, pv, &labels).unwrap();
        worst = worst.max((la - (l0 + alpha * scalar(&tape, bce))).abs());
    }
    outcome(worst < 1e-9, format!("100 batches, max deviation {worst:.2e} (tolerance 1e-9)"))
}

// ---- 4: seesaw hand values ----

fn criterion_4() -> Outcome {
    let state = SeesawState::new(&[100, 10], 1.0, 0.0).unwrap();
    let mut got = Vec::new();
    for t in [0usize, 1] {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = losses::seesaw_loss(&mut tape, z, &[t], &state).unwrap();
        got.push(tape.value(l).item());
    }
    // target 0: the tail negative is scaled by 10/100, so -ln(1 / 1.1);
    // target 1: the head negative is not mitigated, so ln 2
    let want = [1.1f64.ln(), 2.0f64.ln()];
    let hand = [0.09531, 0.69315];
    let ok = (0..2).all(|i| (got[i] - want[i]).abs() < 1e-5 && (got[i] - hand[i]).abs() < 1e-5);
    outcome(ok, format!("target 0 -> {:.5}, target 1 -> {:.5}", got[0], got[1]))
}

// ---- 5: sampler ----

fn sampler_draws() -> (Vec<usize>, Vec<usize>, f64) {
    let classes: Vec<usize> = [(0usize, 5000usize), (1, 3000), (2, 2000)]
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat_n(c, n))
        .collect();
    let w = compute_sampling_weights(&[0.5, 0.3, 0.2], &[1.0 / 3.0; 3], 0.01).unwrap();
    let s = SamplerWeights::new(w.clone(), &classes).unwrap();
    let total: f64 = classes.iter().map(|&c| w[c]).sum();
    let alias_err = s
        .table()
        .probabilities()
        .iter()
        .zip(&classes)
        .map(|(p, &c)| (p - w[c] / total).abs())
        .fold(0.0, f64::max);
    let draws = s.draw_epoch_indices(100_000, &mut rng::stream(5, rng::SAMPLER));
    (classes, draws, alias_err)
}

fn write_lines(path: &Path, values: impl IntoIterator<Item = String>) {
    let mut text = String::new();
    for v in values {
        text.push_str(&v);
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

fn criterion_5(out: &Path) -> Outcome {
    let (classes, draws, alias_err) = sampler_draws();
    let mut hits = [0usize; 3];
    for &i in &draws {
        hits[classes[i]] += 1;
    }
    let tv = 0.5 * hits.iter().map(|&h| (h as f64 / draws.len() as f64 - 1.0 / 3.0).abs()).sum::<f64>();
    write_lines(&out.join("draws.txt"), draws.iter().map(usize::to_string));
    outcome(tv < 0.02 && alias_err < 1e-12, format!("TV {tv:.4} (< 0.02), alias max error {alias_err:.1e} (< 1e-12)"))
}

// ---- 6: geohash ----

/// Fixed-point reference: quantize each axis to its bit budget and
/// interleave, longitude first.
fn geohash_oracle(lat: f64, lon: f64, precision: usize) -> String {
    const ALPHABET: &[u8] = b"0123456789bcdefghjkmnpqrstuvwxyz";
    let bits = 5 * precision;
    let (lon_bits, lat_bits) = (bits.div_ceil(2), bits / 2);
    let quant = |v: f64, lo: f64, span: f64, k: usize| -> u64 {
        let cells = (1u64 << k) as f64;
        (((v - lo) / span * cells).floor() as u64).min((1u64 << k) - 1)
    };
    let (x, y) = (quant(lon, -180.0, 360.0, lon_bits), quant(lat, -90.0, 180.0, lat_bits));
    let mut stream = Vec::with_capacity(bits);
    let (mut xi, mut yi) = (lon_bits, lat_bits);
    for i in 0..bits {
        if i % 2 == 0 {
            xi -= 1;
            stream.push((x >> xi) & 1);
        } else {
            yi -= 1;
            stream.push((y >> yi) & 1);
        }
    }
    stream
        .chunks(5)
        .map(|c| ALPHABET[c.iter().fold(0, |acc, b| acc * 2 + *b as usize)] as char)
        .collect()
}

fn criterion_6() -> Outcome {
    let reference = geohash_encode(57.64911, 10.40744, 11).unwrap();
    let oracle = geohash_oracle(57.64911, 10.40744, 11);
    let mut r = rng::stream(6, "acceptance/geohash");
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (lat, lon) = (r.random_range(-90.0..90.0), r.random_range(-180.0..180.0));
        for p in 1..=12 {
            if geohash_encode(lat, lon, p).unwrap() != geohash_oracle(lat, lon, p) {
                mismatches += 1;
            }
        }
    }
    let level2 = geohash_levels_normalize(&reference).unwrap()[0];
    let ok = reference == "u4pruydqqvj" && oracle == reference && mismatches == 0 && (level2 - 836.0 / 1023.0).abs() < 1e-9;
    outcome(ok, format!("{reference} (oracle {oracle}); {mismatches} mismatches over 12000 encodings; level 2 = {level2:.9}"))
}

// ---- 7: end to end ----

/// Accuracy of assigning each validation record to the nearest training
/// class mean, on the raw embeddings.
fn nearest_mean_accuracy(train: &[ObservationRecord], val: &[ObservationRecord]) -> f64 {
    let dim = train[0].embedding.len();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for r in train {
        let e = sums.entry(r.species.as_str()).or_insert_with(|| (vec![0.0; dim], 0));
        e.0.iter_mut().zip(&r.embedding).for_each(|(s, &v)| *s += f64::from(v));
        e.1 += 1;
    }
    let means: Vec<(&str, Vec<f64>)> = sums.into_iter().map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect())).collect();
    let correct = val
        .iter()
        .filter(|r| {
            let d = |m: &[f64]| m.iter().zip(&r.embedding).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>();
            let best = means.iter().min_by(|a, b| d(&a.1).total_cmp(&d(&b.1))).unwrap();
            best.0 == r.species
        })
        .count();
    correct as f64 / val.len() as f64
}

fn load_pool(dir: &Path, name: &str) -> Vec<ObservationRecord> {
    let (_, emb) = read_embeddings(&dir.join(format!("{name}.emb"))).unwrap();
    let by_id: BTreeMap<String, Vec<f32>> = emb.into_iter().collect();
    let mut rows = read_metadata(&dir.join(format!("{name}.csv"))).unwrap();
    for r in &mut rows {
        r.embedding = by_id[&r.observation_id].clone();
    }
    rows
}

fn criterion_7(out: &Path) -> Outcome {
    let data = out.join("data");
    let synth = SynthArgs {
        params: None,
        overrides: vec![
            "n_classes=10".into(),
            "dim=64".into(),
            "n_samples=5000".into(),
            "separation=4.0".into(),
            "seed=7".into(),
        ],
        out: data.clone(),
    };
    if let Err(e) = commands::cmd_synth(&synth) {
        return outcome(false, format!("synth failed: {e:#}"));
    }
    let oracle = nearest_mean_accuracy(&load_pool(&data, "train"), &load_pool(&data, "val"));
    if oracle < 0.99 {
        return outcome(false, format!("nearest-mean oracle only {oracle:.4}; dataset not separable enough"));
    }
    let config = ConfigArgs {
        config: None,
        overrides: vec![
            format!("dataset.manifest={}", serde_json::to_string(&data.join("manifest.json")).unwrap()),
            "dataset.seed=7".into(),
            "model.kind=mlp".into(),
            "loss.kind=seesaw".into(),
            "loss.alpha=0.1".into(),
            "train.lr=1e-4".into(),
            "train.epochs=20".into(),
            r#"train.scheduler={"kind":"cosine_warm_restarts"}"#.into(),
            "train.seed=7".into(),
        ],
    };
    let prepared = out.join("prepared");
    if let Err(e) = commands::cmd_prepare(&PrepareArgs {
        config: ConfigArgs {
            config: None,
            overrides: config.overrides.clone(),
        },
        out: prepared.clone(),
    }) {
        return outcome(false, format!("prepare failed: {e:#}"));
    }
    let start = Instant::now();
    let trained = commands::cmd_train(&TrainArgs {
        config,
        prepared,
        out: out.join("run"),
        fold: FoldSelection::One(0),
    });
    let secs = start.elapsed().as_secs_f64();
    match trained {
        Ok(folds) => {
            let h = &folds[0].history;
            let best = h.iter().map(|e| e.top1).fold(0.0, f64::max);
            let first = h.iter().find(|e| e.top1 >= 0.95).map(|e| e.epoch);
            outcome(
                best >= 0.95 && h.len() <= 20 && secs < 60.0,
                format!(
                    "oracle {oracle:.4}; best val top-1 {best:.4} (first >= 0.95 at epoch {first:?}) in {} epochs, {secs:.1} s",
                    h.len()
                ),
            )
        }
        Err(e) => outcome(false, format!("train failed: {e:#}")),
    }
}

// ---- 8: ensembles ----

fn criterion_8() -> Outcome {
    let (train, val) = make_synthetic(&SynthParams {
        n_samples: 1200,
        dim: 16,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let catalog = build_class_catalog(&train, &val).unwrap();
    let schema = MetadataSchema::fit(&train, FeatureOptions::default());
    let head = HeadConfig::Mlp(MlpHeadConfig {
        embedding_dim: 16,
        metadata_dim: schema.width,
        hidden_dim: 32,
        n_classes: catalog.n_classes(),
        dropout: 0.2,
        aux: AuxHeads {
            poison: true,
            taxonomy: BTreeMap::new(),
        },
    });
    let refs: Vec<&ObservationRecord> = val.iter().collect();
    let m = Model::new(head.clone(), 8).unwrap();
    let one = predict_records(std::slice::from_ref(&m), &refs, Some(&schema), 256).unwrap();
    let three = predict_records(&[m.clone(), m.clone(), m], &refs, Some(&schema), 256).unwrap();
    let identical = one == three;

    let mut r = rng::stream(8, "acceptance/average");
    let outs: Vec<HeadOutput> = (0..4)
        .map(|_| HeadOutput {
            class_logits: Tensor::new(vec![5, 3], (0..15).map(|_| r.random_range(-10.0..10.0)).collect()).unwrap(),
            poison_logit: Some(Tensor::new(vec![5], (0..5).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap()),
            taxonomy_logits: Vec::new(),
        })
        .collect();
    let forward = average_logits(&outs).unwrap();
    let reversed: Vec<HeadOutput> = outs.iter().rev().cloned().collect();
    let rotated: Vec<HeadOutput> = outs[1..].iter().chain(&outs[..1]).cloned().collect();
    let permutation_invariant = average_logits(&reversed).unwrap() == forward && average_logits(&rotated).unwrap() == forward;

    let split = stratified_three_way_split(&val, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 64,
        lr: 1e-3,
        top_k: 1,
        ..Default::default()
    };
    let run = serde_json::json!({});
    let ctx = FitContext {
        catalog: &catalog,
        schema: Some(&schema),
        model: &head,
        train: &cfg,
        run_config: &run,
    };
    let folds = run_cross_validation(&train, &val, &split, &[0, 1], ctx).unwrap();
    let n_best: usize = folds.iter().map(|f| f.fit.checkpoints.len()).sum();
    let same_slice = folds[0].test_ids == folds[1].test_ids && !folds[0].test_ids.is_empty();
    let untouched = folds.iter().all(|f| f.test_reads == 0);
    // the shared slice is the held-out section of the split
    let sets = assemble_fold(&train, &val, &split, 0).unwrap();
    let held = RecordSlice::new(sets.test);
    let matches_split = held.ids() == folds[0].test_ids.iter().map(String::as_str).collect::<Vec<_>>();
    outcome(
        identical && permutation_invariant && n_best == 2 && same_slice && untouched && matches_split,
        format!(
            "k=3 identical ensemble exact: {identical}; permutation invariant: {permutation_invariant}; {n_best} best checkpoints on one held-out slice of {}: {}",
            folds[0].test_ids.len(),
            same_slice && untouched && matches_split
        ),
    )
}

// ---- 9: split fidelity ----

fn species_pool(counts: &[usize], prefix: &str) -> Vec<ObservationRecord> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (s, &n) in counts.iter().enumerate() {
        for i in 0..n {
            out.push(ObservationRecord {
                observation_id: format!("{prefix}{s:04}-{i:05}"),
                embedding: Vec::new(),
                species: format!("sp{s:04}"),
                poisonous: false,
                metadata: Default::default(),
                taxonomy: BTreeMap::new(),
            });
        }
    }
    out
}

/// Power-law species counts summing to `total`.
fn long_tail(total: usize, species: usize) -> Vec<usize> {
    let w: Vec<f64> = (0..species).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let z: f64 = w.iter().sum();
    let mut c: Vec<usize> = w.iter().map(|x| ((x / z) * total as f64).floor().max(1.0) as usize).collect();
    let diff = total as i64 - c.iter().sum::<usize>() as i64;
    c[0] = (c[0] as i64 + diff) as usize;
    c
}

fn criterion_9(out: &Path) -> Outcome {
    let counts = long_tail(60_000, 400);
    let val = species_pool(&counts, "v");
    let split = stratified_three_way_split(&val, 9).unwrap();
    let mut per: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for r in &val {
        per.entry(r.species.as_str()).or_default()[split.section_of[&r.observation_id] as usize] += 1;
    }
    let stratified = per.values().all(|s| {
        let n: usize = s.iter().sum();
        s.iter().all(|&k| k == n / 3 || k == n.div_ceil(3))
    });
    let remainder = counts.iter().filter(|&&n| n % 3 != 0).count();
    let sizes = split.section_sizes();
    let sized = sizes.iter().all(|&s| s.abs_diff(20_000) <= remainder);

    let train = species_pool(&long_tail(356_770, 400), "t");
    let fold = assemble_fold(&train, &val, &split, 0).unwrap();
    let total = (fold.train.len() + fold.val.len() + fold.test.len()) as f64;
    let pct = [fold.train.len(), fold.val.len(), fold.test.len()].map(|n| 100.0 * n as f64 / total);
    let proportions = (pct[0] - 90.4).abs() < 0.1 && (pct[1] - 4.8).abs() < 0.1 && (pct[2] - 4.8).abs() < 0.1;
    fs::write(out.join("split.json"), serde_json::to_string(&split).unwrap()).unwrap();
    outcome(
        stratified && sized && proportions,
        format!(
            "sections {sizes:?} (remainder bound {remainder}); per-species floor/ceil: {stratified}; proportions {:.2}/{:.2}/{:.2}",
            pct[0], pct[1], pct[2]
        ),
    )
}

// ---- 10: determinism ----

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10(first: &Path, second: &Path, rerun: &[Outcome]) -> Outcome {
    if rerun.iter().any(|o| !o.pass) {
        return outcome(false, "a repeated criterion failed");
    }
    let a = files_under(first);
    let b = files_under(second);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let ok = differing.is_empty() && a.len() == b.len() && a.len() >= 10;
    outcome(ok, format!("{} files compared, differing: {differing:?}", a.len()))
}

fn main() {
    // single-thread mode
    std::env::set_var("EMBEDHEAD_THREADS", "1");
    let root = tempfile::tempdir().unwrap();
    // the two runs share one directory layout so the echoed manifest path matches
    let run_dir = root.path().join("run");
    let keep = root.path().join("first");
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    results.push((1, "track additivity and printed triples", criterion_1()));
    results.push((2, "finite-difference gradient oracle", criterion_2()));
    results.push((3, "loss reduction identities", criterion_3()));
    results.push((4, "seesaw hand values", criterion_4()));

    let run_5_7_9 = |dir: &Path| -> Vec<Outcome> {
        if dir.exists() {
            fs::remove_dir_all(dir).unwrap();
        }
        fs::create_dir_all(dir).unwrap();
        vec![criterion_5(dir), criterion_7(dir), criterion_9(dir)]
    };
    let mut first = run_5_7_9(&run_dir);
    fs::rename(&run_dir, &keep).unwrap();
    let second = run_5_7_9(&run_dir);
    let c9 = first.pop().unwrap();
    let c7 = first.pop().unwrap();
    let c5 = first.pop().unwrap();
    results.push((5, "sampler distribution matching", c5));
    results.push((6, "geohash against reference oracle", criterion_6()));
    results.push((7, "end-to-end synthetic learning", c7));
    results.push((8, "ensemble invariants", criterion_8()));
    results.push((9, "split fidelity", c9));
    results.push((10, "byte-identical reruns of 5, 7, 9", criterion_10(&keep, &run_dir, &second)));

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, name, o) in &results {
        failed += usize::from(!o.pass);
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
