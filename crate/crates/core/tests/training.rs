use embedhead::dataset::{
    assemble_fold, build_class_catalog, make_synthetic, stratified_three_way_split, ClassCatalog, ObservationRecord,
    RecordSlice, SplitAssignment, SynthParams,
};
use embedhead::features::{FeatureOptions, MetadataSchema};
use embedhead::metrics::{evaluate_run, CostMatrix};
use embedhead::model::{AuxHeads, HeadConfig, MlpHeadConfig, FusionConfig};
use embedhead::trainer::{fit, run_cross_validation, FitContext, RankMetric, SchedulerConfig, TrainConfig};
use embedhead::Error;

struct Fixture {
    train: Vec<ObservationRecord>,
    val: Vec<ObservationRecord>,
    catalog: ClassCatalog,
    split: SplitAssignment,
    schema: MetadataSchema,
}

fn fixture(n_samples: usize, seed: u64) -> Fixture {
    let (train, val) = make_synthetic(&SynthParams {
        n_samples,
        dim: 16,
        seed,
        ..Default::default()
    })
    .unwrap();
    let catalog = build_class_catalog(&train, &val).unwrap();
    let split = stratified_three_way_split(&val, seed).unwrap();
    let schema = MetadataSchema::fit(&train, FeatureOptions::default());
    Fixture {
        train,
        val,
        catalog,
        split,
        schema,
    }
}

fn mlp(f: &Fixture, hidden: usize) -> HeadConfig {
    HeadConfig::Mlp(MlpHeadConfig {
        embedding_dim: 16,
        metadata_dim: f.schema.width,
        hidden_dim: hidden,
        n_classes: f.catalog.n_classes(),
        dropout: 0.2,
        aux: AuxHeads {
            poison: true,
            taxonomy: Default::default(),
        },
    })
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 64,
        lr: 1e-3,
        ..Default::default()
    }
}

fn run_fold0(f: &Fixture, model: &HeadConfig, cfg: &TrainConfig) -> Result<embedhead::trainer::FitOutput, Error> {
    let sets = assemble_fold(&f.train, &f.val, &f.split, 0).unwrap();
    let run = serde_json::json!({"test": true});
    fit(
        &RecordSlice::new(sets.train),
        &RecordSlice::new(sets.val),
        FitContext {
            catalog: &f.catalog,
            schema: Some(&f.schema),
            model,
            train: cfg,
            run_config: &run,
        },
    )
}

#[test]
fn learns_separable_data_and_loss_decreases() {
    let f = fixture(1500, 0);
    let out = run_fold0(&f, &mlp(&f, 64), &small_train()).unwrap();
    let h = &out.history;
    assert_eq!(h.len(), 6);
    assert!(h[4].train_loss < h[0].train_loss, "{h:?}");
    assert!(h.last().unwrap().top1 >= 0.95, "{h:?}");
    for e in h {
        assert_eq!(e.track1 + e.track2, e.track3);
        assert_eq!(e.track1, 1.0 - e.top1);
    }
}

#[test]
fn fusion_head_trains() {
    let f = fixture(1500, 1);
    let model = HeadConfig::Fusion(FusionConfig {
        embedding_dim: 16,
        metadata_dim: f.schema.width,
        meta_hidden_dim: 16,
        heads: 4,
        ff_dim: 32,
        n_classes: f.catalog.n_classes(),
        dropout: 0.1,
        aux: AuxHeads {
            poison: true,
            taxonomy: [("genus".to_string(), f.catalog.taxonomy_maps["genus"].labels.len())].into_iter().collect(),
        },
    });
    let cfg = TrainConfig {
        epochs: 12,
        ..small_train()
    };
    let out = run_fold0(&f, &model, &cfg).unwrap();
    assert!(out.history.last().unwrap().top1 >= 0.9, "{:?}", out.history);
}

#[test]
fn bit_identical_history_for_fixed_seed() {
    let f = fixture(800, 2);
    let cfg = TrainConfig {
        epochs: 3,
        ..small_train()
    };
    let a = run_fold0(&f, &mlp(&f, 32), &cfg).unwrap();
    let b = run_fold0(&f, &mlp(&f, 32), &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoints[0].model, b.checkpoints[0].model);
    let c = run_fold0(&f, &mlp(&f, 32), &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn retained_checkpoints_are_the_best_epochs() {
    let f = fixture(800, 3);
    for metric in [RankMetric::Track3, RankMetric::Top1, RankMetric::ValLoss] {
        let cfg = TrainConfig {
            epochs: 5,
            lr: 3e-4,
            rank_metric: metric,
            ..small_train()
        };
        let out = run_fold0(&f, &mlp(&f, 32), &cfg).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        let mut order: Vec<&_> = out.history.iter().collect();
        // stable sort keeps earlier epochs first among ties
        order.sort_by(|a, b| {
            let (x, y) = (metric.of(a), metric.of(b));
            if metric.better(x, y) {
                std::cmp::Ordering::Less
            } else if metric.better(y, x) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        });
        let want: Vec<usize> = order.iter().take(2).map(|e| e.epoch).collect();
        let got: Vec<usize> = out.checkpoints.iter().map(|c| c.epoch).collect();
        assert_eq!(got, want, "{metric:?}");
        for c in &out.checkpoints {
            assert_eq!(c.meta.epoch, c.epoch);
            assert_eq!(c.meta.metrics.len(), 10);
        }
    }
}

#[test]
fn plateau_scheduler_runs() {
    let f = fixture(800, 4);
    let cfg = TrainConfig {
        epochs: 4,
        scheduler: SchedulerConfig::ReduceOnPlateau {
            factor: 0.5,
            patience: 0,
            threshold: 10.0,
        },
        ..small_train()
    };
    let out = run_fold0(&f, &mlp(&f, 16), &cfg).unwrap();
    let lrs: Vec<f64> = out.history.iter().map(|e| e.lr).collect();
    // the first evaluation only sets the reference
    assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 2.5e-4]);
}

#[test]
fn huge_learning_rate_diverges_with_epoch_context() {
    let f = fixture(800, 5);
    let cfg = TrainConfig {
        lr: 1e3,
        grad_clip: 0.0,
        scheduler: SchedulerConfig::Constant,
        ..small_train()
    };
    match run_fold0(&f, &mlp(&f, 32), &cfg) {
        Err(Error::Diverged { epoch, batch, .. }) => {
            assert!(epoch >= 1 && batch <= 20);
            let msg = Error::Diverged { epoch, batch, reason: String::new() }.to_string();
            assert!(msg.contains(&format!("epoch {epoch}")));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn cross_validation_two_folds_shared_test_slice() {
    let f = fixture(1200, 6);
    let model = mlp(&f, 32);
    let cfg = TrainConfig {
        epochs: 3,
        ..small_train()
    };
    let run = serde_json::Value::Null;
    let ctx = FitContext {
        catalog: &f.catalog,
        schema: Some(&f.schema),
        model: &model,
        train: &cfg,
        run_config: &run,
    };
    let folds = run_cross_validation(&f.train, &f.val, &f.split, &[0, 1], ctx).unwrap();
    assert_eq!(folds.len(), 2);
    assert_eq!(folds[0].test_ids, folds[1].test_ids);
    assert!(folds.iter().all(|r| r.test_reads == 0 && !r.fit.checkpoints.is_empty()));

    let test: Vec<&ObservationRecord> = f
        .val
        .iter()
        .filter(|r| f.split.section_of[&r.observation_id] == 2)
        .collect();
    let best: Vec<_> = folds.iter().map(|r| r.fit.checkpoints[0].model.clone()).collect();
    let costs = CostMatrix::default();
    let ens = evaluate_run(&best, &test, &f.catalog, Some(&f.schema), &costs, 64).unwrap();
    assert_eq!(ens.scores.n_samples, test.len());

    let single = evaluate_run(&best[..1], &test, &f.catalog, Some(&f.schema), &costs, 64).unwrap();
    let copies = vec![best[0].clone(); 3];
    let tripled = evaluate_run(&copies, &test, &f.catalog, Some(&f.schema), &costs, 64).unwrap();
    assert_eq!(single, tripled);
}
