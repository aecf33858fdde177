mod common;

use clipsid::concept::{self, train_concept, ConceptTrainConfig};
use clipsid::interpret::concept_report;
use clipsid::linear_head::{self, inputs_for, mean_abs_offdiag_gram, train, HeadMode, TrainConfig};
use clipsid::metrics::{auc, average_precision};
use clipsid::planted::{planted_concepts, planted_linear, PlantedConceptSpec, PlantedSpec};
use clipsid::{EmbeddingDataset, Split};

fn test_ap(ds: &EmbeddingDataset, cfg: &TrainConfig) -> f64 {
    let (model, _) = train(ds, cfg).unwrap();
    let test = ds.select(Split::Test, None).unwrap();
    let scores = model.predict_proba(&inputs_for(cfg.mode, &test)).unwrap();
    average_precision(&scores, &test.labels()).unwrap()
}

#[test]
fn orthogonal_head_learns_planted_signal() {
    let ds = planted_linear(&PlantedSpec::default());
    let ap = test_ap(&ds, &TrainConfig::default());
    assert!(ap >= 0.99, "AP {ap}");
}

#[test]
fn linear_probe_learns_planted_signal() {
    let ds = planted_linear(&PlantedSpec::default());
    let cfg = TrainConfig {
        mode: HeadMode::LinearProbe,
        ..TrainConfig::default()
    };
    let ap = test_ap(&ds, &cfg);
    assert!(ap >= 0.99, "AP {ap}");
}

#[test]
fn shuffled_labels_stay_near_chance() {
    let ds = planted_linear(&PlantedSpec {
        shuffle_labels: true,
        ..PlantedSpec::default()
    });
    let ap = test_ap(&ds, &TrainConfig::default());
    assert!((ap - 0.5).abs() <= 0.1, "AP {ap}");
}

#[test]
fn same_seed_same_weights() {
    let ds = planted_linear(&PlantedSpec::default());
    let cfg = TrainConfig::default();
    let (a, la) = train(&ds, &cfg).unwrap();
    let (b, lb) = train(&ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.to_csv(), lb.to_csv());
}

#[test]
fn penalty_decorrelates_activations() {
    let ds = planted_linear(&PlantedSpec::default());
    let val = ds.select(Split::Val, None).unwrap();
    let stat = |lambda| {
        let cfg = TrainConfig {
            lambda,
            ..TrainConfig::default()
        };
        let (model, _) = train(&ds, &cfg).unwrap();
        let act = model.forward(&val.hidden()).unwrap().activations;
        mean_abs_offdiag_gram(&act).unwrap()
    };
    let with = stat(0.33);
    let without = stat(0.0);
    assert!(with < 0.1, "lambda=0.33 gives {with}");
    assert!(without >= with, "lambda=0 gives {without} < {with}");
}

#[test]
fn k_sweep_is_stable() {
    let ds = planted_linear(&PlantedSpec::default());
    let aps: Vec<f64> = [2, 4, 8, 16]
        .iter()
        .map(|&k| {
            test_ap(
                &ds,
                &TrainConfig {
                    k,
                    ..TrainConfig::default()
                },
            )
        })
        .collect();
    let spread = aps.iter().cloned().fold(f64::MIN, f64::max) - aps.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.03, "{aps:?}");
}

#[test]
fn log_records_every_epoch() {
    let ds = planted_linear(&PlantedSpec::default());
    let (_, log) = train(&ds, &TrainConfig::default()).unwrap();
    for (i, e) in log.epochs.iter().enumerate() {
        assert_eq!(e.epoch, i + 1);
        assert!(e.val_loss.is_some());
    }
    assert!(log.best_epoch >= 1 && log.best_epoch <= log.epochs.len());
}

fn concept_config(beta: f64) -> ConceptTrainConfig {
    ConceptTrainConfig {
        beta,
        ..ConceptTrainConfig::default()
    }
}

#[test]
fn concept_model_finds_the_informative_concept() {
    let spec = PlantedConceptSpec::default();
    let (ds, vocab) = planted_concepts(&spec);
    let (model, _) = train_concept(&ds, &vocab, &concept_config(1e-4)).unwrap();
    let biggest = (0..model.wc.len())
        .max_by(|&a, &b| model.wc[a].abs().total_cmp(&model.wc[b].abs()))
        .unwrap();
    assert_eq!(biggest, spec.informative, "{:?}", model.wc);

    let test = ds.select(Split::Test, None).unwrap();
    let labels = test.labels();
    let report = concept_report(&model, &test.joint(), &labels, &vocab).unwrap();
    for c in &report.concepts {
        if c.index == spec.informative {
            assert_eq!(c.auc, 1.0);
        }
    }
    let scores = concept::predict_proba(&model, &test.joint(), &vocab).unwrap();
    assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
}

#[test]
fn strong_prior_pushes_q_toward_alpha() {
    let (ds, vocab) = planted_concepts(&PlantedConceptSpec::default());
    let val = ds.select(Split::Val, None).unwrap().joint();
    let q = |beta| {
        let (m, _) = train_concept(&ds, &vocab, &concept_config(beta)).unwrap();
        concept::mean_q(&m, &val).unwrap()
    };
    let weak = q(1e-4);
    let strong = q(1.0);
    assert!(strong < weak, "beta=1: {strong}, beta=1e-4: {weak}");
}

#[test]
fn concept_training_is_deterministic() {
    let (ds, vocab) = planted_concepts(&PlantedConceptSpec {
        n_train: 100,
        n_val: 40,
        n_test: 40,
        ..PlantedConceptSpec::default()
    });
    let cfg = ConceptTrainConfig {
        max_epochs: 80,
        ..ConceptTrainConfig::default()
    };
    let (a, _) = train_concept(&ds, &vocab, &cfg).unwrap();
    let (b, _) = train_concept(&ds, &vocab, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn head_loss_is_invariant_to_column_scaling_of_the_penalty() {
    // The penalty sees only directions, so rescaling a W1 column leaves it alone.
    let ds = planted_linear(&PlantedSpec::default());
    let view = ds.select(Split::Val, None).unwrap();
    let x = view.hidden();
    let model = linear_head::init_model(HeadMode::OrthogonalHead, 64, 4, 9);
    let before = linear_head::orthogonality_penalty(&model.forward(&x).unwrap().activations).unwrap();
    let mut scaled = model.clone();
    scaled.w1.as_mut().unwrap().column_mut(1).mapv_inplace(|v| v * 7.5);
    let after = linear_head::orthogonality_penalty(&scaled.forward(&x).unwrap().activations).unwrap();
    assert!((before - after).abs() < 1e-10);
}
