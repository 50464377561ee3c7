//! Training-loop properties: memorization, determinism and the REINFORCE
//! estimator against exact enumeration.

mod support;

use dmn_autodiff::Tape;
use dmn_core::dataset::{generate_dataset, DatasetConfig, Example};
use dmn_core::layout::ModuleKind;
use dmn_core::model::{Model, ModelConfig};
use dmn_core::policy::Vocabulary;
use dmn_core::trainer::{expert_kinds, train, Ablation, TrainConfig, Trainer};
use support::{exact_expected_gradient, expected_surrogate_gradient, monte_carlo_gradient, toy};

fn small_model() -> ModelConfig {
    ModelConfig {
        d_emb: 16,
        d_hidden: 32,
        d_att: 16,
        d_tok: 8,
        d_module: 16,
        ..ModelConfig::default()
    }
}

fn dataset(train: usize, val: usize, seed: u64) -> dmn_core::dataset::Dataset {
    let config = DatasetConfig {
        train,
        val,
        test: 0,
        ..DatasetConfig::default()
    };
    generate_dataset(&config, seed).unwrap()
}

fn greedy_tokens(model: &Model, ex: &Example) -> Vec<ModuleKind> {
    let mut tape = Tape::with_params(&model.store);
    let enc = model.encode(&mut tape, ex.question()).unwrap();
    model.policy.greedy(&mut tape, &enc).unwrap().tokens
}

#[test]
fn cloning_memorizes_fifty_questions() {
    let ds = dataset(50, 1, 4);
    let vocab = Vocabulary::build(ds.train.iter().map(Example::question));
    let model = Model::new(small_model(), vocab, 0).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let batch: Vec<&Example> = ds.train.iter().collect();
    let losses: Vec<f64> = (0..200).map(|_| trainer.cloning_step(&batch).unwrap()).collect();

    let (mut right, mut total) = (0, 0);
    for ex in &ds.train {
        let expert = expert_kinds(ex);
        let got = greedy_tokens(&trainer.model, ex);
        total += expert.len();
        right += expert.iter().zip(&got).filter(|(a, b)| a == b).count();
        assert_eq!(got, expert, "{:?}", ex.question());
    }
    assert_eq!(right, total);

    let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0], "window means rose: {windows:?}");
    }
}

fn tiny_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        cloning_epochs: 2,
        reinforce_epochs: 1,
        batch_size: 8,
        rollouts: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn model_bits(m: &Model) -> Vec<u64> {
    m.store.iter().flat_map(|(_, _, t)| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let ds = dataset(40, 12, 2);
    let run = |seed| {
        let out = train(&tiny_train_config(seed), &small_model(), &ds, |_| {}).unwrap();
        let mut report = out.report.clone();
        for e in &mut report.epochs {
            e.seconds = 0.0;
        }
        (report, model_bits(&out.model))
    };
    let a = run(7);
    let b = run(7);
    assert_eq!(a, b);
    assert_eq!(a.0.epochs.len(), 3);
    assert_eq!(a.0.epochs[2].phase, "reinforce");
    assert_ne!(a.1, run(8).1);

    for ablation in [Ablation::BaselineI, Ablation::BaselineII] {
        let config = TrainConfig {
            ablation,
            ..tiny_train_config(7)
        };
        let out = train(&config, &small_model(), &ds, |_| {}).unwrap();
        assert_eq!(out.report.ablation, ablation);
        if ablation == Ablation::BaselineII {
            assert!(out.report.epochs.iter().all(|e| e.phase == "expert"));
        }
    }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    dmn_autodiff::gradcheck::relative_error(a, b)
}

#[test]
fn surrogate_expectation_is_baseline_invariant_and_exact() {
    let toy = toy();
    let exact = exact_expected_gradient(&toy);
    assert!(exact.iter().any(|g| g.abs() > 1e-6));
    for b in [0.0, 1.0, 3.0, -2.5] {
        let s = expected_surrogate_gradient(&toy, b);
        assert!(rel(&s, &exact) < 1e-8, "baseline {b}: {:e}", rel(&s, &exact));
    }
}

#[test]
fn monte_carlo_reinforce_matches_enumeration() {
    let toy = toy();
    let exact = exact_expected_gradient(&toy);
    // A crude constant baseline; the estimator stays unbiased for any.
    let estimate = monte_carlo_gradient(&toy, 50_000, 3.0, 3);
    let err = rel(&estimate, &exact);
    assert!(err < 0.05, "relative error {err:.4}");
}
