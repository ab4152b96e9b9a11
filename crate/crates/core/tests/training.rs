//! Pretraining, adaptation and checkpoint behaviour on tiny synthetic data.

use ranf::bundle::{HrirBundle, MeasurementSubset};
use ranf::dsp::ItdConfig;
use ranf::nn::{ParamRole, ParamStore};
use ranf::ranf_model::{predict_subject, PredictConfig, RanfConfig, RanfModel};
use ranf::retrieval::{retrieve_topk, FeatureStore, RetrievalCriterion, TargetMeasurements};
use ranf::synth::{generate_bundle, GridSpec, SynthConfig};
use ranf::training::{adapt, pretrain, PretrainSetup, RetrievalPlan, TrainConfig, TrainState};

fn bundle(subjects: usize, grid: GridSpec) -> HrirBundle {
    generate_bundle(&SynthConfig {
        subjects,
        grid,
        hrir_length: 128,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_model(k: usize) -> RanfConfig {
    RanfConfig {
        channels: 16,
        blocks: 1,
        lstm_units: 8,
        post_layers: 2,
        k,
        tac_hidden: 8,
        hrir_length: 128,
        rff_features: 8,
        ..RanfConfig::default()
    }
}

struct Fixture {
    model: RanfModel,
    params: ParamStore<f32>,
    training: Vec<String>,
    pool: Vec<String>,
}

/// Model with target vectors for `training` and retrieved vectors for
/// `pool`.
fn fixture(k: usize, training: &[&str], pool: &[&str], seed: u64) -> Fixture {
    let mut params = ParamStore::new();
    let model = RanfModel::new(small_model(k), &mut params, seed).unwrap();
    for s in training {
        model.add_target(&mut params, s, seed).unwrap();
    }
    for s in pool {
        model.add_retrieved(&mut params, s, seed).unwrap();
    }
    Fixture {
        model,
        params,
        training: training.iter().map(|s| s.to_string()).collect(),
        pool: pool.iter().map(|s| s.to_string()).collect(),
    }
}

fn run_pretrain(b: &HrirBundle, f: &Fixture, cfg: &TrainConfig, state: TrainState) -> TrainState {
    run_pretrain_validated(b, f, cfg, state, &[])
}

fn run_pretrain_validated(b: &HrirBundle, f: &Fixture, cfg: &TrainConfig, state: TrainState, validation: &[&str]) -> TrainState {
    let store = FeatureStore::new(b, ItdConfig::default());
    let measured = MeasurementSubset::new(vec![0, 1], b.grid().len()).unwrap();
    let validation: Vec<String> = validation.iter().map(|s| s.to_string()).collect();
    let targets: Vec<String> = f.training.iter().chain(&validation).cloned().collect();
    let plan = RetrievalPlan::build(&store, &targets, &f.pool, measured, RetrievalCriterion::ITD, f.model.config().k).unwrap();
    let setup = PretrainSetup {
        store: &store,
        model: &f.model,
        training: f.training.clone(),
        validation,
        plan: &plan,
        config: cfg,
    };
    pretrain(&setup, state, &mut |_, _| Ok(())).unwrap()
}

#[test]
fn overfits_one_subject() {
    let b = bundle(2, GridSpec::Horizontal(4));
    let f = fixture(1, &["P0001"], &["P0002"], 0);
    let cfg = TrainConfig {
        pretrain_epochs: 200,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let state = run_pretrain(&b, &f, &cfg, TrainState::new(f.params.clone(), &cfg));
    let first = state.history[0].train_loss;
    let last = state.history.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    // lr never increases
    assert!(state.history.windows(2).all(|w| w[1].lr <= w[0].lr));
}

#[test]
fn pretraining_is_deterministic_and_resumable() {
    let b = bundle(4, GridSpec::Octahedron);
    let f = fixture(2, &["P0001", "P0002", "P0003"], &["P0001", "P0002", "P0003", "P0004"], 3);
    let cfg = TrainConfig {
        pretrain_epochs: 4,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = run_pretrain(&b, &f, &cfg, TrainState::new(f.params.clone(), &cfg));
    let again = run_pretrain(&b, &f, &cfg, TrainState::new(f.params.clone(), &cfg));
    assert_eq!(a.params, again.params);

    let half = TrainConfig {
        pretrain_epochs: 2,
        ..cfg.clone()
    };
    let partial = run_pretrain(&b, &f, &half, TrainState::new(f.params.clone(), &cfg));
    let dir = tempfile::tempdir().unwrap();
    partial.save(dir.path()).unwrap();
    let resumed = run_pretrain(&b, &f, &cfg, TrainState::load(dir.path()).unwrap());
    assert_eq!(resumed.params, a.params);
    assert_eq!(resumed.best, a.best);
    assert_eq!(resumed.history, a.history);
    assert_eq!(resumed.lr, a.lr);
}

#[test]
fn validation_adapts_on_the_measured_directions() {
    let b = bundle(4, GridSpec::Octahedron);
    let f = fixture(2, &["P0001", "P0002", "P0003"], &["P0001", "P0002", "P0003"], 3);
    let cfg = TrainConfig {
        pretrain_epochs: 3,
        batch_size: 4,
        val_adapt_epochs: 5,
        ..TrainConfig::default()
    };
    let generic = TrainConfig {
        val_adapt_epochs: 0,
        ..cfg.clone()
    };
    let a = run_pretrain_validated(&b, &f, &cfg, TrainState::new(f.params.clone(), &cfg), &["P0004"]);
    let g = run_pretrain_validated(&b, &f, &generic, TrainState::new(f.params.clone(), &cfg), &["P0004"]);
    // validation never feeds the shared weights
    assert_eq!(a.params, g.params);
    assert!(a.history.iter().zip(&g.history).all(|(x, y)| x.val_loss != y.val_loss));
    // validation subjects get no vectors in the trained model
    assert!(!a.best.subjects(true).contains(&"P0004".to_string()));

    let half = TrainConfig {
        pretrain_epochs: 1,
        ..cfg.clone()
    };
    let partial = run_pretrain_validated(&b, &f, &half, TrainState::new(f.params.clone(), &cfg), &["P0004"]);
    let dir = tempfile::tempdir().unwrap();
    partial.save(dir.path()).unwrap();
    let resumed = run_pretrain_validated(&b, &f, &cfg, TrainState::load(dir.path()).unwrap(), &["P0004"]);
    assert_eq!(resumed.history, a.history);
    assert_eq!(resumed.best, a.best);
}

fn adaptation_inputs(b: &HrirBundle) -> (TargetMeasurements, Vec<String>) {
    let measured = MeasurementSubset::new(vec![0, 5, 17], b.grid().len()).unwrap();
    let m = TargetMeasurements::from_set(b.subject("P0006").unwrap(), &measured, &ItdConfig::default()).unwrap();
    let pool: Vec<String> = (1..=5).map(|i| format!("P{i:04}")).collect();
    (m, pool)
}

#[test]
fn adaptation_only_touches_target_vectors() {
    let b = bundle(6, GridSpec::Icosphere(1));
    let (m, pool) = adaptation_inputs(&b);
    let ids: Vec<&str> = pool.iter().map(String::as_str).collect();
    let f = fixture(3, &ids, &ids, 5);
    let store = FeatureStore::new(&b, ItdConfig::default());
    let r = retrieve_topk(&store, &m, &pool, 3, RetrievalCriterion::ITD).unwrap();
    let cfg = TrainConfig {
        adapt_epochs: 40,
        ..TrainConfig::default()
    };
    let out = adapt(&f.model, &f.params, &store, &m, &r, &cfg).unwrap();
    // every pre-existing parameter is bit-identical
    for (id, p) in f.params.iter() {
        let q = out.params.param(id);
        assert_eq!(q.name, p.name);
        let same = p.value.iter().zip(&q.value).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{} changed", p.name);
    }
    let added: Vec<_> = out.params.iter().skip(f.params.len()).map(|(_, p)| p.role.clone()).collect();
    assert!(!added.is_empty());
    assert!(added.iter().all(|r| *r == ParamRole::Target("P0006".into())));
    // the fit improves on the measured directions
    assert!(out.losses.last().unwrap() < &out.losses[0], "{:?}", out.losses);
}

#[test]
fn zero_epoch_adaptation_is_the_generic_model() {
    let b = bundle(6, GridSpec::Icosphere(1));
    let (m, pool) = adaptation_inputs(&b);
    let ids: Vec<&str> = pool.iter().map(String::as_str).collect();
    let f = fixture(2, &[], &ids, 6);
    let store = FeatureStore::new(&b, ItdConfig::default());
    let r = retrieve_topk(&store, &m, &pool, 2, RetrievalCriterion::LSD).unwrap();
    let cfg = TrainConfig {
        adapt_epochs: 0,
        ..TrainConfig::default()
    };
    let out = adapt(&f.model, &f.params, &store, &m, &r, &cfg).unwrap();
    assert_eq!(out.losses.len(), 1);
    let dirs: Vec<usize> = (0..b.grid().len()).collect();
    let pc = PredictConfig::default();
    let adapted = predict_subject(&f.model, &out.params, &store, "P0006", &r, &dirs, &pc).unwrap();
    let generic = predict_subject(&f.model, &f.params, &store, "P0006", &r, &dirs, &pc).unwrap();
    assert_eq!(adapted, generic);
}

#[test]
fn adaptation_rejects_bad_inputs() {
    let b = bundle(6, GridSpec::Icosphere(1));
    let (m, pool) = adaptation_inputs(&b);
    let f = fixture(2, &[], &["P0001"], 7);
    let store = FeatureStore::new(&b, ItdConfig::default());
    let r = retrieve_topk(&store, &m, &pool, 2, RetrievalCriterion::ITD).unwrap();
    // retrieved subjects without vectors
    assert!(adapt(&f.model, &f.params, &store, &m, &r, &TrainConfig::default()).is_err());
    let empty = TargetMeasurements {
        subset: MeasurementSubset::new(vec![], b.grid().len()).unwrap(),
        hrirs: vec![],
        features: vec![],
        ..m.clone()
    };
    assert!(adapt(&f.model, &f.params, &store, &empty, &r, &TrainConfig::default()).is_err());
}
