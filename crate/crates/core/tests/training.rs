use capsroute::data::{synth_generate, AugmentConfig, Sample};
use capsroute::model::{preset, Model};
use capsroute::train::{
    cross_validate, cross_validate_folds, load_checkpoint, train, MetricsLog, Schedule, TrainConfig,
};
use capsroute::Error;

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    synth_generate(n, 16, 16, seed).unwrap()
}

fn tiny(seed: u64) -> Model<f32> {
    Model::build(preset("segcaps-tiny").unwrap(), seed).unwrap()
}

fn quick_config(iterations: usize) -> TrainConfig {
    let mut c = TrainConfig {
        max_iterations: iterations,
        seed: 4,
        ..TrainConfig::default()
    };
    c.schedule.validate_every = 10;
    c
}

#[test]
fn zero_iterations_returns_the_initial_model() {
    let data = samples(2, 1);
    let model = tiny(3);
    let mut log = MetricsLog::new();
    let out = train(model.clone(), &data, &data, &quick_config(0), &mut log, None).unwrap();
    assert_eq!(out.iterations, 0);
    assert_eq!(out.model, model);
    assert!(log.values("loss").is_empty());
}

#[test]
fn overfits_a_single_sample() {
    let data = samples(1, 2);
    let mut config = quick_config(250);
    config.adam.learning_rate = 1e-2;
    config.augment = AugmentConfig::disabled();
    let mut log = MetricsLog::new();
    let out = train(tiny(0), &data, &data, &config, &mut log, None).unwrap();
    assert!(out.best_dice.unwrap() >= 0.95, "{:?}", out.best_dice);
    let losses = log.values("loss");
    assert_eq!(losses.len(), 250);
    assert!(losses.last().unwrap().1 < 0.5 * losses[0].1);
    assert_eq!(log.values("val_dice").len(), 25);
}

#[test]
fn seeded_runs_are_bitwise_reproducible() {
    let data = samples(4, 3);
    let run = |seed: u64| {
        let mut log = MetricsLog::new();
        let config = TrainConfig {
            seed,
            ..quick_config(15)
        };
        let out = train(tiny(1), &data[..3], &data[3..], &config, &mut log, None).unwrap();
        (out.model, log.to_text())
    };
    let (m1, l1) = run(7);
    let (m2, l2) = run(7);
    assert_eq!(l1, l2);
    for (a, b) in m1.params().iter().zip(m2.params()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let (_, l3) = run(8);
    assert_ne!(l1, l3);
}

#[test]
fn best_checkpoint_is_written_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.sgcp");
    let data = samples(3, 4);
    let mut log = MetricsLog::new();
    let out = train(tiny(2), &data[..2], &data[2..], &quick_config(30), &mut log, Some(&path)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.model);
    assert!(out.best_iteration.is_some());
}

#[test]
fn early_stopping_respects_patience() {
    let data = samples(2, 5);
    let mut config = quick_config(1000);
    config.adam.learning_rate = 1e-12;
    config.schedule = Schedule {
        plateau: 20,
        patience: 20,
        validate_every: 10,
        ..Schedule::default()
    };
    let mut log = MetricsLog::new();
    let out = train(tiny(0), &data, &data, &config, &mut log, None).unwrap();
    assert!(out.stopped_early);
    let best = out.best_iteration.unwrap();
    assert!(out.iterations >= best + 20 && out.iterations < 1000, "{out:?}");
}

#[test]
fn exploding_updates_are_reported_as_divergence() {
    let data = samples(2, 6);
    let mut config = quick_config(50);
    config.adam.learning_rate = 1e30;
    let mut log = MetricsLog::new();
    match train(tiny(0), &data, &data, &config, &mut log, None) {
        Err(Error::Diverged { iteration, .. }) => assert!(iteration <= 50),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.iterations)),
    }
}

#[test]
fn cross_validation_writes_every_fold() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(6, 7);
    let config = preset("segcaps-tiny").unwrap();
    let mut seen = Vec::new();
    let cv = cross_validate(&config, &data, 3, &quick_config(10), Some(dir.path()), |f| seen.push(f.fold)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(cv.folds.len(), 3);
    let mut d: Vec<f64> = cv.folds.iter().map(|f| f.dice).collect();
    d.sort_by(f64::total_cmp);
    assert_eq!(cv.median_dice, d[1]);
    for i in 0..3 {
        for ext in ["sgcp", "cfg", "log"] {
            assert!(dir.path().join(format!("fold{i}.{ext}")).exists());
        }
    }

    let only = cross_validate_folds(&config, &data, 3, &[1], &quick_config(10), None, |_| {}).unwrap();
    assert_eq!(only.folds, vec![cv.folds[1].clone()]);
    assert!(cross_validate_folds(&config, &data, 3, &[3], &quick_config(10), None, |_| {}).is_err());
    assert!(cross_validate(&config, &data, 7, &quick_config(10), None, |_| {}).is_err());
    assert!(cross_validate(&config, &[], 1, &quick_config(10), None, |_| {}).is_err());
}
