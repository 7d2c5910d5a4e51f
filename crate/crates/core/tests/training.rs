use t4t_core::config::{ModelSize, RunConfig};
use t4t_core::gradcheck::{model_check, op_suite, relative_error, TOLERANCE};
use t4t_core::synth::{generate_dataset, ClassSets};
use t4t_core::train::{evaluate, poly_lr, train, EpochLog, HeadSchedule, Sample};
use t4t_core::Model32;

fn toy_samples(n: usize, seed: u64) -> Vec<Sample<f32>> {
    let classes = ClassSets::toy();
    let (scenes, _) = generate_dataset(n, seed, 32, &classes).unwrap();
    scenes.iter().map(|s| Sample::from_scene(s, &classes)).collect()
}

fn strip_time(logs: &[EpochLog]) -> Vec<EpochLog> {
    logs.iter().cloned().map(|l| EpochLog { wall_time_ms: 0.0, ..l }).collect()
}

#[test]
fn every_op_passes_finite_differences() {
    let checks = op_suite(3).unwrap();
    assert!(checks.len() >= 20);
    for c in &checks {
        assert!(c.entries > 0, "{} checked nothing", c.name);
        assert!(c.passed(), "{}: {:.3e} at {}", c.name, c.max_rel_error, c.worst);
    }
}

#[test]
fn toy_model_passes_finite_differences() {
    let c = model_check(5, 2).unwrap();
    assert!(c.passed(), "{:.3e} at {}", c.max_rel_error, c.worst);
}

#[test]
fn relative_error_has_an_absolute_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!(relative_error(1e-10, 2e-10) < TOLERANCE);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
}

#[test]
fn poly_schedule_endpoints() {
    assert_eq!(poly_lr(1e-4, 0, 100, 0.9), 1e-4);
    assert_eq!(poly_lr(1e-4, 100, 100, 0.9), 0.0);
    let mid = poly_lr(1.0, 50, 100, 0.9);
    assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-12);
}

#[test]
fn training_is_seeded_and_lowers_the_loss() {
    let data = toy_samples(8, 1);
    let mut cfg = RunConfig::preset(ModelSize::Toy);
    cfg.train.epochs = 12;
    let run = || {
        let mut model = Model32::new(&cfg.model, cfg.train.seed).unwrap();
        let logs = train(&mut model, &data, &cfg.train, |_| {}).unwrap();
        (model, logs)
    };
    let (model, a) = run();
    let (_, b) = run();
    assert_eq!(strip_time(&a), strip_time(&b));
    assert_eq!(a.len(), 12);
    assert!(a.last().unwrap().loss < 0.7 * a[0].loss, "{} -> {}", a[0].loss, a.last().unwrap().loss);
    assert!(a.iter().all(|l| l.trans.is_some()));

    let cms = evaluate(&model, &data).unwrap();
    assert_eq!(cms.len(), 2);
    assert_eq!(cms[0].total(), 8 * 32 * 32);
}

#[test]
fn alternate_schedule_and_single_head_train() {
    let data = toy_samples(4, 2);
    let mut cfg = RunConfig::preset(ModelSize::Toy);
    cfg.train.epochs = 2;
    cfg.train.head_schedule = HeadSchedule::Alternate;
    let mut model = Model32::new(&cfg.model, 0).unwrap();
    assert_eq!(train(&mut model, &data, &cfg.train, |_| {}).unwrap().len(), 2);

    let single = cfg.model.clone().single_head();
    let mut model = Model32::new(&single, 0).unwrap();
    let logs = train(&mut model, &data, &cfg.train, |_| {}).unwrap();
    assert!(logs.iter().all(|l| l.trans.is_none()));
}

#[test]
fn empty_or_invalid_runs_are_rejected() {
    let cfg = RunConfig::preset(ModelSize::Toy);
    let mut model = Model32::new(&cfg.model, 0).unwrap();
    assert!(train(&mut model, &[], &cfg.train, |_| {}).is_err());
    let mut bad = cfg.train.clone();
    bad.batch_size = 0;
    assert!(train(&mut model, &toy_samples(1, 0), &bad, |_| {}).is_err());
}
