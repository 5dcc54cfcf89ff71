use advtta::augment::CorruptionSpec;
use advtta::data::{generate_synthetic_dataset, preprocess_samples, LabelMap, PreprocessSpec, Sample, SplitSets, SynthConfig};
use advtta::diagnostics::LossTrace;
use advtta::eval::mean_foreground_dice;
use advtta::models::{Model, Pass};
use advtta::run::{RunDir, RunManifest};
use advtta::training::{train, train_dae, DaeTrainConfig, TrainConfig, TRACE_FILE};
use advtta_tensor::{Tape, Tensor};

fn cohort(n_patients: usize, hw: (usize, usize), seed: u64) -> Vec<Sample> {
    let raw = generate_synthetic_dataset(&SynthConfig::new(n_patients, hw, seed)).unwrap();
    let spec = PreprocessSpec { target_spacing_mm: (1.51, 1.51), target_hw: hw };
    preprocess_samples(&raw, &spec).unwrap().0
}

/// 24 annotated slices, a few unpaired and validation slices.
fn small_sets() -> SplitSets {
    let all = cohort(8, (32, 32), 3);
    assert!(all.len() >= 34, "{} slices", all.len());
    SplitSets {
        train_annotated: all[..24].to_vec(),
        train_unpaired: all[24..30].iter().cloned().map(Sample::unlabeled).collect(),
        val: all[30..34].to_vec(),
        test: Vec::new(),
    }
}

fn tiny(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 6,
        unet_depth: 2,
        unet_base_filters: 4,
        disc_filters: vec![4, 4, 8, 8, 8],
        max_steps_per_epoch: Some(2),
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_smoke_writes_two_checkpoints_and_one_trace_row() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunDir::at(dir.path()).unwrap();
    let (state, manifest) = train(&small_sets(), &tiny(1), 0, &run).unwrap();
    assert_eq!(manifest.checkpoints.len(), 2);
    for p in manifest.checkpoints.values() {
        assert!(run.join(p).is_file());
    }
    assert_eq!(LossTrace::read_csv(&run.join(TRACE_FILE)).unwrap().len(), 1);
    assert_eq!(state.trace.len(), 1);
    assert_eq!(RunManifest::load(&RunDir::open(dir.path()).unwrap()).unwrap(), manifest);
    let c = &state.counters;
    assert_eq!((c.supervised_steps, c.discriminator_steps, c.adversarial_steps), (2, 2, 2));
    assert_eq!(c.real_masks_seen, 12);
    assert_eq!(c.predicted_masks_seen, 12);
    assert_eq!(c.corrupted_masks_seen, 12);
}

#[test]
fn disabled_fake_anchors_never_feed_corrupted_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { fake_anchors_on: false, ..tiny(2) };
    let (state, manifest) = train(&small_sets(), &cfg, 0, &RunDir::at(dir.path()).unwrap()).unwrap();
    assert_eq!(state.counters.corrupted_masks_seen, 0);
    assert_eq!(manifest.counters["corrupted_masks_seen"], 0);
    assert!(state.counters.predicted_masks_seen > 0);
}

#[test]
fn zero_adversarial_weight_is_the_plain_unet_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { adversarial_weight: 0.0, smoothness_on: false, fake_anchors_on: false, ..tiny(2) };
    let (state, _) = train(&small_sets(), &cfg, 0, &RunDir::at(dir.path()).unwrap()).unwrap();
    let c = &state.counters;
    assert_eq!((c.supervised_steps, c.discriminator_steps, c.adversarial_steps), (4, 0, 0));
    assert_eq!(c.real_masks_seen + c.predicted_masks_seen + c.corrupted_masks_seen, 0);
}

#[test]
fn training_is_deterministic_per_seed() {
    let sets = small_sets();
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let (s, _) = train(&sets, &tiny(2), seed, &RunDir::at(dir.path()).unwrap()).unwrap();
        (s.trace.to_csv(), s.segmentor.state_hash(), s.discriminator.state_hash())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.1, run(6).1);
}

#[test]
fn best_validation_loss_is_the_minimum_of_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (state, _) = train(&small_sets(), &tiny(3), 1, &RunDir::at(dir.path()).unwrap()).unwrap();
    let min = state.trace.rows.iter().map(|r| r.seg_val_ce).fold(f64::INFINITY, f64::min);
    assert_eq!(state.best_val_loss, min);
    assert_eq!(state.trace.rows[state.best_epoch].seg_val_ce, min);
}

fn masks(samples: &[Sample]) -> Vec<LabelMap> {
    samples.iter().map(|s| s.label.clone().unwrap()).collect()
}

fn dae_cfg(epochs: usize) -> DaeTrainConfig {
    DaeTrainConfig {
        lr: 1e-3,
        batch_size: 4,
        max_epochs: epochs,
        early_stop_patience: 20,
        filters: vec![8, 16, 32, 64, 128],
        max_steps_per_epoch: None,
    }
}

fn reconstruct(dae: &advtta::models::Dae, y: &LabelMap) -> LabelMap {
    let tape = Tape::new();
    let x = Tensor::stack(&[y.to_tensor()]);
    let out = dae.forward(&tape, tape.constant(x), Pass::FROZEN).unwrap();
    LabelMap::from_tensor(&out.value().select(0), y.class_names.clone()).unwrap().harden()
}

#[test]
fn identity_corruption_learns_near_autoencoding() {
    let all = cohort(10, (32, 32), 4);
    let (train_m, held) = all.split_at(all.len() * 3 / 4);
    let out = train_dae(&masks(train_m), &masks(held), &CorruptionSpec::identity(), &dae_cfg(120), 0, None).unwrap();
    assert!(out.best_val_ce <= 0.05, "held-out reconstruction ce {}", out.best_val_ce);
}

#[test]
fn trained_dae_recovers_corrupted_held_out_masks() {
    let all = cohort(10, (32, 32), 5);
    let (train_m, held) = all.split_at(all.len() * 3 / 4);
    let spec = CorruptionSpec::default();
    let out = train_dae(&masks(train_m), &masks(held), &spec, &dae_cfg(120), 0, None).unwrap();
    let mut rng = advtta::rng::rng_from(9, &[advtta::rng::Part::from("held-out")]);
    let mut total = 0.0;
    let held = masks(held);
    for y in &held {
        let noisy = advtta::augment::corrupt_mask(y, &spec, &mut rng).unwrap();
        total += mean_foreground_dice(&reconstruct(&out.dae, &noisy), y).unwrap();
    }
    let dice = total / held.len() as f64;
    assert!(dice >= 0.85, "mean Dice of DAE reconstruction {dice}");
}
