use nerf_gaze::cli::default_toy_spec;
use nerf_gaze::datagen::{write_toy_dataset, ToyDatasetSpec, ToySceneParams};
use nerf_gaze::model::{ModelBundle, Networks};
use nerf_gaze::nn::flatten;
use nerf_gaze::trainer::{train, windowed_means, Dataset, TrainConfig};
use nerf_gaze::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(spec: &ToyDatasetSpec) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(spec, dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    (dir, data)
}

#[test]
fn one_step_moves_every_network_and_is_seeded() {
    let (_d, data) = toy(&default_toy_spec(64));
    let cfg = TrainConfig {
        steps: 1,
        ..Default::default()
    };
    let out = train(&cfg, &data, &mut |_| {}).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = ModelBundle::<f32>::new(cfg.model_config(), data.zero_latents(&cfg.model_config()), &mut rng).unwrap();
    let (a, b) = (flatten(&init.networks), flatten(&out.bundle.networks));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    assert_eq!(out.history.len(), 1);

    let again = train(&cfg, &data, &mut |_| {}).unwrap();
    assert_eq!(again.bundle, out.bundle);
}

#[test]
fn loss_history_is_reproducible_and_decreasing() {
    let (_d, data) = toy(&default_toy_spec(64));
    let cfg = TrainConfig {
        steps: 30,
        seed: 11,
        ..Default::default()
    };
    let a = train(&cfg, &data, &mut |_| {}).unwrap();
    let b = train(&cfg, &data, &mut |_| {}).unwrap();
    let bits = |h: &[nerf_gaze::trainer::LossRecord]| h.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    let (first, last) = windowed_means(&a.history, 5);
    assert!(last < first, "{first} -> {last}");
    assert!(a.history.iter().all(|r| (r.rec + r.per - r.total).abs() <= 1e-12 * r.total.abs()));
}

#[test]
fn subjects_outside_the_batch_keep_their_codes() {
    let mut spec = ToyDatasetSpec::grid(&[(0.0, 0.0)], &[(0.0, 0.0)], 64, 64);
    spec.subjects.push(ToySceneParams::for_subject(3));
    let mut second = spec.frames[0];
    second.subject = 1;
    spec.frames.push(second);
    let (_d, data) = toy(&spec);
    let cfg = TrainConfig {
        steps: 1,
        batch_frames: 1,
        ..Default::default()
    };
    let out = train(&cfg, &data, &mut |_| {}).unwrap();
    let moved: Vec<bool> = out
        .bundle
        .latents
        .subjects
        .values()
        .map(|s| s.identity.iter().chain(&s.texture).any(|&v| v != 0.0))
        .collect();
    assert_eq!(moved.iter().filter(|&&m| m).count(), 1, "{moved:?}");
    let frames_moved = out
        .bundle
        .latents
        .frames
        .values()
        .filter(|f| f.expression.iter().chain(&f.illumination).any(|&v| v != 0.0))
        .count();
    assert_eq!(frames_moved, 1);
}

#[test]
fn bad_configs_and_resolutions_are_rejected() {
    let (_d, data) = toy(&ToyDatasetSpec::grid(&[(0.0, 0.0)], &[(0.0, 0.0)], 32, 32));
    let cfg = TrainConfig {
        steps: 1,
        ..Default::default()
    };
    assert!(matches!(train(&cfg, &data, &mut |_| {}), Err(Error::Shape { .. })));
    for bad in [
        TrainConfig { steps: 0, ..cfg.clone() },
        TrainConfig { lr_network: 0.0, ..cfg.clone() },
        TrainConfig { lr_latent: -1.0, ..cfg.clone() },
    ] {
        assert!(matches!(train(&bad, &data, &mut |_| {}), Err(Error::Config(_))));
    }
    let err = TrainConfig::from_toml("steps = 5\nbogus = 1\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    assert_eq!(TrainConfig::from_toml("steps = 5").unwrap().steps, 5);
}

#[test]
fn zero_networks_have_the_init_layout() {
    let cfg = TrainConfig::default().model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = flatten(&Networks::<f32>::zeros(&cfg)).len();
    let b = flatten(&Networks::<f32>::init(&cfg, &mut rng)).len();
    assert_eq!(a, b);
}
