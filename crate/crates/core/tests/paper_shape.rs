use nerf_gaze::camera::{CameraSpec, Intrinsics};
use nerf_gaze::datagen::{ToySceneParams, ORBIT_DISTANCE};
use nerf_gaze::encodings::{FaceLatent, GazeVector};
use nerf_gaze::model::{forward, ModelConfig, Networks};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn paper_shape_forward_emits_the_documented_shapes() {
    let cfg = ModelConfig::paper_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let nets = Networks::<f32>::init(&cfg, &mut rng);
    let camera = CameraSpec::orbit(0.0, 0.0, ORBIT_DISTANCE, Intrinsics::default()).with_bounds(1.0, 3.5);
    let latent = FaceLatent::zeros(&cfg.latent);
    let eyes = ToySceneParams::default().eye_geometry();
    let (out, cache) = forward(&cfg, &nets, &camera, &latent, &GazeVector::forward(), &eyes, false).unwrap();
    assert!(cache.is_none());
    assert_eq!(out.global.density.dim(), (64, 64));
    assert_eq!(out.global.features.dim(), (256, 64, 64));
    assert_eq!(out.face.features.dim(), (256, 64, 64));
    assert_eq!(out.image.dim(), (3, 512, 512));
    assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
}
