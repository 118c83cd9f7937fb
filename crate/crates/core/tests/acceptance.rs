//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Criteria 4, 6 and 7 share one toy dataset and
//! the full-loss training run.

use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use nerf_gaze::camera::{CameraSpec, Intrinsics, RayBundle};
use nerf_gaze::checkpoint::{load_checkpoint, save_checkpoint};
use nerf_gaze::cli::default_toy_spec;
use nerf_gaze::datagen::{write_toy_dataset, ToySceneParams, ORBIT_DISTANCE};
use nerf_gaze::decoder::{Decoder, DecoderConfig};
use nerf_gaze::encodings::{Attribute, FaceLatent, GazeVector};
use nerf_gaze::eval::{gaze_grid, global_locality_violations, leakage_summary, masked_psnr, psnr_summary, redirection_errors, EvalConfig};
use nerf_gaze::field::{DensityActivation, FieldCodes, FieldConfig, FieldVariant, ImplicitField};
use nerf_gaze::losses::{total_loss, total_loss_with_grad, LossConfig, Masks, SeededConvExtractor};
use nerf_gaze::merge::{merge_features, MergeConfig};
use nerf_gaze::model::{backward, forward, render_full, ModelBundle, ModelConfig, Networks};
use nerf_gaze::nn::{flatten, uniform_matrix, unflatten, Parameters};
use nerf_gaze::regressor::{EyeCodeRegressor, RegressorConfig};
use nerf_gaze::trainer::{train, Dataset, LossRecord, TrainConfig};
use nerf_gaze::volume::{render_feature_map, FeatureMap, FieldQuery, SamplingConfig};
use nerf_gaze::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_array3(rng: &mut ChaCha8Rng, dims: (usize, usize, usize), gain: f64) -> Array3<f64> {
    uniform_matrix::<f64, _>(dims.0, dims.1 * dims.2, gain, rng)
        .into_shape_with_order(dims)
        .unwrap()
}

// ---------------------------------------------------------------- 1

fn shape_contract() -> Result<Verdict> {
    let t = Instant::now();
    let cfg = ModelConfig::paper_shape();
    let nets = Networks::<f32>::init(&cfg, &mut rng(1));
    let camera = CameraSpec::orbit(5.0, 3.0, ORBIT_DISTANCE, Intrinsics::default()).with_bounds(1.0, 3.5);
    let eyes = ToySceneParams::default().eye_geometry();
    let (out, _) = forward(&cfg, &nets, &camera, &FaceLatent::zeros(&cfg.latent), &GazeVector::forward(), &eyes, false)?;
    let secs = t.elapsed().as_secs_f64();
    let d = out.global.density.dim();
    let f = out.global.features.dim();
    let i = out.image.dim();
    let ok = d == (64, 64) && f == (256, 64, 64) && i == (3, 512, 512) && secs < 60.0;
    Ok(verdict(ok, format!("F_d 1x{}x{}, F_f {}x{}x{}, image {}x{}x{}, {secs:.1} s", d.0, d.1, f.0, f.1, f.2, i.0, i.1, i.2)))
}

// ---------------------------------------------------------------- 2

/// Layered density along the ray depth, each layer with its own feature.
struct Slabs {
    /// `(start, end, sigma, feature)` in ray depth.
    layers: Vec<(f64, f64, f64, f64)>,
}

impl FieldQuery<f64> for Slabs {
    fn feature_dim(&self) -> usize {
        1
    }
    fn query(&self, points: &[[f64; 3]]) -> Result<(Array1<f64>, Array2<f64>)> {
        let mut sigma = Array1::zeros(points.len());
        let mut feat = Array2::zeros((points.len(), 1));
        for (k, p) in points.iter().enumerate() {
            for &(a, b, s, f) in &self.layers {
                if p[2] >= a && p[2] < b {
                    sigma[k] = s;
                    feat[[k, 0]] = f;
                }
            }
        }
        Ok((sigma, feat))
    }
}

/// Closed-form opacity and feature of non-overlapping constant slabs.
fn slab_oracle(layers: &[(f64, f64, f64, f64)]) -> (f64, f64) {
    let (mut trans, mut feat) = (1.0, 0.0);
    for &(a, b, s, f) in layers {
        let alpha = 1.0 - (-s * (b - a)).exp();
        feat += trans * alpha * f;
        trans *= 1.0 - alpha;
    }
    (1.0 - trans, feat)
}

fn renderer_oracles() -> Result<Verdict> {
    let (near, far, ns) = (1.0, 3.5, 64);
    let delta = (far - near) / ns as f64;
    let rays = RayBundle {
        height: 1,
        width: 1,
        origins: vec![[0.0; 3]],
        directions: vec![[0.0, 0.0, 1.0]],
        near,
        far,
    };
    let sampling = SamplingConfig {
        samples_per_ray: ns,
        ..SamplingConfig::default()
    };
    let edge = |k: usize| near + k as f64 * delta;
    let cases: Vec<Vec<(f64, f64, f64, f64)>> = vec![
        vec![(near, far, 0.8, 0.7)],
        vec![(near, far, 3.0, -1.2)],
        vec![(edge(16), edge(40), 2.5, 1.0)],
        vec![(edge(8), edge(20), 0.9, 0.3), (edge(20), edge(52), 4.0, -0.5)],
    ];
    let mut worst: f64 = 0.0;
    for layers in &cases {
        let map = render_feature_map(&rays, &Slabs { layers: layers.clone() }, &sampling)?;
        let (op, f) = slab_oracle(layers);
        worst = worst.max((map.density[[0, 0]] - op).abs()).max((map.features[[0, 0, 0]] - f).abs());
    }

    let mut r = rng(21);
    let cfg = MergeConfig::default();
    let mut merge_worst: f64 = 0.0;
    for trial in 0..20 {
        let (c, h, w) = (3, 4, 5);
        let maps: Vec<FeatureMap<f64>> = (0..3)
            .map(|b| {
                let mut density = uniform_matrix::<f64, _>(h, w, 1.0, &mut r).mapv(f64::abs);
                if b > 0 && trial % 2 == 0 {
                    density[[0, 0]] = 0.0;
                }
                FeatureMap {
                    density,
                    features: random_array3(&mut r, (c, h, w), 2.0),
                }
            })
            .collect();
        let merged = merge_features(&maps[0], &maps[1], &maps[2], &cfg)?;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut num = 0.0;
                    let mut omega = 0.0;
                    for m in &maps {
                        num += m.features[[ch, i, j]] * m.density[[i, j]];
                        omega += m.density[[i, j]];
                    }
                    let want = num / omega.max(cfg.epsilon);
                    let got = merged.features[[ch, i, j]];
                    merge_worst = merge_worst.max((got - want).abs() / want.abs().max(1e-300));
                }
            }
        }
    }
    Ok(verdict(
        worst <= 1e-3 && merge_worst <= 1e-12,
        format!("renderer max abs err {worst:.2e} (<= 1e-3), merge max rel err {merge_worst:.2e} (<= 1e-12)"),
    ))
}

// ---------------------------------------------------------------- 3

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

/// Worst relative error over every `stride`-th parameter.
fn check_params<P: Parameters<f64> + Clone>(p: &P, analytic: &P, stride: usize, h: f64, loss: &dyn Fn(&P) -> f64) -> f64 {
    let flat = flatten(p);
    let g = flatten(analytic);
    let mut worst: f64 = 0.0;
    for idx in (0..flat.len()).step_by(stride) {
        let mut q = p.clone();
        let mut f = flat.clone();
        f[idx] += h;
        unflatten(&mut q, &f);
        let up = loss(&q);
        f[idx] -= 2.0 * h;
        unflatten(&mut q, &f);
        let down = loss(&q);
        worst = worst.max(rel_err((up - down) / (2.0 * h), g[idx]));
    }
    worst
}

/// Same, over the entries of a plain array input.
fn check_input<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    analytic: &ndarray::Array<f64, D>,
    h: f64,
    loss: &dyn Fn(&ndarray::Array<f64, D>) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &an) in analytic.iter().enumerate() {
        let mut p = x.clone();
        p.as_slice_mut().unwrap()[k] += h;
        let mut m = x.clone();
        m.as_slice_mut().unwrap()[k] -= h;
        worst = worst.max(rel_err((loss(&p) - loss(&m)) / (2.0 * h), an));
    }
    worst
}

fn field_gradients() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for variant in [FieldVariant::Face, FieldVariant::Eye] {
        let eye = variant == FieldVariant::Eye;
        let cfg = FieldConfig {
            variant,
            hidden_width: 16,
            depth: 3,
            feature_dim: 5,
            density_activation: DensityActivation::Softplus,
            position_dim: 9,
            shape_dim: 4,
            appearance_dim: 3,
            gaze_dim: if eye { 6 } else { 0 },
        };
        let mut r = rng(31);
        let field = ImplicitField::<f64>::init(cfg, &mut r);
        let points = uniform_matrix::<f64, _>(7, 9, 1.5, &mut r);
        let shape = uniform_matrix::<f64, _>(1, 4, 1.0, &mut r).row(0).to_owned();
        let app = uniform_matrix::<f64, _>(1, 3, 1.0, &mut r).row(0).to_owned();
        let gaze = uniform_matrix::<f64, _>(1, 6, 1.0, &mut r).row(0).to_owned();
        let wd = uniform_matrix::<f64, _>(1, 7, 1.0, &mut r).row(0).to_owned();
        let wf = uniform_matrix::<f64, _>(7, 5, 1.0, &mut r);
        let loss = |f: &ImplicitField<f64>, s: &Array1<f64>, a: &Array1<f64>, g: &Array1<f64>| {
            let codes = FieldCodes {
                shape: s.view(),
                appearance: a.view(),
                gaze: eye.then(|| g.view()),
            };
            let out = f.forward(points.view(), codes).unwrap();
            (&out.density * &wd).sum() + (&out.features * &wf).sum()
        };
        let codes = FieldCodes {
            shape: shape.view(),
            appearance: app.view(),
            gaze: eye.then(|| gaze.view()),
        };
        let (_, cache) = field.forward_cached(points.view(), codes)?;
        let mut grad = ImplicitField::zeros(cfg);
        let cg = field.backward(points.view(), &cache, wd.view(), wf.view(), &mut grad);
        let h = 1e-5;
        worst = worst.max(check_params(&field, &grad, 3, h, &|f| loss(f, &shape, &app, &gaze)));
        worst = worst.max(check_input(&shape, &cg.shape, h, &|s| loss(&field, s, &app, &gaze)));
        worst = worst.max(check_input(&app, &cg.appearance, h, &|a| loss(&field, &shape, a, &gaze)));
        if let Some(dg) = &cg.gaze {
            worst = worst.max(check_input(&gaze, dg, h, &|g| loss(&field, &shape, &app, g)));
        }
    }
    Ok(worst)
}

fn regressor_gradients() -> Result<f64> {
    let mut r = rng(32);
    let cfg = RegressorConfig {
        hidden_width: 6,
        depth: 2,
        input_dim: 5,
        output_dim: 3,
    };
    let reg = EyeCodeRegressor::<f64>::init(cfg.clone(), &mut r);
    let x = uniform_matrix::<f64, _>(4, 5, 1.0, &mut r);
    let probe = uniform_matrix::<f64, _>(4, 6, 1.0, &mut r);
    let loss = |g: &EyeCodeRegressor<f64>, x: &Array2<f64>| (g.forward_cached(x.view()).unwrap().0 * &probe).sum();
    let (_, cache) = reg.forward_cached(x.view())?;
    let mut grad = EyeCodeRegressor::zeros(cfg);
    let dx = reg.backward(&cache, probe.view(), &mut grad);
    let h = 1e-6;
    Ok(check_params(&reg, &grad, 1, h, &|g| loss(g, &x)).max(check_input(&x, &dx, h, &|v| loss(&reg, v))))
}

fn loss_gradients() -> Result<f64> {
    let mut r = rng(33);
    let image = |r: &mut ChaCha8Rng| random_array3(r, (3, 16, 16), 0.5).mapv(|v| 0.5 + v);
    let (pred, gt) = (image(&mut r), image(&mut r));
    let head = uniform_matrix::<f64, _>(16, 16, 1.0, &mut r).mapv(f64::abs);
    let eye = uniform_matrix::<f64, _>(16, 16, 1.0, &mut r).mapv(|v| v.max(0.0));
    let masks = Masks {
        head: head.view(),
        eye: eye.view(),
    };
    let ext = SeededConvExtractor::default();
    let mut worst: f64 = 0.0;
    for eye_mask_term in [true, false] {
        let cfg = LossConfig {
            eye_mask_term,
            ..LossConfig::default()
        };
        let (_, g) = total_loss_with_grad(pred.view(), gt.view(), masks, &ext, &cfg)?;
        let total = |p: &Array3<f64>| total_loss(p.view(), gt.view(), masks, &ext, &cfg).unwrap().total;
        worst = worst.max(check_input(&pred, &g, 1e-6, &total));
    }
    Ok(worst)
}

fn decoder_gradients() -> Result<f64> {
    let mut r = rng(34);
    let cfg = DecoderConfig {
        input_channels: 3,
        channel_schedule: vec![2, 2],
        blur_taps: vec![1.0, 3.0, 3.0, 1.0],
        output_channels: 3,
    };
    let dec = Decoder::<f64>::init(cfg.clone(), &mut r);
    let x = random_array3(&mut r, (3, 2, 3), 1.0);
    let probe = random_array3(&mut r, (3, 8, 12), 1.0);
    let loss = |d: &Decoder<f64>, x: &Array3<f64>| (d.neural_render(x.view()).unwrap() * &probe).sum();
    let (_, cache) = dec.forward_cached(x.view())?;
    let mut grad = Decoder::zeros(cfg);
    let dx = dec.backward(&cache, probe.view(), &mut grad);
    let h = 1e-5;
    Ok(check_params(&dec, &grad, 1, h, &|d| loss(d, &x)).max(check_input(&x, &dx, h, &|v| loss(&dec, v))))
}

/// Image-space probe through the whole pipeline, from latents and weights.
fn end_to_end_gradients() -> Result<f64> {
    let cfg = ModelConfig::tiny();
    let mut r = rng(35);
    let nets = Networks::<f64>::init(&cfg, &mut r);
    let mut latent = FaceLatent::<f64>::zeros(&cfg.latent);
    for a in Attribute::ALL {
        let n = latent.attribute(a).len();
        latent.attribute_mut(a).assign(&uniform_matrix::<f64, _>(1, n, 1.0, &mut r).row(0));
    }
    let camera = CameraSpec::orbit(8.0, -4.0, ORBIT_DISTANCE, Intrinsics::default()).with_bounds(1.0, 3.5);
    let eyes = ToySceneParams::default().eye_geometry();
    let gaze = GazeVector::from_pitch_yaw_degrees(6.0, 9.0);
    let probe = random_array3(&mut r, (3, cfg.image_height(), cfg.image_width()), 1.0);
    let loss = |n: &Networks<f64>, l: &FaceLatent<f64>| (render_full(&cfg, n, &camera, l, &gaze, &eyes).unwrap() * &probe).sum();
    let (out, cache) = forward(&cfg, &nets, &camera, &latent, &gaze, &eyes, true)?;
    let mut g = Networks::zeros(&cfg);
    let d_lat = backward(&cfg, &nets, &out, &cache.unwrap(), &eyes, &probe, &mut g);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for a in Attribute::ALL {
        for k in 0..latent.attribute(a).len() {
            let mut p = latent.clone();
            p.attribute_mut(a)[k] += h;
            let mut m = latent.clone();
            m.attribute_mut(a)[k] -= h;
            worst = worst.max(rel_err((loss(&nets, &p) - loss(&nets, &m)) / (2.0 * h), d_lat.attribute(a)[k]));
        }
    }
    let stride = flatten(&nets).len() / 150 + 1;
    Ok(worst.max(check_params(&nets, &g, stride, h, &|n| loss(n, &latent))))
}

fn gradient_suite() -> Result<Verdict> {
    let t = Instant::now();
    let rows = [
        ("field", field_gradients()?, 1e-3),
        ("regressors", regressor_gradients()?, 1e-3),
        ("losses", loss_gradients()?, 1e-3),
        ("decoder", decoder_gradients()?, 1e-3),
        ("end-to-end", end_to_end_gradients()?, 1e-2),
    ];
    let secs = t.elapsed().as_secs_f64();
    let pass = rows.iter().all(|&(_, e, tol)| e <= tol) && secs < 300.0;
    let detail = rows
        .iter()
        .map(|(n, e, tol)| format!("{n} {e:.1e}/{tol:.0e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(verdict(pass, format!("{detail}, {secs:.1} s")))
}

// ---------------------------------------------------------------- shared toy run

struct ToyRun {
    _dir: tempfile::TempDir,
    data: Dataset,
    bundle: ModelBundle<f32>,
    history: Vec<LossRecord>,
    secs: f64,
}

fn toy_train(data_dir: &tempfile::TempDir, cfg: &TrainConfig) -> Result<(Dataset, ModelBundle<f32>, Vec<LossRecord>, f64)> {
    let data = Dataset::load(data_dir.path())?;
    let t = Instant::now();
    let out = train(cfg, &data, &mut |_| {})?;
    Ok((data, out.bundle, out.history, t.elapsed().as_secs_f64()))
}

/// Training recipe for the toy overfit. The toy frames only differ in view
/// and gaze, so expression and illumination codes are held fixed.
fn toy_config() -> TrainConfig {
    TrainConfig {
        frame_code_lr_scale: 0.0,
        ..TrainConfig::default()
    }
}

fn full_run() -> Result<ToyRun> {
    let dir = tempfile::tempdir()?;
    write_toy_dataset(&default_toy_spec(64), dir.path())?;
    let (data, bundle, history, secs) = toy_train(&dir, &toy_config())?;
    Ok(ToyRun {
        _dir: dir,
        data,
        bundle,
        history,
        secs,
    })
}

// ---------------------------------------------------------------- 4

fn overfit(run: &ToyRun) -> Result<Verdict> {
    let ps = psnr_summary(&run.bundle, &run.data)?;
    let pass = ps.min >= 25.0 && run.secs <= 900.0 && run.history.len() <= 2000;
    Ok(verdict(
        pass,
        format!(
            "{} views x gazes, {} steps, masked PSNR min {:.2} dB mean {:.2} dB (>= 25 on every view), {:.0} s",
            run.data.frames.len(),
            run.history.len(),
            ps.min,
            ps.mean,
            run.secs
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn eye_locality(run: &ToyRun) -> Result<Verdict> {
    let t = Instant::now();
    let untrained = ModelBundle::<f32>::new(run.bundle.config.clone(), run.bundle.latents.clone(), &mut rng(5))?;
    let gazes = [GazeVector::from_pitch_yaw_degrees(-20.0, 15.0), GazeVector::from_pitch_yaw_degrees(25.0, -10.0)];
    let (mut bad, mut outside) = (0, 0);
    for bundle in [&run.bundle, &untrained] {
        for (f, rec) in run.data.manifest.frames.iter().enumerate() {
            let latent = bundle.latents.face_latent(&rec.id)?;
            let eyes = run.data.eye_geometry(f)?;
            let (b, o) = global_locality_violations(bundle, &rec.camera, &latent, eyes, [&rec.gaze, &gazes[f % 2]])?;
            bad += b;
            outside += o;
        }
    }
    // image space: change outside the dilated eye masks is zero or at least 10x smaller
    let leak = leakage_summary(&run.bundle, &run.data, EvalConfig::default().leakage_gaze_delta)?;
    let leak_ok = leak.outside_mean_abs == 0.0 || leak.ratio.is_some_and(|r| r >= 10.0);
    let secs = t.elapsed().as_secs_f64();
    Ok(verdict(
        bad == 0 && outside > 0 && leak_ok && secs < 60.0,
        format!(
            "{bad} of {outside} outside-mask feature pixels changed; image change inside {:.4} outside {:.4}, {secs:.1} s",
            leak.inside_mean_abs, leak.outside_mean_abs
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn toy_redirection(run: &ToyRun) -> Result<Verdict> {
    let t = Instant::now();
    let cfg = EvalConfig {
        gaze_targets: gaze_grid(3, 10.0),
        ..EvalConfig::default()
    };
    let r = redirection_errors(&run.bundle, &run.data, &cfg)?.expect("toy subjects");
    let secs = t.elapsed().as_secs_f64();
    let pass = r.probe_failures == 0 && r.gaze_deg <= 5.0 && r.head_to_gaze_deg <= 5.0 && secs < 300.0;
    Ok(verdict(
        pass,
        format!(
            "3x3 grid over +-10 deg: gaze error {:.2} deg, camera-only gaze shift {:.2} deg (both <= 5), pose error {:.2} deg, {} probe failures, {secs:.1} s",
            r.gaze_deg, r.head_to_gaze_deg, r.pose_deg, r.probe_failures
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn eye_region_mse(bundle: &ModelBundle<f32>, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for f in 0..data.frames.len() {
        let rec = &data.manifest.frames[f];
        let img = bundle.render(&rec.camera, &bundle.latents.face_latent(&rec.id)?, &rec.gaze, data.eye_geometry(f)?)?;
        let (_, eye) = data.masks(f);
        let psnr = masked_psnr(img.view(), data.frames[f].image.view(), eye.view())?;
        total += 10f64.powf(-psnr / 10.0);
    }
    Ok(total / data.frames.len() as f64)
}

fn ablation(run: &ToyRun) -> Result<Verdict> {
    let t = Instant::now();
    let dir = tempfile::tempdir()?;
    write_toy_dataset(&default_toy_spec(64), dir.path())?;
    let mut cfg = toy_config();
    cfg.loss.eye_mask_term = false;
    let (data, ablated, _, _) = toy_train(&dir, &cfg)?;
    let full = eye_region_mse(&run.bundle, &run.data)?;
    let abl = eye_region_mse(&ablated, &data)?;
    let secs = t.elapsed().as_secs_f64() + run.secs;
    Ok(verdict(
        abl > full && secs <= 1800.0,
        format!("eye-region MSE full {full:.3e} vs without eye term {abl:.3e}, paired runs {secs:.0} s"),
    ))
}

// ---------------------------------------------------------------- 8

fn reproducibility(run: &ToyRun) -> Result<Verdict> {
    let t = Instant::now();
    let dir = tempfile::tempdir()?;
    write_toy_dataset(&default_toy_spec(64), dir.path())?;
    let cfg = TrainConfig {
        steps: 25,
        seed: 99,
        ..TrainConfig::default()
    };
    let (data, a, ha, _) = toy_train(&dir, &cfg)?;
    let (_, b, hb, _) = toy_train(&dir, &cfg)?;
    let bits = |h: &[LossRecord]| h.iter().flat_map(|r| [r.rec.to_bits(), r.per.to_bits(), r.total.to_bits()]).collect::<Vec<_>>();
    let same_history = bits(&ha) == bits(&hb);
    let render = |m: &ModelBundle<f32>, f: usize| -> Result<Array3<f32>> {
        let rec = &data.manifest.frames[f];
        m.render(&rec.camera, &m.latents.face_latent(&rec.id)?, &rec.gaze, data.eye_geometry(f)?)
    };
    let mut same_images = true;
    for f in 0..data.frames.len() {
        same_images &= render(&a, f)? == render(&b, f)?;
    }
    let path = dir.path().join("full.ngz");
    save_checkpoint(&run.bundle, &path)?;
    let back = load_checkpoint(&path)?;
    let mut round_trip = flatten(&back.networks) == flatten(&run.bundle.networks) && flatten(&back.latents) == flatten(&run.bundle.latents);
    for (f, rec) in run.data.manifest.frames.iter().enumerate() {
        let eyes = run.data.eye_geometry(f)?;
        let x = run.bundle.render(&rec.camera, &run.bundle.latents.face_latent(&rec.id)?, &rec.gaze, eyes)?;
        let y = back.render(&rec.camera, &back.latents.face_latent(&rec.id)?, &rec.gaze, eyes)?;
        round_trip &= x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(verdict(
        same_history && same_images && round_trip && secs < 300.0,
        format!("loss histories identical: {same_history}, renders identical: {same_images}, checkpoint round-trip bitwise: {round_trip}, {secs:.1} s"),
    ))
}

fn report(n: usize, name: &str, v: Result<Verdict>) -> bool {
    let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    println!("criterion {n} [{name}]: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    v.pass
}

fn main() -> ExitCode {
    // plain `cargo test` passes harness flags such as --list; honour them
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= report(1, "shape contract", shape_contract());
    ok &= report(2, "renderer oracle equivalence", renderer_oracles());
    ok &= report(3, "gradient suite", gradient_suite());
    match full_run() {
        Ok(run) => {
            ok &= report(4, "overfit run", overfit(&run));
            ok &= report(5, "exact eye locality", eye_locality(&run));
            ok &= report(6, "toy redirection", toy_redirection(&run));
            ok &= report(7, "eye-mask loss ablation", ablation(&run));
            ok &= report(8, "reproducibility", reproducibility(&run));
        }
        Err(e) => {
            for (n, name) in [(4, "overfit run"), (5, "exact eye locality"), (6, "toy redirection"), (7, "eye-mask loss ablation"), (8, "reproducibility")] {
                ok &= report(n, name, Err(nerf_gaze::Error::Config(format!("training failed: {e}"))));
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
