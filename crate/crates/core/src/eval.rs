//! Evaluation harness: masked PSNR, gaze leakage, probe-based redirection
//! errors and a finite-difference gradient check, gathered in a JSON report.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraSpec, EyeMask};
use crate::datagen::{estimate_gaze_from_toy_image, estimate_head_pose, toy_eye_masks, ToySceneParams};
use crate::encodings::{Attribute, FaceLatent, GazeVector};
use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_with_grad, LossConfig, Masks};
use crate::model::{backward, forward, ModelBundle, Networks};
use crate::nn::cast_into;
use crate::real::Real;
use crate::trainer::Dataset;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// PSNR reported for an exact match.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / mse)` with the squared error weighted by `mask` and
/// averaged over channels.
pub fn masked_psnr<T: Real>(pred: ArrayView3<T>, gt: ArrayView3<T>, mask: ArrayView2<T>) -> Result<f64> {
    let (c, h, w) = pred.dim();
    if gt.dim() != pred.dim() || mask.dim() != (h, w) {
        return Err(Error::shape("masked psnr", format!("{:?}", pred.dim()), format!("{:?} / {:?}", gt.dim(), mask.dim())));
    }
    let (mut se, mut wsum) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let m = mask[[i, j]].as_f64();
            if m == 0.0 {
                continue;
            }
            wsum += m * c as f64;
            for k in 0..c {
                let d = (pred[[k, i, j]] - gt[[k, i, j]]).as_f64();
                se += m * d * d;
            }
        }
    }
    if wsum == 0.0 {
        return Err(Error::Domain("psnr mask is empty".into()));
    }
    let mse = se / wsum;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

/// Pixels within Chebyshev distance `radius` of a nonzero mask pixel.
pub fn dilate(mask: ArrayView2<f64>, radius: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for ((i, j), &m) in mask.indexed_iter() {
        if m == 0.0 {
            continue;
        }
        for y in i.saturating_sub(radius)..(i + radius + 1).min(h) {
            for x in j.saturating_sub(radius)..(j + radius + 1).min(w) {
                out[[y, x]] = true;
            }
        }
    }
    out
}

/// Image-resolution region a pair of feature-resolution eye masks can touch
/// through the decoder.
pub fn eye_influence_region(masks: &[EyeMask; 2], upscale: usize, radius: usize) -> Array2<bool> {
    let (h, w) = masks[0].grid.dim();
    let up = Array2::from_shape_fn((h * upscale, w * upscale), |(i, j)| {
        masks[0].grid[[i / upscale, j / upscale]] + masks[1].grid[[i / upscale, j / upscale]]
    });
    dilate(up.view(), radius)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageStats {
    pub inside_mean_abs: f64,
    pub outside_mean_abs: f64,
    /// `inside / outside`; absent when nothing changed outside.
    pub ratio: Option<f64>,
    pub dilation_px: usize,
}

pub fn leakage<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>, region: ArrayView2<bool>, dilation_px: usize) -> LeakageStats {
    let (c, h, w) = a.dim();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            let d: f64 = (0..c).map(|k| (a[[k, i, j]] - b[[k, i, j]]).as_f64().abs()).sum::<f64>() / c as f64;
            if region[[i, j]] {
                si += d;
                ni += 1;
            } else {
                so += d;
                no += 1;
            }
        }
    }
    let inside = si / ni.max(1) as f64;
    let outside = so / no.max(1) as f64;
    LeakageStats {
        inside_mean_abs: inside,
        outside_mean_abs: outside,
        ratio: (outside > 0.0).then(|| inside / outside),
        dilation_px,
    }
}

/// Number of feature pixels outside both eye masks whose global features
/// differ between two gazes.
pub fn global_locality_violations(
    bundle: &ModelBundle<f32>,
    camera: &CameraSpec,
    latent: &FaceLatent<f32>,
    eyes: &crate::camera::EyeGeometry,
    gazes: [&GazeVector; 2],
) -> Result<(usize, usize)> {
    let (a, _) = forward(&bundle.config, &bundle.networks, camera, latent, gazes[0], eyes, false)?;
    let (b, _) = forward(&bundle.config, &bundle.networks, camera, latent, gazes[1], eyes, false)?;
    let (c, h, w) = a.global.features.dim();
    let (mut outside, mut bad) = (0, 0);
    for i in 0..h {
        for j in 0..w {
            if a.masks[0].grid[[i, j]] != 0.0 || a.masks[1].grid[[i, j]] != 0.0 {
                continue;
            }
            outside += 1;
            let same = (0..c).all(|k| a.global.features[[k, i, j]].to_bits() == b.global.features[[k, i, j]].to_bits())
                && a.global.density[[i, j]].to_bits() == b.global.density[[i, j]].to_bits();
            if !same {
                bad += 1;
            }
        }
    }
    Ok((bad, outside))
}

pub fn to_f64<T: Real>(image: &Array3<T>) -> Array3<f64> {
    image.mapv(|v| v.as_f64())
}

/// Toy gaze probe on a rendered image, with the geometric eye masks of `camera`.
pub fn probe_gaze<T: Real>(image: &Array3<T>, params: &ToySceneParams, camera: &CameraSpec) -> Result<GazeVector> {
    let (_, h, w) = image.dim();
    let m = toy_eye_masks(params, camera, h, w)?;
    estimate_gaze_from_toy_image(to_f64(image).view(), [m[0].view(), m[1].view()], params, camera)
}

pub fn probe_pose<T: Real>(image: &Array3<T>, params: &ToySceneParams, camera: &CameraSpec) -> Result<(f64, f64)> {
    let (_, _, d) = camera.orbit_angles();
    estimate_head_pose(to_f64(image).view(), params, d, camera.intrinsics)
}

/// Orbit camera at the source distance, intrinsics and bounds, shifted by
/// `(d_yaw, d_pitch)` degrees.
pub fn shifted_camera(source: &CameraSpec, d_yaw: f64, d_pitch: f64) -> CameraSpec {
    let (yaw, pitch, d) = source.orbit_angles();
    CameraSpec::orbit(yaw + d_yaw, pitch + d_pitch, d, source.intrinsics).with_bounds(source.near, source.far)
}

/// Renders frame `frame` of `data` with its own latents and optionally a
/// substituted camera and gaze.
pub fn redirect(
    bundle: &ModelBundle<f32>,
    data: &Dataset,
    frame: usize,
    camera: Option<CameraSpec>,
    gaze: Option<GazeVector>,
) -> Result<(Array3<f32>, CameraSpec, GazeVector)> {
    let rec = &data.manifest.frames[frame];
    let camera = camera.unwrap_or(rec.camera);
    let gaze = gaze.unwrap_or(rec.gaze);
    let latent = bundle.latents.face_latent(&rec.id)?;
    let img = bundle.render(&camera, &latent, &gaze, data.eye_geometry(frame)?)?;
    Ok((img, camera, gaze))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Target gazes `(pitch, yaw)` in degrees for gaze redirection.
    pub gaze_targets: Vec<(f64, f64)>,
    /// Camera changes `(yaw, pitch)` in degrees for pose redirection.
    pub camera_offsets: Vec<(f64, f64)>,
    /// Also redirect every frame to the camera of each other dataset view.
    pub cross_view: bool,
    /// Gaze change `(pitch, yaw)` in degrees used for the leakage ratio.
    pub leakage_gaze_delta: (f64, f64),
    pub gradient_entries: usize,
    pub gradient_tolerance: f64,
}

/// `n x n` grid over `[-extent, extent]` in both angles.
pub fn gaze_grid(n: usize, extent: f64) -> Vec<(f64, f64)> {
    let at = |k: usize| if n == 1 { 0.0 } else { -extent + 2.0 * extent * k as f64 / (n - 1) as f64 };
    (0..n).flat_map(|a| (0..n).map(move |b| (at(a), at(b)))).collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gaze_targets: gaze_grid(3, 10.0),
            camera_offsets: Vec::new(),
            cross_view: true,
            leakage_gaze_delta: (10.0, -10.0),
            gradient_entries: 4,
            gradient_tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePsnr {
    pub frame: String,
    pub head: f64,
    pub eye: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrSummary {
    pub mean: f64,
    pub min: f64,
    pub eye_mean: f64,
    pub per_frame: Vec<FramePsnr>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RedirectionErrors {
    /// Mean angle between commanded and probed gaze after gaze redirection.
    pub gaze_deg: f64,
    /// Mean angle between commanded and probed head pose after camera redirection.
    pub pose_deg: f64,
    /// Mean head-pose change caused by gaze-only redirection.
    pub gaze_to_head_deg: f64,
    /// Mean gaze change caused by camera-only redirection.
    pub head_to_gaze_deg: f64,
    pub samples: usize,
    pub probe_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub passed: bool,
    pub max_rel_error: f64,
    pub entries: usize,
    pub tolerance: f64,
}

/// Report keys are fixed; `schema_version` changes whenever they do.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub frames: usize,
    pub psnr: PsnrSummary,
    pub leakage: LeakageStats,
    /// Absent when the dataset carries no toy scene parameters.
    pub redirection: Option<RedirectionErrors>,
    pub gradient_check: GradientCheck,
}

fn pose_angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dir = |(y, p): (f64, f64)| GazeVector::from_pitch_yaw_degrees(p, y);
    dir(a).angle_degrees(&dir(b))
}

pub fn psnr_summary(bundle: &ModelBundle<f32>, data: &Dataset) -> Result<PsnrSummary> {
    let mut per_frame = Vec::with_capacity(data.frames.len());
    for (f, rec) in data.manifest.frames.iter().enumerate() {
        let (img, _, _) = redirect(bundle, data, f, None, None)?;
        let (head, eye) = data.masks(f);
        let gt = data.frames[f].image.view();
        let eye_psnr = if eye.sum() > 0.0 { masked_psnr(img.view(), gt, eye.view())? } else { PSNR_CAP };
        per_frame.push(FramePsnr {
            frame: rec.id.clone(),
            head: masked_psnr(img.view(), gt, head.view())?,
            eye: eye_psnr,
        });
    }
    let n = per_frame.len().max(1) as f64;
    Ok(PsnrSummary {
        mean: per_frame.iter().map(|p| p.head).sum::<f64>() / n,
        min: per_frame.iter().map(|p| p.head).fold(f64::INFINITY, f64::min),
        eye_mean: per_frame.iter().map(|p| p.eye).sum::<f64>() / n,
        per_frame,
    })
}

fn clamp_gaze(pitch: f64, yaw: f64) -> GazeVector {
    let lim = crate::datagen::MAX_GAZE_ANGLE_DEG - 5.0;
    GazeVector::from_pitch_yaw_degrees(pitch.clamp(-lim, lim), yaw.clamp(-lim, lim))
}

pub fn leakage_summary(bundle: &ModelBundle<f32>, data: &Dataset, delta: (f64, f64)) -> Result<LeakageStats> {
    let radius = bundle.config.decoder.receptive_radius();
    let up = bundle.config.decoder.upscale();
    let mut acc = LeakageStats {
        dilation_px: radius,
        ..Default::default()
    };
    let (mut si, mut so) = (0.0, 0.0);
    for (f, rec) in data.manifest.frames.iter().enumerate() {
        let (p, y) = rec.gaze.to_pitch_yaw();
        let moved = clamp_gaze(p.to_degrees() + delta.0, y.to_degrees() + delta.1);
        let latent = bundle.latents.face_latent(&rec.id)?;
        let eyes = data.eye_geometry(f)?;
        let (a, _) = forward(&bundle.config, &bundle.networks, &rec.camera, &latent, &rec.gaze, eyes, false)?;
        let b = bundle.render(&rec.camera, &latent, &moved, eyes)?;
        let region = eye_influence_region(&a.masks, up, radius);
        let s = leakage(a.image.view(), b.view(), region.view(), radius);
        si += s.inside_mean_abs;
        so += s.outside_mean_abs;
    }
    let n = data.frames.len().max(1) as f64;
    acc.inside_mean_abs = si / n;
    acc.outside_mean_abs = so / n;
    acc.ratio = (acc.outside_mean_abs > 0.0).then(|| acc.inside_mean_abs / acc.outside_mean_abs);
    Ok(acc)
}

/// One camera per distinct view in the dataset, in first-seen order.
pub fn distinct_views(data: &Dataset) -> Vec<CameraSpec> {
    let mut out: Vec<CameraSpec> = Vec::new();
    for r in &data.manifest.frames {
        if !out.contains(&r.camera) {
            out.push(r.camera);
        }
    }
    out
}

/// Probe-based redirection errors over every frame with toy parameters.
pub fn redirection_errors(bundle: &ModelBundle<f32>, data: &Dataset, cfg: &EvalConfig) -> Result<Option<RedirectionErrors>> {
    let mut out = RedirectionErrors::default();
    let (mut ng, mut np, mut ngh, mut nhg) = (0usize, 0usize, 0usize, 0usize);
    let mut any = false;
    for (f, rec) in data.manifest.frames.iter().enumerate() {
        let Some(params) = data.manifest.subject(&rec.subject)?.toy.clone() else {
            continue;
        };
        any = true;
        let (src, _, _) = redirect(bundle, data, f, None, None)?;
        let (Ok(src_gaze), Ok(src_pose)) = (probe_gaze(&src, &params, &rec.camera), probe_pose(&src, &params, &rec.camera)) else {
            out.probe_failures += 1;
            continue;
        };
        for &(p, y) in &cfg.gaze_targets {
            let target = GazeVector::from_pitch_yaw_degrees(p, y);
            let (img, _, _) = redirect(bundle, data, f, None, Some(target))?;
            out.samples += 1;
            match probe_gaze(&img, &params, &rec.camera) {
                Ok(g) => {
                    out.gaze_deg += g.angle_degrees(&target);
                    ng += 1;
                }
                Err(_) => out.probe_failures += 1,
            }
            if let Ok(pose) = probe_pose(&img, &params, &rec.camera) {
                out.gaze_to_head_deg += pose_angle(pose, src_pose);
                ngh += 1;
            }
        }
        let mut targets: Vec<CameraSpec> = cfg.camera_offsets.iter().map(|&(dy, dp)| shifted_camera(&rec.camera, dy, dp)).collect();
        if cfg.cross_view {
            targets.extend(distinct_views(data).into_iter().filter(|c| *c != rec.camera));
        }
        for cam in targets {
            let (img, _, _) = redirect(bundle, data, f, Some(cam), None)?;
            out.samples += 1;
            let (yaw, pitch, _) = cam.orbit_angles();
            match probe_pose(&img, &params, &cam) {
                Ok(pose) => {
                    out.pose_deg += pose_angle(pose, (yaw, pitch));
                    np += 1;
                }
                Err(_) => out.probe_failures += 1,
            }
            if let Ok(g) = probe_gaze(&img, &params, &cam) {
                out.head_to_gaze_deg += g.angle_degrees(&src_gaze);
                nhg += 1;
            }
        }
    }
    if !any {
        return Ok(None);
    }
    out.gaze_deg /= ng.max(1) as f64;
    out.pose_deg /= np.max(1) as f64;
    out.gaze_to_head_deg /= ngh.max(1) as f64;
    out.head_to_gaze_deg /= nhg.max(1) as f64;
    Ok(Some(out))
}

/// Central differences of the total loss of frame 0 against a few latent
/// entries, in double precision.
pub fn gradient_check(bundle: &ModelBundle<f32>, data: &Dataset, entries: usize, tolerance: f64) -> Result<GradientCheck> {
    let cfg = &bundle.config;
    let mut nets = Networks::<f64>::zeros(cfg);
    cast_into(&bundle.networks, &mut nets);
    let rec = &data.manifest.frames[0];
    let eyes = data.eye_geometry(0)?;
    let l32 = bundle.latents.face_latent(&rec.id)?;
    let cast = |a: &ndarray::Array1<f32>| a.mapv(f64::from);
    let latent = FaceLatent {
        identity: cast(&l32.identity),
        expression: cast(&l32.expression),
        texture: cast(&l32.texture),
        illumination: cast(&l32.illumination),
    };
    let gt = data.frames[0].image.mapv(f64::from);
    let (head, eye) = data.masks(0);
    let (head, eye) = (head.mapv(f64::from), eye.mapv(f64::from));
    let masks = Masks {
        head: head.view(),
        eye: eye.view(),
    };
    let extractor = bundle.extractor.build()?;
    let loss_cfg = LossConfig::default();
    let (out, cache) = forward(cfg, &nets, &rec.camera, &latent, &rec.gaze, eyes, true)?;
    let (_, d_image) = total_loss_with_grad(out.image.view(), gt.view(), masks, &extractor, &loss_cfg)?;
    let mut g = Networks::zeros(cfg);
    let d_lat = backward(cfg, &nets, &out, &cache.expect("kept"), eyes, &d_image, &mut g);
    let loss = |l: &FaceLatent<f64>| -> Result<f64> {
        let img = crate::model::render_full(cfg, &nets, &rec.camera, l, &rec.gaze, eyes)?;
        Ok(total_loss(img.view(), gt.view(), masks, &extractor, &loss_cfg)?.total)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    'outer: for a in Attribute::ALL {
        for k in 0..latent.attribute(a).len() {
            if done == entries {
                break 'outer;
            }
            let mut p = latent.clone();
            p.attribute_mut(a)[k] += h;
            let mut m = latent.clone();
            m.attribute_mut(a)[k] -= h;
            let fd = (loss(&p)? - loss(&m)?) / (2.0 * h);
            let an = d_lat.attribute(a)[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
            done += 1;
        }
    }
    Ok(GradientCheck {
        passed: worst <= tolerance,
        max_rel_error: worst,
        entries: done,
        tolerance,
    })
}

pub fn evaluate(bundle: &ModelBundle<f32>, data: &Dataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if data.frames.is_empty() {
        return Err(Error::Config("dataset has no frames".into()));
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        frames: data.frames.len(),
        psnr: psnr_summary(bundle, data)?,
        leakage: leakage_summary(bundle, data, cfg.leakage_gaze_delta)?,
        redirection: redirection_errors(bundle, data, cfg)?,
        gradient_check: gradient_check(bundle, data, cfg.gradient_entries, cfg.gradient_tolerance)?,
    })
}
