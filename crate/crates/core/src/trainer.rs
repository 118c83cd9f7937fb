//! Joint optimization of all networks and the latent bank against a dataset.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::EyeGeometry;
use crate::datagen::{load_frame, read_manifest, FrameData, Manifest};
use crate::encodings::FaceLatent;
use crate::error::{Error, Result};
use crate::losses::{total_loss_with_grad, LossBreakdown, LossConfig, Masks, PerceptualExtractor};
use crate::model::{backward, forward, ExtractorSpec, LatentBank, ModelBundle, ModelConfig, Networks, Profile};
use crate::nn::{flatten, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub steps: usize,
    pub batch_frames: usize,
    pub lr_network: f64,
    pub lr_latent: f64,
    /// Both learning rates follow a cosine from 1 down to this fraction.
    pub lr_final_fraction: f64,
    /// Multiplier on the latent learning rate for per-frame codes. 0 keeps
    /// expression and illumination at their initial value.
    pub frame_code_lr_scale: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub samples_per_ray: usize,
    /// Jitter sample depths, with a fresh seed every step.
    pub stratified: bool,
    /// Fraction of the steps that use jitter when `stratified` is set; the
    /// rest train at bin midpoints.
    pub stratified_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Desk,
            steps: 2000,
            batch_frames: 2,
            lr_network: 5e-4,
            lr_latent: 5e-3,
            lr_final_fraction: 0.1,
            frame_code_lr_scale: 1.0,
            seed: 0,
            loss: LossConfig::default(),
            samples_per_ray: 32,
            stratified: true,
            stratified_fraction: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_frames == 0 {
            return Err(Error::Config("batch_frames must be >= 1".into()));
        }
        for (name, lr) in [("lr_network", self.lr_network), ("lr_latent", self.lr_latent)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} = {lr} (must be > 0)")));
            }
        }
        if !(0.0..=1.0).contains(&self.frame_code_lr_scale) {
            return Err(Error::Config(format!("frame_code_lr_scale = {} (must be in [0, 1])", self.frame_code_lr_scale)));
        }
        if !(0.0..=1.0).contains(&self.stratified_fraction) {
            return Err(Error::Config(format!("stratified_fraction = {} (must be in [0, 1])", self.stratified_fraction)));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(Error::Config(format!("lr_final_fraction = {} (must be in (0, 1])", self.lr_final_fraction)));
        }
        if self.loss.reconstruction_weight < 0.0 || self.loss.perceptual_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.profile == Profile::PaperShape {
            return Err(Error::Config("the paper-shape profile is for forward shape checks only".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier at `step`.
    pub fn lr_factor(&self, step: usize) -> f64 {
        let t = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 0.0 };
        let f = self.lr_final_fraction;
        f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Parses a TOML config; parse errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::for_profile(self.profile);
        cfg.sampling.samples_per_ray = self.samples_per_ray;
        // the training loop switches jitter on per step; renders use midpoints
        cfg.sampling.stratified = false;
        cfg.sampling.seed = self.seed;
        cfg
    }
}

/// A manifest with every frame decoded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<FrameData>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        manifest.validate_files(dir)?;
        let frames = manifest
            .frames
            .iter()
            .map(|r| load_frame(dir, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, frames })
    }

    pub fn eye_geometry(&self, frame: usize) -> Result<&EyeGeometry> {
        let rec = &self.manifest.frames[frame];
        Ok(&self.manifest.subject(&rec.subject)?.eye_geometry)
    }

    /// Head mask and the union of both eye masks.
    pub fn masks(&self, frame: usize) -> (Array2<f32>, Array2<f32>) {
        let f = &self.frames[frame];
        (f.head_mask.clone(), &f.eye_masks[0] + &f.eye_masks[1])
    }

    pub fn zero_latents(&self, cfg: &ModelConfig) -> LatentBank<f32> {
        LatentBank::zeros(
            &cfg.latent,
            self.manifest.subjects.iter().map(|s| s.id.as_str()),
            self.manifest.frames.iter().map(|f| (f.id.as_str(), f.subject.as_str())),
        )
    }

    fn check_for(&self, cfg: &ModelConfig) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Config("dataset has no frames".into()));
        }
        let want = (cfg.image_height(), cfg.image_width());
        if (self.manifest.height, self.manifest.width) != want {
            return Err(Error::shape(
                "dataset resolution",
                format!("{want:?} for the {} profile", cfg.profile),
                format!("{:?}", (self.manifest.height, self.manifest.width)),
            ));
        }
        for (rec, f) in self.manifest.frames.iter().zip(&self.frames) {
            let dims = [f.head_mask.dim(), f.eye_masks[0].dim(), f.eye_masks[1].dim()];
            if f.image.dim() != (3, want.0, want.1) || dims.iter().any(|&d| d != want) {
                return Err(Error::Manifest {
                    frame: rec.id.clone(),
                    reason: format!("image or mask size differs from {want:?}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub rec: f64,
    pub per: f64,
    pub total: f64,
}

/// Mean of the first and last `window` totals.
pub fn windowed_means(history: &[LossRecord], window: usize) -> (f64, f64) {
    let w = window.clamp(1, history.len().max(1));
    let mean = |h: &[LossRecord]| h.iter().map(|r| r.total).sum::<f64>() / h.len().max(1) as f64;
    (mean(&history[..w.min(history.len())]), mean(&history[history.len().saturating_sub(w)..]))
}

pub struct TrainOutcome {
    pub bundle: ModelBundle<f32>,
    pub history: Vec<LossRecord>,
}

/// Loss and gradients for one frame under the current parameters.
pub struct FrameGrad {
    pub loss: LossBreakdown,
    pub latent: FaceLatent<f32>,
}

pub fn frame_loss_and_grad(
    bundle: &ModelBundle<f32>,
    data: &Dataset,
    frame: usize,
    extractor: &dyn PerceptualExtractor<f32>,
    loss_cfg: &LossConfig,
    scale: f32,
    grad: &mut Networks<f32>,
) -> Result<FrameGrad> {
    let rec = &data.manifest.frames[frame];
    let eyes = data.eye_geometry(frame)?;
    let latent = bundle.latents.face_latent(&rec.id)?;
    let (out, cache) = forward(&bundle.config, &bundle.networks, &rec.camera, &latent, &rec.gaze, eyes, true)?;
    let (head, eye) = data.masks(frame);
    let masks = Masks {
        head: head.view(),
        eye: eye.view(),
    };
    let (loss, mut d_image) = total_loss_with_grad(out.image.view(), data.frames[frame].image.view(), masks, extractor, loss_cfg)?;
    d_image.mapv_inplace(|g| g * scale);
    let cache = cache.expect("forward keeps its cache");
    let latent = backward(&bundle.config, &bundle.networks, &out, &cache, eyes, &d_image, grad);
    Ok(FrameGrad { loss, latent })
}

/// Per-entry Adam states for the latent bank. An entry is stepped only when
/// it received gradient, so codes outside the batch stay put.
struct LatentOptimizer {
    lr: f64,
    states: BTreeMap<String, Adam<f32>>,
}

impl LatentOptimizer {
    fn step(&mut self, key: String, params: &mut [&mut Array1<f32>], grad: Array1<f32>) {
        let mut flat: Vec<f32> = params.iter().flat_map(|p| p.iter().copied()).collect();
        let lr = self.lr;
        let opt = self.states.entry(key).or_insert_with(|| Adam::new(lr, flat.len()));
        opt.lr = lr;
        opt.step_slice(&mut flat, grad.as_slice().expect("contiguous"));
        let mut off = 0;
        for p in params.iter_mut() {
            let n = p.len();
            p.assign(&Array1::from_vec(flat[off..off + n].to_vec()));
            off += n;
        }
    }
}

fn cat(a: &Array1<f32>, b: &Array1<f32>) -> Array1<f32> {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("1-d")
}

/// Trains a fresh bundle. `progress` sees every loss record as it is made.
pub fn train(cfg: &TrainConfig, data: &Dataset, progress: &mut dyn FnMut(&LossRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    data.check_for(&model_cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bundle = ModelBundle::new(model_cfg, data.zero_latents(&cfg.model_config()), &mut rng)?;
    bundle.extractor = ExtractorSpec::default();
    let extractor = bundle.extractor.build()?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);

    let n_params = flatten(&bundle.networks).len();
    let mut net_opt = Adam::new(cfg.lr_network, n_params);
    let mut lat_opt = LatentOptimizer {
        lr: cfg.lr_latent,
        states: BTreeMap::new(),
    };
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_frames.min(data.frames.len());
    let (lid, ltex) = (bundle.config.latent.identity, bundle.config.latent.texture);

    for step in 0..cfg.steps {
        let decay = cfg.lr_factor(step);
        net_opt.lr = cfg.lr_network * decay;
        lat_opt.lr = cfg.lr_latent * decay;
        if cfg.stratified {
            let jitter = (step as f64) < cfg.stratified_fraction * cfg.steps as f64;
            bundle.config.sampling.stratified = jitter;
            bundle.config.sampling.seed = cfg.seed.wrapping_add(step as u64);
        }
        let mut frames = Vec::with_capacity(batch);
        while frames.len() < batch {
            if order.is_empty() {
                order = (0..data.frames.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            let f = order.pop().expect("non-empty");
            if !frames.contains(&f) {
                frames.push(f);
            }
        }

        let mut grad = Networks::zeros(&bundle.config);
        let scale = 1.0 / batch as f32;
        let (mut rec, mut per) = (0.0, 0.0);
        let mut subject_grads: BTreeMap<String, Array1<f32>> = BTreeMap::new();
        let mut frame_grads: BTreeMap<String, Array1<f32>> = BTreeMap::new();
        for &f in &frames {
            let fg = frame_loss_and_grad(&bundle, data, f, &extractor, &cfg.loss, scale, &mut grad)?;
            rec += fg.loss.rec / batch as f64;
            per += fg.loss.per / batch as f64;
            let record = &data.manifest.frames[f];
            let sg = cat(&fg.latent.identity, &fg.latent.texture);
            subject_grads
                .entry(record.subject.clone())
                .and_modify(|g| *g += &sg)
                .or_insert(sg);
            frame_grads.insert(record.id.clone(), cat(&fg.latent.expression, &fg.latent.illumination));
        }
        let loss = LossBreakdown::new(rec, per);
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, loss: loss.total });
        }
        let flat_grad = flatten(&grad);
        if flat_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: loss.total });
        }
        net_opt.step(&mut bundle.networks, &flat_grad);
        for (id, g) in subject_grads {
            let sc = bundle.latents.subjects.get_mut(&id).expect("subject in bank");
            debug_assert_eq!(g.len(), lid + ltex);
            lat_opt.step(format!("subject.{id}"), &mut [&mut sc.identity, &mut sc.texture], g);
        }
        lat_opt.lr = cfg.lr_latent * decay * cfg.frame_code_lr_scale;
        for (id, g) in frame_grads {
            if cfg.frame_code_lr_scale == 0.0 {
                break;
            }
            let fc = bundle.latents.frames.get_mut(&id).expect("frame in bank");
            lat_opt.step(format!("frame.{id}"), &mut [&mut fc.expression, &mut fc.illumination], g);
        }
        let record = LossRecord {
            step,
            rec: loss.rec,
            per: loss.per,
            total: loss.total,
        };
        progress(&record);
        history.push(record);
    }
    // jitter is a training device; the fitted model renders at bin midpoints
    bundle.config.sampling.stratified = false;
    bundle.config.sampling.seed = cfg.seed;
    Ok(TrainOutcome { bundle, history })
}
