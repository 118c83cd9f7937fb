//! The full generator: face field and two eye-field passes rendered to
//! low-resolution feature maps, merged by density, and decoded to an image.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, s, Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraSpec, EyeGeometry, EyeMask, RayBundle};
use crate::decoder::{Decoder, DecoderCache, DecoderConfig};
use crate::encodings::{embed_gaze, EncodingConfig, FaceLatent, GazeVector, LatentDims};
use crate::error::{Error, Result, StageExt};
use crate::field::{DensityActivation, FieldCodes, FieldConfig, FieldVariant, ImplicitField};
use crate::losses::{SeededConvExtractor, DEFAULT_EXTRACTOR_KIND, DEFAULT_EXTRACTOR_SEED};
use crate::merge::{merge_backward, merge_features, MergeConfig};
use crate::nn::{join, Parameters};
use crate::real::Real;
use crate::regressor::{EyeCodeRegressor, EyeRegressors, RegressorCache, RegressorConfig};
use crate::volume::{masked_rays, trace_backward, trace_feature_map, FeatureMap, RayTrace, SamplingConfig, TracedField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    PaperShape,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-shape" => Ok(Profile::PaperShape),
            other => Err(Error::Config(format!("unknown profile `{other}` (desk, paper-shape)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::PaperShape => "paper-shape",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: Profile,
    pub feature_height: usize,
    pub feature_width: usize,
    pub encoding: EncodingConfig,
    pub latent: LatentDims,
    pub face_field: FieldConfig,
    pub eye_field: FieldConfig,
    pub shape_regressor: RegressorConfig,
    pub appearance_regressor: RegressorConfig,
    pub decoder: DecoderConfig,
    pub sampling: SamplingConfig,
    pub merge: MergeConfig,
    /// Eye masks are projected with the eye radius scaled by this factor.
    pub eye_mask_margin: f64,
}

fn field(variant: FieldVariant, width: usize, depth: usize, features: usize, enc: &EncodingConfig, shape: usize, app: usize) -> FieldConfig {
    FieldConfig {
        variant,
        hidden_width: width,
        depth,
        feature_dim: features,
        density_activation: DensityActivation::Softplus,
        position_dim: enc.position_dim(),
        shape_dim: shape,
        appearance_dim: app,
        gaze_dim: if variant == FieldVariant::Eye { enc.gaze_dim() } else { 0 },
    }
}

impl ModelConfig {
    fn assemble(
        profile: Profile,
        side: usize,
        channels: usize,
        field_width: usize,
        field_depth: usize,
        latent: LatentDims,
        decoder: DecoderConfig,
        samples: usize,
    ) -> Self {
        let encoding = EncodingConfig::default();
        let (ls, la) = (latent.shape(), latent.appearance());
        Self {
            profile,
            feature_height: side,
            feature_width: side,
            face_field: field(FieldVariant::Face, field_width, field_depth, channels, &encoding, ls, la),
            eye_field: field(
                FieldVariant::Eye,
                field_width,
                field_depth,
                channels,
                &encoding,
                latent.eye_shape,
                latent.eye_appearance,
            ),
            shape_regressor: RegressorConfig::new(ls + la, latent.eye_shape),
            appearance_regressor: RegressorConfig::new(ls + la, latent.eye_appearance),
            decoder,
            sampling: SamplingConfig {
                samples_per_ray: samples,
                ..SamplingConfig::default()
            },
            merge: MergeConfig::default(),
            eye_mask_margin: 1.25,
            encoding,
            latent,
        }
    }

    /// Features 16x16 with 64 channels, image 64x64.
    pub fn desk() -> Self {
        // a single gaze frequency keeps the eye field smooth between the few
        // gazes a desk-scale dataset covers
        Self::assemble(Profile::Desk, 16, 64, 64, 4, LatentDims::default(), DecoderConfig::desk(64), 32).with_encoding(EncodingConfig {
            num_freqs_gaze: 1,
            ..EncodingConfig::default()
        })
    }

    /// Features 64x64 with 256 channels, image 512x512.
    pub fn paper_shape() -> Self {
        Self::assemble(
            Profile::PaperShape,
            64,
            256,
            128,
            6,
            LatentDims::default(),
            DecoderConfig::paper_shape(),
            32,
        )
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::PaperShape => Self::paper_shape(),
        }
    }

    /// A very small model for finite-difference checks.
    pub fn tiny() -> Self {
        let latent = LatentDims {
            identity: 2,
            expression: 2,
            texture: 2,
            illumination: 1,
            eye_shape: 2,
            eye_appearance: 2,
        };
        let decoder = DecoderConfig {
            input_channels: 4,
            channel_schedule: vec![3],
            ..DecoderConfig::desk(4)
        };
        let mut cfg = Self::assemble(Profile::Desk, 6, 4, 8, 2, latent, decoder, 6).with_encoding(EncodingConfig {
            num_freqs_position: 2,
            num_freqs_gaze: 1,
            include_input: true,
        });
        cfg.shape_regressor.hidden_width = 6;
        cfg.appearance_regressor.hidden_width = 6;
        cfg
    }

    /// Swaps the encoding and resizes the field inputs to match.
    pub fn with_encoding(mut self, enc: EncodingConfig) -> Self {
        self.encoding = enc;
        for f in [&mut self.face_field, &mut self.eye_field] {
            f.position_dim = enc.position_dim();
            if f.variant == FieldVariant::Eye {
                f.gaze_dim = enc.gaze_dim();
            }
        }
        self
    }

    pub fn image_height(&self) -> usize {
        self.feature_height * self.decoder.upscale()
    }

    pub fn image_width(&self) -> usize {
        self.feature_width * self.decoder.upscale()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        self.face_field.validate()?;
        self.eye_field.validate()?;
        self.shape_regressor.validate()?;
        self.appearance_regressor.validate()?;
        self.decoder.validate()?;
        self.sampling.validate()?;
        self.merge.validate()?;
        let l = &self.latent;
        let checks = [
            (self.face_field.variant == FieldVariant::Face, "face field variant"),
            (self.eye_field.variant == FieldVariant::Eye, "eye field variant"),
            (self.face_field.position_dim == self.encoding.position_dim(), "face field position width"),
            (self.eye_field.position_dim == self.encoding.position_dim(), "eye field position width"),
            (self.eye_field.gaze_dim == self.encoding.gaze_dim(), "eye field gaze width"),
            (self.face_field.shape_dim == l.shape(), "face field shape code width"),
            (self.face_field.appearance_dim == l.appearance(), "face field appearance code width"),
            (self.eye_field.shape_dim == l.eye_shape, "eye field shape code width"),
            (self.eye_field.appearance_dim == l.eye_appearance, "eye field appearance code width"),
            (self.shape_regressor.input_dim == l.shape() + l.appearance(), "shape regressor input"),
            (self.appearance_regressor.input_dim == l.shape() + l.appearance(), "appearance regressor input"),
            (self.shape_regressor.output_dim == l.eye_shape, "shape regressor output"),
            (self.appearance_regressor.output_dim == l.eye_appearance, "appearance regressor output"),
            (self.face_field.feature_dim == self.decoder.input_channels, "face feature channels"),
            (self.eye_field.feature_dim == self.decoder.input_channels, "eye feature channels"),
            (self.feature_height > 0 && self.feature_width > 0, "feature resolution"),
            (self.eye_mask_margin >= 1.0, "eye mask margin"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(Error::Config(format!("inconsistent model config: {what}")));
            }
        }
        Ok(())
    }
}

/// All trainable network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T> {
    pub face_field: ImplicitField<T>,
    pub eye_field: ImplicitField<T>,
    pub regressors: EyeRegressors<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> Networks<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            face_field: ImplicitField::zeros(cfg.face_field),
            eye_field: ImplicitField::zeros(cfg.eye_field),
            regressors: EyeRegressors {
                shape: EyeCodeRegressor::zeros(cfg.shape_regressor.clone()),
                appearance: EyeCodeRegressor::zeros(cfg.appearance_regressor.clone()),
            },
            decoder: Decoder::zeros(cfg.decoder.clone()),
        }
    }

    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            face_field: ImplicitField::init(cfg.face_field, rng),
            eye_field: ImplicitField::init(cfg.eye_field, rng),
            regressors: EyeRegressors {
                shape: EyeCodeRegressor::init(cfg.shape_regressor.clone(), rng),
                appearance: EyeCodeRegressor::init(cfg.appearance_regressor.clone(), rng),
            },
            decoder: Decoder::init(cfg.decoder.clone(), rng),
        }
    }
}

impl<T: Real> Parameters<T> for Networks<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.face_field.visit(&join(prefix, "face_field"), f);
        self.eye_field.visit(&join(prefix, "eye_field"), f);
        self.regressors.visit(&join(prefix, "regressor"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.face_field.visit_mut(&join(prefix, "face_field"), f);
        self.eye_field.visit_mut(&join(prefix, "eye_field"), f);
        self.regressors.visit_mut(&join(prefix, "regressor"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectCodes<T> {
    pub identity: Array1<T>,
    pub texture: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameCodes<T> {
    pub subject: String,
    pub expression: Array1<T>,
    pub illumination: Array1<T>,
}

/// Identity and texture per subject; expression and illumination per frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LatentBank<T> {
    pub subjects: BTreeMap<String, SubjectCodes<T>>,
    pub frames: BTreeMap<String, FrameCodes<T>>,
}

impl<T: Real> LatentBank<T> {
    pub fn zeros<'a>(
        dims: &LatentDims,
        subjects: impl IntoIterator<Item = &'a str>,
        frames: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        let mut bank = Self {
            subjects: BTreeMap::new(),
            frames: BTreeMap::new(),
        };
        for s in subjects {
            bank.subjects.insert(
                s.to_string(),
                SubjectCodes {
                    identity: Array1::zeros(dims.identity),
                    texture: Array1::zeros(dims.texture),
                },
            );
        }
        for (f, s) in frames {
            bank.frames.insert(
                f.to_string(),
                FrameCodes {
                    subject: s.to_string(),
                    expression: Array1::zeros(dims.expression),
                    illumination: Array1::zeros(dims.illumination),
                },
            );
        }
        bank
    }

    pub fn face_latent(&self, frame: &str) -> Result<FaceLatent<T>> {
        let fc = self.frames.get(frame).ok_or_else(|| Error::Unknown {
            kind: "frame",
            id: frame.to_string(),
        })?;
        let sc = self.subjects.get(&fc.subject).ok_or_else(|| Error::Unknown {
            kind: "subject",
            id: fc.subject.clone(),
        })?;
        Ok(FaceLatent {
            identity: sc.identity.clone(),
            expression: fc.expression.clone(),
            texture: sc.texture.clone(),
            illumination: fc.illumination.clone(),
        })
    }
}

impl<T: Real> Parameters<T> for LatentBank<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (id, s) in &self.subjects {
            let p = join(prefix, &format!("subject.{id}"));
            s.identity.visit(&join(&p, "identity"), f);
            s.texture.visit(&join(&p, "texture"), f);
        }
        for (id, fr) in &self.frames {
            let p = join(prefix, &format!("frame.{id}"));
            fr.expression.visit(&join(&p, "expression"), f);
            fr.illumination.visit(&join(&p, "illumination"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (id, s) in &mut self.subjects {
            let p = join(prefix, &format!("subject.{id}"));
            s.identity.visit_mut(&join(&p, "identity"), f);
            s.texture.visit_mut(&join(&p, "texture"), f);
        }
        for (id, fr) in &mut self.frames {
            let p = join(prefix, &format!("frame.{id}"));
            fr.expression.visit_mut(&join(&p, "expression"), f);
            fr.illumination.visit_mut(&join(&p, "illumination"), f);
        }
    }
}

/// Identity of the perceptual extractor a model was trained with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub kind: String,
    pub seed: u64,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            kind: DEFAULT_EXTRACTOR_KIND.to_string(),
            seed: DEFAULT_EXTRACTOR_SEED,
        }
    }
}

impl ExtractorSpec {
    pub fn build(&self) -> Result<SeededConvExtractor> {
        if self.kind != DEFAULT_EXTRACTOR_KIND {
            return Err(Error::Unknown {
                kind: "extractor",
                id: self.kind.clone(),
            });
        }
        Ok(SeededConvExtractor::new(self.seed))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub networks: Networks<T>,
    pub latents: LatentBank<T>,
    pub extractor: ExtractorSpec,
}

impl<T: Real> ModelBundle<T> {
    pub fn new<R: Rng>(config: ModelConfig, latents: LatentBank<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            networks: Networks::init(&config, rng),
            config,
            latents,
            extractor: ExtractorSpec::default(),
        })
    }

    /// Renders one image; see [`render_full`].
    pub fn render(&self, camera: &CameraSpec, latent: &FaceLatent<T>, gaze: &GazeVector, eyes: &EyeGeometry) -> Result<Array3<T>> {
        render_full(&self.config, &self.networks, camera, latent, gaze, eyes)
    }
}

/// Intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub image: Array3<T>,
    pub face: FeatureMap<T>,
    pub eyes: [FeatureMap<T>; 2],
    /// Feature-resolution eye masks.
    pub masks: [EyeMask; 2],
    pub global: FeatureMap<T>,
}

pub struct PipelineCache<T> {
    shape: Array1<T>,
    appearance: Array1<T>,
    gaze: Array1<T>,
    face_trace: RayTrace<T>,
    eye_traces: [RayTrace<T>; 2],
    eye_codes: [(Array1<T>, Array1<T>); 2],
    shape_cache: RegressorCache<T>,
    appearance_cache: RegressorCache<T>,
    decoder_cache: DecoderCache<T>,
}

fn check_latent<T: Real>(cfg: &ModelConfig, latent: &FaceLatent<T>) -> Result<()> {
    if !latent.dims_match(&cfg.latent) {
        return Err(Error::shape(
            "face latent",
            format!("{:?}", cfg.latent),
            format!(
                "identity {}, expression {}, texture {}, illumination {}",
                latent.identity.len(),
                latent.expression.len(),
                latent.texture.len(),
                latent.illumination.len()
            ),
        ));
    }
    if !latent.is_finite() {
        return Err(Error::NonFinite {
            stage: "face latent".into(),
            detail: "latent codes".into(),
        });
    }
    Ok(())
}

/// Feature-resolution masks for the two eyes.
pub fn feature_masks(cfg: &ModelConfig, camera: &CameraSpec, eyes: &EyeGeometry) -> Result<[EyeMask; 2]> {
    eyes.validate()?;
    let [r, l] = eyes.masks(camera, cfg.image_height(), cfg.image_width(), cfg.eye_mask_margin)?;
    let f = cfg.decoder.upscale();
    Ok([r.downsample(f)?, l.downsample(f)?])
}

/// Forward pass. With `keep` the returned cache supports [`backward`].
pub fn forward<T: Real>(
    cfg: &ModelConfig,
    nets: &Networks<T>,
    camera: &CameraSpec,
    latent: &FaceLatent<T>,
    gaze: &GazeVector,
    eyes: &EyeGeometry,
    keep: bool,
) -> Result<(PipelineOutput<T>, Option<PipelineCache<T>>)> {
    check_latent(cfg, latent).stage("latent")?;
    let rays: RayBundle = generate_rays(camera, cfg.feature_height, cfg.feature_width).stage("rays")?;
    let shape = latent.shape_code();
    let appearance = latent.appearance_code();
    let face_traced = TracedField {
        field: &nets.face_field,
        codes: FieldCodes {
            shape: shape.view(),
            appearance: appearance.view(),
            gaze: None,
        },
        encoding: &cfg.encoding,
        origin: [0.0; 3],
    };
    let all: Vec<usize> = (0..rays.len()).collect();
    let (face, face_trace) = trace_feature_map(&rays, &all, &face_traced, &cfg.sampling, None, keep).stage("face render")?;

    let reg_in = concatenate(Axis(0), &[shape.view(), appearance.view()])
        .expect("1-d codes")
        .insert_axis(Axis(0));
    let (shape_out, shape_cache) = nets.regressors.shape.forward_cached(reg_in.view()).stage("eye shape regression")?;
    let (app_out, appearance_cache) = nets
        .regressors
        .appearance
        .forward_cached(reg_in.view())
        .stage("eye appearance regression")?;
    let gaze_emb = embed_gaze::<T>(gaze, &cfg.encoding);
    let masks = feature_masks(cfg, camera, eyes).stage("eye masks")?;

    let (ds, da) = (cfg.latent.eye_shape, cfg.latent.eye_appearance);
    let eye_codes: [(Array1<T>, Array1<T>); 2] = std::array::from_fn(|side| {
        (
            shape_out.slice(s![0, side * ds..(side + 1) * ds]).to_owned(),
            app_out.slice(s![0, side * da..(side + 1) * da]).to_owned(),
        )
    });
    let mut eye_maps = Vec::with_capacity(2);
    let mut eye_traces = Vec::with_capacity(2);
    for side in 0..2 {
        let traced = TracedField {
            field: &nets.eye_field,
            codes: FieldCodes {
                shape: eye_codes[side].0.view(),
                appearance: eye_codes[side].1.view(),
                gaze: Some(gaze_emb.view()),
            },
            encoding: &cfg.encoding,
            origin: eyes.centers[side],
        };
        let ids = masked_rays(&masks[side]);
        let (map, trace) = trace_feature_map(&rays, &ids, &traced, &cfg.sampling, Some(&masks[side]), keep).stage("eye render")?;
        eye_maps.push(map);
        eye_traces.push(trace);
    }
    let left = eye_maps.pop().expect("two eyes");
    let right = eye_maps.pop().expect("two eyes");
    let global = merge_features(&face, &right, &left, &cfg.merge).stage("merge")?;
    let (image, decoder_cache) = if keep {
        let (img, c) = nets.decoder.forward_cached(global.features.view()).stage("decoder")?;
        (img, Some(c))
    } else {
        (nets.decoder.neural_render(global.features.view()).stage("decoder")?, None)
    };
    let out = PipelineOutput {
        image,
        face,
        eyes: [right, left],
        masks,
        global,
    };
    let cache = decoder_cache.map(|decoder_cache| {
        let left_t = eye_traces.pop().expect("two eyes");
        let right_t = eye_traces.pop().expect("two eyes");
        PipelineCache {
            shape,
            appearance,
            gaze: gaze_emb,
            face_trace,
            eye_traces: [right_t, left_t],
            eye_codes,
            shape_cache,
            appearance_cache,
            decoder_cache,
        }
    });
    Ok((out, cache))
}

/// Full pipeline render to a `3 x H x W` image in `[0, 1]`.
pub fn render_full<T: Real>(
    cfg: &ModelConfig,
    nets: &Networks<T>,
    camera: &CameraSpec,
    latent: &FaceLatent<T>,
    gaze: &GazeVector,
    eyes: &EyeGeometry,
) -> Result<Array3<T>> {
    forward(cfg, nets, camera, latent, gaze, eyes, false).map(|(o, _)| o.image)
}

/// Backward pass for `d_image = dL/dimage`. Network gradients accumulate
/// into `grad`; the returned latent holds `dL/dlatent`.
pub fn backward<T: Real>(
    cfg: &ModelConfig,
    nets: &Networks<T>,
    out: &PipelineOutput<T>,
    cache: &PipelineCache<T>,
    eyes: &EyeGeometry,
    d_image: &Array3<T>,
    grad: &mut Networks<T>,
) -> FaceLatent<T> {
    let d_global = nets.decoder.backward(&cache.decoder_cache, d_image.view(), &mut grad.decoder);
    let [g_face, g_right, g_left] = merge_backward(&out.face, &out.eyes[0], &out.eyes[1], &out.global, d_global.view(), &cfg.merge);

    let face_traced = TracedField {
        field: &nets.face_field,
        codes: FieldCodes {
            shape: cache.shape.view(),
            appearance: cache.appearance.view(),
            gaze: None,
        },
        encoding: &cfg.encoding,
        origin: [0.0; 3],
    };
    let face_codes = trace_backward(
        &cache.face_trace,
        &face_traced,
        g_face.density.view(),
        g_face.features.view(),
        None,
        &mut grad.face_field,
    );

    let (ds, da) = (cfg.latent.eye_shape, cfg.latent.eye_appearance);
    let mut d_shape_out = Array2::zeros((1, 2 * ds));
    let mut d_app_out = Array2::zeros((1, 2 * da));
    for (side, g) in [g_right, g_left].iter().enumerate() {
        let traced = TracedField {
            field: &nets.eye_field,
            codes: FieldCodes {
                shape: cache.eye_codes[side].0.view(),
                appearance: cache.eye_codes[side].1.view(),
                gaze: Some(cache.gaze.view()),
            },
            encoding: &cfg.encoding,
            origin: eyes.centers[side],
        };
        let codes = trace_backward(
            &cache.eye_traces[side],
            &traced,
            g.density.view(),
            g.features.view(),
            Some(&out.masks[side]),
            &mut grad.eye_field,
        );
        d_shape_out.slice_mut(s![0, side * ds..(side + 1) * ds]).assign(&codes.shape);
        d_app_out.slice_mut(s![0, side * da..(side + 1) * da]).assign(&codes.appearance);
    }
    let d_in_shape = nets
        .regressors
        .shape
        .backward(&cache.shape_cache, d_shape_out.view(), &mut grad.regressors.shape);
    let d_in_app = nets
        .regressors
        .appearance
        .backward(&cache.appearance_cache, d_app_out.view(), &mut grad.regressors.appearance);
    let d_in = (d_in_shape + d_in_app).remove_axis(Axis(0));

    let l = &cfg.latent;
    let (ls, lid, ltex) = (l.shape(), l.identity, l.texture);
    let d_shape = &face_codes.shape + &d_in.slice(s![..ls]);
    let d_app = &face_codes.appearance + &d_in.slice(s![ls..]);
    FaceLatent {
        identity: d_shape.slice(s![..lid]).to_owned(),
        expression: d_shape.slice(s![lid..]).to_owned(),
        texture: d_app.slice(s![..ltex]).to_owned(),
        illumination: d_app.slice(s![ltex..]).to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::datagen::{ToySceneParams, ORBIT_DISTANCE};
    use crate::nn::{flatten, uniform_matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraSpec {
        CameraSpec::orbit(10.0, 5.0, ORBIT_DISTANCE, Intrinsics::default()).with_bounds(1.0, 3.5)
    }

    fn random_latent(dims: &LatentDims, rng: &mut ChaCha8Rng) -> FaceLatent<f64> {
        let mut l = FaceLatent::zeros(dims);
        for a in crate::encodings::Attribute::ALL {
            let v = l.attribute_mut(a);
            let n = v.len();
            v.assign(&uniform_matrix::<f64, _>(1, n, 1.0, rng).row(0));
        }
        l
    }

    #[test]
    fn profiles_validate_and_size_images() {
        let d = ModelConfig::desk();
        d.validate().unwrap();
        assert_eq!((d.image_height(), d.image_width()), (64, 64));
        let p = ModelConfig::paper_shape();
        p.validate().unwrap();
        assert_eq!((p.image_height(), p.image_width()), (512, 512));
        ModelConfig::tiny().validate().unwrap();
        let mut bad = ModelConfig::tiny();
        bad.eye_field.gaze_dim += 1;
        assert!(bad.validate().is_err());
        assert_eq!("paper-shape".parse::<Profile>().unwrap(), Profile::PaperShape);
    }

    #[test]
    fn eyes_facing_away_leave_the_face_map_untouched() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nets = Networks::<f64>::init(&cfg, &mut rng);
        let latent = random_latent(&cfg.latent, &mut rng);
        let mut eyes = ToySceneParams::default().eye_geometry();
        eyes.normal = [0.0, 0.0, 1.0];
        let (out, _) = forward(&cfg, &nets, &camera(), &latent, &GazeVector::forward(), &eyes, false).unwrap();
        assert!(out.eyes.iter().all(|e| e.density.iter().all(|&d| d == 0.0)));
        for (a, b) in out.global.features.iter().zip(out.face.features.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let gaze = GazeVector::from_pitch_yaw_degrees(10.0, -20.0);
        let other = render_full(&cfg, &nets, &camera(), &latent, &gaze, &eyes).unwrap();
        assert_eq!(other, out.image);
    }

    #[test]
    fn render_is_deterministic_and_gaze_sensitive() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nets = Networks::<f64>::init(&cfg, &mut rng);
        let latent = random_latent(&cfg.latent, &mut rng);
        let eyes = ToySceneParams::default().eye_geometry();
        let a = render_full(&cfg, &nets, &camera(), &latent, &GazeVector::forward(), &eyes).unwrap();
        let b = render_full(&cfg, &nets, &camera(), &latent, &GazeVector::forward(), &eyes).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (3, cfg.image_height(), cfg.image_width()));
        let g = GazeVector::from_pitch_yaw_degrees(20.0, 20.0);
        let c = render_full(&cfg, &nets, &camera(), &latent, &g, &eyes).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_frames_and_bad_latents_are_rejected() {
        let cfg = ModelConfig::tiny();
        let bank = LatentBank::<f64>::zeros(&cfg.latent, ["s00"], [("f0", "s00")]);
        assert!(bank.face_latent("f0").is_ok());
        assert!(matches!(bank.face_latent("nope"), Err(Error::Unknown { kind: "frame", .. })));
        let nets = Networks::<f64>::zeros(&cfg);
        let mut latent = bank.face_latent("f0").unwrap();
        latent.texture[0] = f64::NAN;
        let eyes = ToySceneParams::default().eye_geometry();
        let err = render_full(&cfg, &nets, &camera(), &latent, &GazeVector::forward(), &eyes).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "latent", .. }), "{err}");
    }

    #[test]
    fn end_to_end_gradients_match_central_differences() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nets = Networks::<f64>::init(&cfg, &mut rng);
        let latent = random_latent(&cfg.latent, &mut rng);
        let eyes = ToySceneParams::default().eye_geometry();
        let gaze = GazeVector::from_pitch_yaw_degrees(8.0, -12.0);
        let cam = camera();
        let (h, w) = (cfg.image_height(), cfg.image_width());
        let probe = uniform_matrix::<f64, _>(3, h * w, 1.0, &mut rng)
            .into_shape_with_order((3, h, w))
            .unwrap();
        let loss = |n: &Networks<f64>, l: &FaceLatent<f64>| (render_full(&cfg, n, &cam, l, &gaze, &eyes).unwrap() * &probe).sum();

        let (out, cache) = forward(&cfg, &nets, &cam, &latent, &gaze, &eyes, true).unwrap();
        assert!(out.masks.iter().all(|m| m.grid.sum() > 0.0));
        let mut grad = Networks::zeros(&cfg);
        let d_lat = backward(&cfg, &nets, &out, &cache.unwrap(), &eyes, &probe, &mut grad);

        let step = 1e-5;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-2 * fd.abs().max(an.abs()) + 1e-7;
        for a in crate::encodings::Attribute::ALL {
            for k in 0..latent.attribute(a).len() {
                let mut p = latent.clone();
                p.attribute_mut(a)[k] += step;
                let mut m = latent.clone();
                m.attribute_mut(a)[k] -= step;
                let fd = (loss(&nets, &p) - loss(&nets, &m)) / (2.0 * step);
                let an = d_lat.attribute(a)[k];
                assert!(close(fd, an), "{a}[{k}]: fd {fd} analytic {an}");
            }
        }

        let flat = flatten(&nets);
        let g = flatten(&grad);
        let mut names = Vec::new();
        nets.visit("", &mut |n, s| names.extend(std::iter::repeat_n(n.to_string(), s.len())));
        let mut checked_eye = 0;
        for idx in (0..flat.len()).step_by(flat.len() / 97 + 1) {
            let mut p = nets.clone();
            let mut pf = flat.clone();
            pf[idx] += step;
            crate::nn::unflatten(&mut p, &pf);
            let mut m = nets.clone();
            pf[idx] -= 2.0 * step;
            crate::nn::unflatten(&mut m, &pf);
            let fd = (loss(&p, &latent) - loss(&m, &latent)) / (2.0 * step);
            assert!(close(fd, g[idx]), "{}: fd {fd} analytic {}", names[idx], g[idx]);
            if names[idx].starts_with("eye_field") && g[idx] != 0.0 {
                checked_eye += 1;
            }
        }
        assert!(checked_eye > 0);
    }
}
