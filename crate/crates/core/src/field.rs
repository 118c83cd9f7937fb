//! Conditional implicit field: encoded points plus latent codes in,
//! non-negative density and an intermediate feature vector out.
//!
//! The trunk sees `(γ_p, Z_shp[, Z_gaze])` and re-injects `γ_p` at its
//! midpoint. The density head reads the trunk only; the appearance code is
//! added in front of the feature head, so geometry never depends on it.
//! Codes are constant within a call, so their contribution to the first
//! layer (and to the feature head) is folded into a per-call bias.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward, relu_inplace, sigmoid, softplus, uniform_matrix, Linear, Parameters};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldVariant {
    Face,
    Eye,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityActivation {
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub variant: FieldVariant,
    pub hidden_width: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub density_activation: DensityActivation,
    pub position_dim: usize,
    pub shape_dim: usize,
    pub appearance_dim: usize,
    /// Zero for the face variant.
    pub gaze_dim: usize,
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("field depth {} < 2", self.depth)));
        }
        if self.feature_dim == 0 || self.hidden_width == 0 {
            return Err(Error::Config("field widths must be positive".into()));
        }
        match (self.variant, self.gaze_dim) {
            (FieldVariant::Face, 0) => Ok(()),
            (FieldVariant::Eye, g) if g > 0 => Ok(()),
            (v, g) => Err(Error::Config(format!("{v:?} field with gaze_dim {g}"))),
        }
    }

    /// Index of the hidden layer that also receives `γ_p`.
    pub fn skip_layer(&self) -> usize {
        self.depth / 2
    }

    fn code_dim(&self) -> usize {
        self.shape_dim + self.gaze_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitField<T> {
    pub config: FieldConfig,
    /// `γ_p -> hidden`, carries the first-layer bias.
    pub input: Linear<T>,
    /// `[Z_shp ‖ Z_gaze] -> hidden`.
    pub code_weight: Array2<T>,
    pub hidden: Vec<Linear<T>>,
    /// Extra `γ_p -> hidden` weights of the skip layer.
    pub skip_weight: Array2<T>,
    pub density: Linear<T>,
    pub feature: Linear<T>,
    /// `Z_app -> feature`.
    pub appearance_weight: Array2<T>,
}

/// Per-call conditioning codes.
#[derive(Clone, Copy, Debug)]
pub struct FieldCodes<'a, T> {
    pub shape: ArrayView1<'a, T>,
    pub appearance: ArrayView1<'a, T>,
    pub gaze: Option<ArrayView1<'a, T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput<T> {
    /// `n` densities, all `>= 0`.
    pub density: Array1<T>,
    /// `n x feature_dim`.
    pub features: Array2<T>,
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct FieldCache<T> {
    code: Array1<T>,
    appearance: Array1<T>,
    /// ReLU outputs of every trunk layer.
    activations: Vec<Array2<T>>,
    density_pre: Array1<T>,
}

/// Gradients with respect to the conditioning codes.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeGrads<T> {
    pub shape: Array1<T>,
    pub appearance: Array1<T>,
    pub gaze: Option<Array1<T>>,
}

impl<T: Real> ImplicitField<T> {
    pub fn zeros(config: FieldConfig) -> Self {
        let w = config.hidden_width;
        Self {
            config,
            input: Linear::zeros(config.position_dim, w),
            code_weight: Array2::zeros((config.code_dim(), w)),
            hidden: (1..config.depth).map(|_| Linear::zeros(w, w)).collect(),
            skip_weight: Array2::zeros((config.position_dim, w)),
            density: Linear::zeros(w, 1),
            feature: Linear::zeros(w, config.feature_dim),
            appearance_weight: Array2::zeros((config.appearance_dim, config.feature_dim)),
        }
    }

    pub fn init<R: Rng>(config: FieldConfig, rng: &mut R) -> Self {
        let w = config.hidden_width;
        let relu = 2f64.sqrt();
        // split fan-in between the concatenated inputs of each layer
        let in0 = (config.position_dim + config.code_dim()) as f64;
        let pos_gain = relu * (config.position_dim as f64 / in0).sqrt();
        let code_gain = relu * (config.code_dim().max(1) as f64 / in0).sqrt();
        let skip_in = (w + config.position_dim) as f64;
        let mut field = Self::zeros(config);
        field.input = Linear::init(config.position_dim, w, pos_gain, rng);
        field.code_weight = uniform_matrix(config.code_dim(), w, code_gain, rng);
        for (l, layer) in field.hidden.iter_mut().enumerate() {
            let gain = if l + 1 == config.skip_layer() {
                relu * (w as f64 / skip_in).sqrt()
            } else {
                relu
            };
            *layer = Linear::init(w, w, gain, rng);
        }
        field.skip_weight = uniform_matrix(config.position_dim, w, relu * (config.position_dim as f64 / skip_in).sqrt(), rng);
        field.density = Linear::init(w, 1, 1.0, rng);
        let feat_in = (w + config.appearance_dim) as f64;
        field.feature = Linear::init(w, config.feature_dim, (w as f64 / feat_in).sqrt(), rng);
        field.appearance_weight = uniform_matrix(
            config.appearance_dim,
            config.feature_dim,
            (config.appearance_dim.max(1) as f64 / feat_in).sqrt(),
            rng,
        );
        field
    }

    fn check_inputs(&self, points: &ArrayView2<T>, codes: &FieldCodes<T>) -> Result<()> {
        let c = &self.config;
        if points.ncols() != c.position_dim {
            return Err(Error::shape("field points", c.position_dim, points.ncols()));
        }
        if codes.shape.len() != c.shape_dim {
            return Err(Error::shape("field shape code", c.shape_dim, codes.shape.len()));
        }
        if codes.appearance.len() != c.appearance_dim {
            return Err(Error::shape("field appearance code", c.appearance_dim, codes.appearance.len()));
        }
        match (c.variant, &codes.gaze) {
            (FieldVariant::Face, None) => Ok(()),
            (FieldVariant::Face, Some(_)) => Err(Error::Domain("the face field takes no gaze code".into())),
            (FieldVariant::Eye, None) => Err(Error::Domain("the eye field requires a gaze code".into())),
            (FieldVariant::Eye, Some(g)) if g.len() != c.gaze_dim => {
                Err(Error::shape("field gaze code", c.gaze_dim, g.len()))
            }
            (FieldVariant::Eye, Some(_)) => Ok(()),
        }
    }

    fn code_vector(&self, codes: &FieldCodes<T>) -> Array1<T> {
        let mut code = Array1::zeros(self.config.code_dim());
        let s = self.config.shape_dim;
        code.slice_mut(ndarray::s![..s]).assign(&codes.shape);
        if let Some(g) = &codes.gaze {
            code.slice_mut(ndarray::s![s..]).assign(g);
        }
        code
    }

    pub fn forward(&self, points: ArrayView2<T>, codes: FieldCodes<T>) -> Result<FieldOutput<T>> {
        self.forward_cached(points, codes).map(|(o, _)| o)
    }

    pub fn forward_cached(&self, points: ArrayView2<T>, codes: FieldCodes<T>) -> Result<(FieldOutput<T>, FieldCache<T>)> {
        self.check_inputs(&points, &codes)?;
        if !crate::nn::all_finite(self) {
            return Err(Error::NonFinite {
                stage: "field parameters".into(),
                detail: format!("{:?} field", self.config.variant),
            });
        }
        let code = self.code_vector(&codes);
        let code_bias = code.dot(&self.code_weight);
        let mut h = self.input.forward(points);
        h += &code_bias;
        relu_inplace(&mut h);
        let mut activations = Vec::with_capacity(self.config.depth);
        let skip = self.config.skip_layer();
        for (l, layer) in self.hidden.iter().enumerate() {
            let mut next = layer.forward(h.view());
            if l + 1 == skip {
                ndarray::linalg::general_mat_mul(T::one(), &points, &self.skip_weight, T::one(), &mut next);
            }
            relu_inplace(&mut next);
            activations.push(h);
            h = next;
        }
        let density_pre = self.density.forward(h.view()).remove_axis(Axis(1));
        let density = density_pre.mapv(softplus);
        let mut features = self.feature.forward(h.view());
        features += &codes.appearance.dot(&self.appearance_weight);
        activations.push(h);
        let cache = FieldCache {
            code,
            appearance: codes.appearance.to_owned(),
            activations,
            density_pre,
        };
        Ok((FieldOutput { density, features }, cache))
    }

    /// Accumulates parameter gradients into `grad` and returns code
    /// gradients. `points` must be the matrix passed to the forward call.
    pub fn backward(
        &self,
        points: ArrayView2<T>,
        cache: &FieldCache<T>,
        d_density: ArrayView1<T>,
        d_features: ArrayView2<T>,
        grad: &mut ImplicitField<T>,
    ) -> CodeGrads<T> {
        let acts = &cache.activations;
        let last = acts.last().expect("trunk activations");
        let d_feat_sum = d_features.sum_axis(Axis(0));
        grad.appearance_weight += &outer(cache.appearance.view(), d_feat_sum.view());
        let d_appearance = self.appearance_weight.dot(&d_feat_sum);
        let mut dh = self.feature.backward(last.view(), d_features, &mut grad.feature);

        let d_pre: Array1<T> = ndarray::Zip::from(&d_density)
            .and(&cache.density_pre)
            .map_collect(|&d, &p| d * sigmoid(p));
        let d_pre2 = d_pre.insert_axis(Axis(1));
        dh += &self.density.backward(last.view(), d_pre2.view(), &mut grad.density);

        let skip = self.config.skip_layer();
        for l in (0..self.hidden.len()).rev() {
            relu_backward(&acts[l + 1], &mut dh);
            if l + 1 == skip {
                ndarray::linalg::general_mat_mul(T::one(), &points.t(), &dh, T::one(), &mut grad.skip_weight);
            }
            dh = self.hidden[l].backward(acts[l].view(), dh.view(), &mut grad.hidden[l]);
        }
        relu_backward(&acts[0], &mut dh);
        self.input.accumulate(points, dh.view(), &mut grad.input);
        let d_code_bias = dh.sum_axis(Axis(0));
        grad.code_weight += &outer(cache.code.view(), d_code_bias.view());
        let d_code = self.code_weight.dot(&d_code_bias);
        let s = self.config.shape_dim;
        CodeGrads {
            shape: d_code.slice(ndarray::s![..s]).to_owned(),
            appearance: d_appearance,
            gaze: (self.config.gaze_dim > 0).then(|| d_code.slice(ndarray::s![s..]).to_owned()),
        }
    }
}

pub(crate) fn outer<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> Array2<T> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

impl<T: Real> Parameters<T> for ImplicitField<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.input.visit(&join(prefix, "input"), f);
        self.code_weight.visit(&join(prefix, "code_weight"), f);
        for (l, layer) in self.hidden.iter().enumerate() {
            layer.visit(&join(prefix, &format!("hidden{}", l + 1)), f);
        }
        self.skip_weight.visit(&join(prefix, "skip_weight"), f);
        self.density.visit(&join(prefix, "density"), f);
        self.feature.visit(&join(prefix, "feature"), f);
        self.appearance_weight.visit(&join(prefix, "appearance_weight"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.input.visit_mut(&join(prefix, "input"), f);
        self.code_weight.visit_mut(&join(prefix, "code_weight"), f);
        for (l, layer) in self.hidden.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("hidden{}", l + 1)), f);
        }
        self.skip_weight.visit_mut(&join(prefix, "skip_weight"), f);
        self.density.visit_mut(&join(prefix, "density"), f);
        self.feature.visit_mut(&join(prefix, "feature"), f);
        self.appearance_weight.visit_mut(&join(prefix, "appearance_weight"), f);
    }
}
