//! MLPs deriving per-eye shape and appearance codes from the face codes.
//! One pass produces both sides, laid out `[right | left]`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward, relu_inplace, Linear, Parameters};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub hidden_width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Face shape code width plus face appearance code width.
    pub input_dim: usize,
    /// Width of one side's output code.
    pub output_dim: usize,
}

impl RegressorConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            hidden_width: 64,
            depth: 2,
            input_dim,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.hidden_width == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("invalid regressor config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EyeCodeRegressor<T> {
    pub config: RegressorConfig,
    pub layers: Vec<Linear<T>>,
}

#[derive(Clone, Debug)]
pub struct RegressorCache<T> {
    /// Input of every layer; hidden entries are post-ReLU.
    inputs: Vec<Array2<T>>,
}

impl<T: Real> EyeCodeRegressor<T> {
    fn widths(config: &RegressorConfig) -> Vec<usize> {
        let mut w = vec![config.input_dim];
        w.extend(std::iter::repeat_n(config.hidden_width, config.depth));
        w.push(2 * config.output_dim);
        w
    }

    pub fn zeros(config: RegressorConfig) -> Self {
        let w = Self::widths(&config);
        Self {
            layers: w.windows(2).map(|p| Linear::zeros(p[0], p[1])).collect(),
            config,
        }
    }

    pub fn init<R: Rng>(config: RegressorConfig, rng: &mut R) -> Self {
        let w = Self::widths(&config);
        let n = w.len() - 1;
        let layers = w
            .windows(2)
            .enumerate()
            .map(|(i, p)| {
                let gain = if i + 1 == n { 0.5 } else { 2f64.sqrt() };
                Linear::init(p[0], p[1], gain, rng)
            })
            .collect();
        Self { config, layers }
    }

    /// Batched forward: rows are `[shape code | appearance code]`, output
    /// rows are `[right | left]`.
    pub fn forward_cached(&self, input: ArrayView2<T>) -> Result<(Array2<T>, RegressorCache<T>)> {
        if input.ncols() != self.config.input_dim {
            return Err(Error::shape("regressor input", self.config.input_dim, input.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(x.view());
            if i + 1 < self.layers.len() {
                relu_inplace(&mut y);
            }
            inputs.push(x);
            x = y;
        }
        Ok((x, RegressorCache { inputs }))
    }

    /// Returns `dL/dinput` and accumulates parameter gradients.
    pub fn backward(&self, cache: &RegressorCache<T>, d_out: ArrayView2<T>, grad: &mut EyeCodeRegressor<T>) -> Array2<T> {
        let mut d = d_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            d = self.layers[i].backward(cache.inputs[i].view(), d.view(), &mut grad.layers[i]);
            if i > 0 {
                relu_backward(&cache.inputs[i], &mut d);
            }
        }
        d
    }

    /// Both eye codes for one face.
    pub fn regress(&self, shape: ArrayView1<T>, appearance: ArrayView1<T>) -> Result<(Array1<T>, Array1<T>)> {
        let row = concatenate(Axis(0), &[shape, appearance])
            .map_err(|_| Error::shape("regressor input", self.config.input_dim, shape.len() + appearance.len()))?;
        let (out, _) = self.forward_cached(row.insert_axis(Axis(0)).view())?;
        let d = self.config.output_dim;
        Ok((out.slice(s![0, ..d]).to_owned(), out.slice(s![0, d..]).to_owned()))
    }
}

impl<T: Real> Parameters<T> for EyeCodeRegressor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// The shape and appearance regressors.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeRegressors<T> {
    pub shape: EyeCodeRegressor<T>,
    pub appearance: EyeCodeRegressor<T>,
}

impl<T: Real> EyeRegressors<T> {
    pub fn regress_eye_shape(&self, z_shp: ArrayView1<T>, z_app: ArrayView1<T>) -> Result<(Array1<T>, Array1<T>)> {
        self.shape.regress(z_shp, z_app)
    }

    pub fn regress_eye_appearance(&self, z_shp: ArrayView1<T>, z_app: ArrayView1<T>) -> Result<(Array1<T>, Array1<T>)> {
        self.appearance.regress(z_shp, z_app)
    }
}

impl<T: Real> Parameters<T> for EyeRegressors<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.shape.visit(&join(prefix, "shape"), f);
        self.appearance.visit(&join(prefix, "appearance"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.shape.visit_mut(&join(prefix, "shape"), f);
        self.appearance.visit_mut(&join(prefix, "appearance"), f);
    }
}
