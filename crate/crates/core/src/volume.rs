//! Volume rendering of a conditioned field into a low-resolution density
//! map `F_d` (accumulated opacity) and feature map `F_f`.
//!
//! Each ray is cut into `N_s` equal bins between `near` and `far`; one
//! sample per bin (bin midpoint, or jittered inside the bin when
//! stratified). With `α_k = 1 - exp(-σ_k δ)` and `T_k = Π_{j<k} (1 - α_j)`
//! the weights are `w_k = T_k α_k`, `F_d = Σ w_k`, `F_f = Σ w_k f_k`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::camera::{EyeMask, RayBundle, Vec3};
use crate::encodings::{encode_points, EncodingConfig};
use crate::error::{Error, Result};
use crate::field::{CodeGrads, FieldCache, FieldCodes, ImplicitField};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub samples_per_ray: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 32,
            stratified: false,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::Config(format!(
                "samples_per_ray = {} (need >= 2)",
                self.samples_per_ray
            )));
        }
        Ok(())
    }
}

/// Density map `F_d` (`H x W`) and feature map `F_f` (`C x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub density: Array2<T>,
    pub features: Array3<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            density: Array2::zeros((height, width)),
            features: Array3::zeros((channels, height, width)),
        }
    }

    pub fn channels(&self) -> usize {
        self.features.dim().0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.density.dim()
    }

    /// Writes per-ray results for pixel `index` (row-major).
    pub fn set_pixel(&mut self, index: usize, opacity: T, features: ArrayView1<T>) {
        let w = self.density.ncols();
        let (i, j) = (index / w, index % w);
        self.density[[i, j]] = opacity;
        self.features.slice_mut(s![.., i, j]).assign(&features);
    }
}

/// A field that can be queried at world points.
pub trait FieldQuery<T> {
    fn feature_dim(&self) -> usize;
    /// Densities (`n`) and features (`n x feature_dim`).
    fn query(&self, points: &[Vec3]) -> Result<(Array1<T>, Array2<T>)>;
}

/// An implicit field bound to its codes and the point encoding.
pub struct ConditionedField<'a, T> {
    pub field: &'a ImplicitField<T>,
    pub codes: FieldCodes<'a, T>,
    pub encoding: &'a EncodingConfig,
}

impl<T: Real> FieldQuery<T> for ConditionedField<'_, T> {
    fn feature_dim(&self) -> usize {
        self.field.config.feature_dim
    }

    fn query(&self, points: &[Vec3]) -> Result<(Array1<T>, Array2<T>)> {
        let encoded = encode_points::<T>(points, self.encoding)?;
        let out = self.field.forward(encoded.view(), self.codes)?;
        Ok((out.density, out.features))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bin width and sample depths for ray `ray_index`. Jitter depends only on
/// `(seed, ray_index, k)`, so any subset of rays samples identically.
pub fn sample_depths(near: f64, far: f64, sampling: &SamplingConfig, ray_index: usize) -> (Vec<f64>, f64) {
    let n = sampling.samples_per_ray;
    let delta = (far - near) / n as f64;
    let depths = (0..n)
        .map(|k| {
            let offset = if sampling.stratified {
                let h = splitmix(sampling.seed ^ splitmix((ray_index as u64) << 20 | k as u64));
                (h >> 11) as f64 / (1u64 << 53) as f64
            } else {
                0.5
            };
            near + (k as f64 + offset) * delta
        })
        .collect();
    (depths, delta)
}

/// Sample positions for the selected rays, ray-major.
pub fn sample_points(rays: &RayBundle, ray_ids: &[usize], sampling: &SamplingConfig) -> (Vec<Vec3>, f64) {
    let mut points = Vec::with_capacity(ray_ids.len() * sampling.samples_per_ray);
    let mut delta = 0.0;
    for &r in ray_ids {
        let (depths, d) = sample_depths(rays.near, rays.far, sampling, r);
        delta = d;
        let (o, dir) = (rays.origins[r], rays.directions[r]);
        points.extend(depths.iter().map(|&t| [o[0] + t * dir[0], o[1] + t * dir[1], o[2] + t * dir[2]]));
    }
    (points, delta)
}

/// Transmittance and weights kept for [`composite_backward`].
#[derive(Clone, Debug)]
pub struct CompositeCache<T> {
    /// `n x (N_s + 1)`, `T_0 = 1`.
    transmittance: Array2<T>,
    /// `n x N_s`.
    weights: Array2<T>,
    delta: T,
}

impl<T: Real> CompositeCache<T> {
    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }
}

/// Alpha-composites `sigma` (`n x N_s`) and `features` (`n*N_s x C`,
/// ray-major). Returns per-ray opacity and features.
pub fn composite<T: Real>(
    sigma: ArrayView2<T>,
    features: ArrayView2<T>,
    delta: f64,
) -> (Array1<T>, Array2<T>, CompositeCache<T>) {
    let (n, ns) = sigma.dim();
    let c = features.ncols();
    let delta_t = T::lit(delta);
    let mut transmittance = Array2::zeros((n, ns + 1));
    let mut weights = Array2::zeros((n, ns));
    let mut opacity = Array1::zeros(n);
    let mut out = Array2::zeros((n, c));
    for r in 0..n {
        // T_k = exp(-Σ_{j<k} σ_j δ) computed through the running product,
        // which is what the weights telescope against.
        let mut trans = T::one();
        transmittance[[r, 0]] = trans;
        let mut acc = T::zero();
        for k in 0..ns {
            let alpha = T::one() - (-sigma[[r, k]] * delta_t).exp();
            let w = trans * alpha;
            weights[[r, k]] = w;
            acc += w;
            trans = trans * (T::one() - alpha);
            transmittance[[r, k + 1]] = trans;
            if w != T::zero() {
                let row = features.row(r * ns + k);
                let mut o = out.row_mut(r);
                o.scaled_add(w, &row);
            }
        }
        opacity[r] = acc;
    }
    (
        opacity,
        out,
        CompositeCache {
            transmittance,
            weights,
            delta: delta_t,
        },
    )
}

/// Gradients of [`composite`] with respect to `sigma` and `features`.
pub fn composite_backward<T: Real>(
    cache: &CompositeCache<T>,
    features: ArrayView2<T>,
    d_opacity: ArrayView1<T>,
    d_features: ArrayView2<T>,
) -> (Array2<T>, Array2<T>) {
    let (n, ns) = cache.weights.dim();
    let c = features.ncols();
    let mut d_sigma = Array2::zeros((n, ns));
    let mut d_feat = Array2::zeros((n * ns, c));
    let mut g = vec![T::zero(); ns];
    for r in 0..n {
        let dfr = d_features.row(r);
        for k in 0..ns {
            let w = cache.weights[[r, k]];
            g[k] = d_opacity[r] + features.row(r * ns + k).dot(&dfr);
            if w != T::zero() {
                d_feat.row_mut(r * ns + k).scaled_add(w, &dfr);
            }
        }
        // dL/dσ_k = δ (T_{k+1} g_k - Σ_{m>k} w_m g_m)
        let mut suffix = T::zero();
        for k in (0..ns).rev() {
            d_sigma[[r, k]] = cache.delta * (cache.transmittance[[r, k + 1]] * g[k] - suffix);
            suffix += cache.weights[[r, k]] * g[k];
        }
    }
    (d_sigma, d_feat)
}

const CHUNK_RAYS: usize = 1024;

fn render_rays<T: Real, Q: FieldQuery<T>>(
    rays: &RayBundle,
    ray_ids: &[usize],
    field: &Q,
    sampling: &SamplingConfig,
    map: &mut FeatureMap<T>,
    mask: Option<&EyeMask>,
) -> Result<()> {
    let ns = sampling.samples_per_ray;
    for chunk in ray_ids.chunks(CHUNK_RAYS) {
        let (points, delta) = sample_points(rays, chunk, sampling);
        let (sigma, feats) = field.query(&points)?;
        check_field_output(&sigma, &feats, chunk, ns, rays.width)?;
        let sigma = sigma.into_shape_with_order((chunk.len(), ns)).expect("ray-major samples");
        let (opacity, out, _) = composite(sigma.view(), feats.view(), delta);
        for (local, &pixel) in chunk.iter().enumerate() {
            match mask {
                Some(m) => {
                    let w = rays.width;
                    let mv = T::lit(m.grid[[pixel / w, pixel % w]]);
                    map.set_pixel(pixel, opacity[local] * mv, out.row(local).mapv(|v| v * mv).view());
                }
                None => map.set_pixel(pixel, opacity[local], out.row(local)),
            }
        }
    }
    Ok(())
}

/// Renders every ray of the bundle.
pub fn render_feature_map<T: Real, Q: FieldQuery<T>>(
    rays: &RayBundle,
    field: &Q,
    sampling: &SamplingConfig,
) -> Result<FeatureMap<T>> {
    sampling.validate()?;
    let mut map = FeatureMap::zeros(field.feature_dim(), rays.height, rays.width);
    let ids: Vec<usize> = (0..rays.len()).collect();
    render_rays(rays, &ids, field, sampling, &mut map, None)?;
    Ok(map)
}

/// Renders the eye branch: both maps multiplied pixelwise by the
/// feature-resolution mask. Pixels where the mask is zero are not traced.
pub fn render_eye_feature_map<T: Real, Q: FieldQuery<T>>(
    rays: &RayBundle,
    field: &Q,
    mask: &EyeMask,
    sampling: &SamplingConfig,
) -> Result<FeatureMap<T>> {
    sampling.validate()?;
    if mask.dims() != (rays.height, rays.width) {
        return Err(Error::shape(
            "eye mask",
            format!("{}x{}", rays.height, rays.width),
            format!("{:?}", mask.dims()),
        ));
    }
    let mut map = FeatureMap::zeros(field.feature_dim(), rays.height, rays.width);
    let ids = masked_rays(mask);
    render_rays(rays, &ids, field, sampling, &mut map, Some(mask))?;
    Ok(map)
}

/// Row-major indices of pixels with a nonzero mask value.
pub fn masked_rays(mask: &EyeMask) -> Vec<usize> {
    mask.grid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// An implicit field with its codes, queried at points expressed relative
/// to `origin` (the world origin for the face, the eye center for an eye).
#[derive(Clone, Copy)]
pub struct TracedField<'a, T> {
    pub field: &'a ImplicitField<T>,
    pub codes: FieldCodes<'a, T>,
    pub encoding: &'a EncodingConfig,
    pub origin: Vec3,
}

struct ChunkTrace<T> {
    rays: Vec<usize>,
    encoded: Array2<T>,
    cache: FieldCache<T>,
    features: Array2<T>,
    composite: CompositeCache<T>,
}

/// Everything the backward pass of [`trace_feature_map`] needs.
pub struct RayTrace<T> {
    chunks: Vec<ChunkTrace<T>>,
    width: usize,
}

fn check_field_output<T: Real>(
    sigma: &Array1<T>,
    feats: &Array2<T>,
    chunk: &[usize],
    ns: usize,
    width: usize,
) -> Result<()> {
    if let Some(bad) = (0..sigma.len()).find(|&p| {
        !sigma[p].is_finite() || sigma[p] < T::zero() || feats.row(p).iter().any(|v| !v.is_finite())
    }) {
        let pixel = chunk[bad / ns];
        return Err(Error::NonFinite {
            stage: "volume rendering".into(),
            detail: format!(
                "field output at pixel ({}, {}) sample {}",
                pixel / width,
                pixel % width,
                bad % ns
            ),
        });
    }
    Ok(())
}

/// Renders the selected rays, optionally scaling by a mask, and keeps the
/// intermediate state for [`trace_backward`] when `keep` is set.
pub fn trace_feature_map<T: Real>(
    rays: &RayBundle,
    ray_ids: &[usize],
    traced: &TracedField<T>,
    sampling: &SamplingConfig,
    mask: Option<&EyeMask>,
    keep: bool,
) -> Result<(FeatureMap<T>, RayTrace<T>)> {
    sampling.validate()?;
    if let Some(m) = mask {
        if m.dims() != (rays.height, rays.width) {
            return Err(Error::shape(
                "eye mask",
                format!("{}x{}", rays.height, rays.width),
                format!("{:?}", m.dims()),
            ));
        }
    }
    let ns = sampling.samples_per_ray;
    let w = rays.width;
    let mut map = FeatureMap::zeros(traced.field.config.feature_dim, rays.height, rays.width);
    let mut chunks = Vec::new();
    for chunk in ray_ids.chunks(CHUNK_RAYS) {
        let (mut points, delta) = sample_points(rays, chunk, sampling);
        for p in &mut points {
            *p = [p[0] - traced.origin[0], p[1] - traced.origin[1], p[2] - traced.origin[2]];
        }
        let encoded = encode_points::<T>(&points, traced.encoding)?;
        let (out, cache) = traced.field.forward_cached(encoded.view(), traced.codes)?;
        check_field_output(&out.density, &out.features, chunk, ns, w)?;
        let sigma = out.density.into_shape_with_order((chunk.len(), ns)).expect("ray-major samples");
        let (opacity, feat, comp) = composite(sigma.view(), out.features.view(), delta);
        for (local, &pixel) in chunk.iter().enumerate() {
            match mask {
                Some(m) => {
                    let mv = T::lit(m.grid[[pixel / w, pixel % w]]);
                    map.set_pixel(pixel, opacity[local] * mv, feat.row(local).mapv(|v| v * mv).view());
                }
                None => map.set_pixel(pixel, opacity[local], feat.row(local)),
            }
        }
        if keep {
            chunks.push(ChunkTrace {
                rays: chunk.to_vec(),
                encoded,
                cache,
                features: out.features,
                composite: comp,
            });
        }
    }
    Ok((map, RayTrace { chunks, width: w }))
}

/// Backward of [`trace_feature_map`]: accumulates field parameter gradients
/// and returns the summed code gradients.
pub fn trace_backward<T: Real>(
    trace: &RayTrace<T>,
    traced: &TracedField<T>,
    d_density: ArrayView2<T>,
    d_features: ArrayView3<T>,
    mask: Option<&EyeMask>,
    grad: &mut ImplicitField<T>,
) -> CodeGrads<T> {
    let cfg = &traced.field.config;
    let c = cfg.feature_dim;
    let w = trace.width;
    let mut total = CodeGrads {
        shape: Array1::zeros(cfg.shape_dim),
        appearance: Array1::zeros(cfg.appearance_dim),
        gaze: (cfg.gaze_dim > 0).then(|| Array1::zeros(cfg.gaze_dim)),
    };
    for ch in &trace.chunks {
        let n = ch.rays.len();
        let mut d_op = Array1::zeros(n);
        let mut d_ft = Array2::zeros((n, c));
        for (local, &pixel) in ch.rays.iter().enumerate() {
            let (i, j) = (pixel / w, pixel % w);
            let mv = mask.map_or(T::one(), |m| T::lit(m.grid[[i, j]]));
            d_op[local] = d_density[[i, j]] * mv;
            for k in 0..c {
                d_ft[[local, k]] = d_features[[k, i, j]] * mv;
            }
        }
        let (d_sigma, d_feat) = composite_backward(&ch.composite, ch.features.view(), d_op.view(), d_ft.view());
        let d_sigma = d_sigma.into_shape_with_order(ch.features.nrows()).expect("ray-major samples");
        let g = traced
            .field
            .backward(ch.encoded.view(), &ch.cache, d_sigma.view(), d_feat.view(), grad);
        total.shape += &g.shape;
        total.appearance += &g.appearance;
        if let (Some(t), Some(gg)) = (total.gaze.as_mut(), g.gaze.as_ref()) {
            *t += gg;
        }
    }
    total
}
