//! Fourier feature encodings for sample points and gaze vectors, and the
//! partitioned latent codes that condition the fields.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_freqs_position: usize,
    pub num_freqs_gaze: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_freqs_position: 10,
            num_freqs_gaze: 4,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_freqs_position == 0 || self.num_freqs_gaze == 0 {
            return Err(Error::Config("encoding frequency counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        encoded_dim(3, self.num_freqs_position, self.include_input)
    }

    pub fn gaze_dim(&self) -> usize {
        encoded_dim(3, self.num_freqs_gaze, false)
    }
}

/// Output width of [`fourier_encode`] for a `d`-vector.
pub fn encoded_dim(d: usize, num_freqs: usize, include_input: bool) -> usize {
    d * (usize::from(include_input) + 2 * num_freqs)
}

/// `[x] ‖ sin(2^k π x) ‖ cos(2^k π x)` for `k = 0..num_freqs`, each block
/// elementwise over `x`.
pub fn fourier_encode(x: &[f64], num_freqs: usize, include_input: bool) -> Result<Vec<f64>> {
    let mut out = vec![0.0; encoded_dim(x.len(), num_freqs, include_input)];
    fourier_encode_into(x, num_freqs, include_input, &mut out)?;
    Ok(out)
}

fn fourier_encode_into(x: &[f64], num_freqs: usize, include_input: bool, out: &mut [f64]) -> Result<()> {
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("cannot encode non-finite input {bad}")));
    }
    let d = x.len();
    let mut o = 0;
    if include_input {
        out[..d].copy_from_slice(x);
        o = d;
    }
    for k in 0..num_freqs {
        let freq = (1u64 << k) as f64 * PI;
        for (i, &v) in x.iter().enumerate() {
            let (s, c) = (freq * v).sin_cos();
            out[o + i] = s;
            out[o + d + i] = c;
        }
        o += 2 * d;
    }
    Ok(())
}

/// Encodes a batch of 3D points into an `n x position_dim` matrix. The
/// trigonometry runs in double precision regardless of `T`.
pub fn encode_points<T: Real>(points: &[[f64; 3]], cfg: &EncodingConfig) -> Result<Array2<T>> {
    let dim = cfg.position_dim();
    let mut out = Array2::zeros((points.len(), dim));
    let mut buf = vec![0.0; dim];
    for (row, p) in out.rows_mut().into_iter().zip(points) {
        fourier_encode_into(p, cfg.num_freqs_position, cfg.include_input, &mut buf)?;
        for (dst, &src) in row.into_iter().zip(&buf) {
            *dst = T::lit(src);
        }
    }
    Ok(out)
}

pub const UNIT_TOLERANCE: f64 = 1e-6;
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;

/// Unit eye direction in the head coordinate system (x right in the image
/// of a frontal camera, y down, z away from a frontal camera; the face
/// looks along -z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct GazeVector {
    direction: [f64; 3],
}

impl GazeVector {
    /// Accepts vectors within `1e-3` of unit norm and renormalizes them.
    pub fn new(direction: [f64; 3]) -> Result<Self> {
        let n = norm3(direction);
        if !n.is_finite() || (n - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::Domain(format!(
                "gaze vector {direction:?} has norm {n}, expected unit"
            )));
        }
        Ok(Self {
            direction: direction.map(|c| c / n),
        })
    }

    /// Gaze looking straight out of the face.
    pub fn forward() -> Self {
        Self {
            direction: [0.0, 0.0, -1.0],
        }
    }

    /// Pitch (positive = up) and yaw in radians.
    pub fn from_pitch_yaw(pitch: f64, yaw: f64) -> Self {
        let d = [-pitch.cos() * yaw.sin(), -pitch.sin(), -pitch.cos() * yaw.cos()];
        Self::new(d).expect("pitch/yaw map to unit vectors")
    }

    pub fn from_pitch_yaw_degrees(pitch: f64, yaw: f64) -> Self {
        Self::from_pitch_yaw(pitch.to_radians(), yaw.to_radians())
    }

    pub fn to_pitch_yaw(&self) -> (f64, f64) {
        let [x, y, z] = self.direction;
        ((-y).asin(), (-x).atan2(-z))
    }

    pub fn direction(&self) -> [f64; 3] {
        self.direction
    }

    /// Angle to `other` in degrees.
    pub fn angle_degrees(&self, other: &GazeVector) -> f64 {
        let d: f64 = (0..3).map(|i| self.direction[i] * other.direction[i]).sum();
        d.clamp(-1.0, 1.0).acos().to_degrees()
    }
}

impl TryFrom<[f64; 3]> for GazeVector {
    type Error = Error;
    fn try_from(d: [f64; 3]) -> Result<Self> {
        // Serialized gazes must already be unit length and are kept as written
        let n = norm3(d);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Domain(format!("gaze {d:?} is not unit-norm (|g| = {n})")));
        }
        Ok(GazeVector { direction: d })
    }
}

impl From<GazeVector> for [f64; 3] {
    fn from(g: GazeVector) -> Self {
        g.direction
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Gaze embedding: the Fourier encoding of the direction without the raw
/// input.
pub fn embed_gaze<T: Real>(gaze: &GazeVector, cfg: &EncodingConfig) -> Array1<T> {
    fourier_encode(&gaze.direction, cfg.num_freqs_gaze, false)
        .expect("unit vectors are finite")
        .into_iter()
        .map(T::lit)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub identity: usize,
    pub expression: usize,
    pub texture: usize,
    pub illumination: usize,
    pub eye_shape: usize,
    pub eye_appearance: usize,
}

impl Default for LatentDims {
    fn default() -> Self {
        Self {
            identity: 32,
            expression: 16,
            texture: 32,
            illumination: 9,
            eye_shape: 16,
            eye_appearance: 16,
        }
    }
}

impl LatentDims {
    pub fn shape(&self) -> usize {
        self.identity + self.expression
    }

    pub fn appearance(&self) -> usize {
        self.texture + self.illumination
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Identity,
    Expression,
    Texture,
    Illumination,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Identity,
        Attribute::Expression,
        Attribute::Texture,
        Attribute::Illumination,
    ];
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Attribute::Identity => "identity",
            Attribute::Expression => "expression",
            Attribute::Texture => "texture",
            Attribute::Illumination => "illumination",
        };
        f.write_str(s)
    }
}

impl FromStr for Attribute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(Attribute::Identity),
            "expression" | "exp" => Ok(Attribute::Expression),
            "texture" | "tex" => Ok(Attribute::Texture),
            "illumination" | "ill" => Ok(Attribute::Illumination),
            other => Err(Error::Unknown {
                kind: "attribute",
                id: other.to_string(),
            }),
        }
    }
}

/// Face codes. The shape code is `identity ‖ expression`, the appearance
/// code is `texture ‖ illumination`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceLatent<T> {
    pub identity: Array1<T>,
    pub expression: Array1<T>,
    pub texture: Array1<T>,
    pub illumination: Array1<T>,
}

impl<T: Real> FaceLatent<T> {
    pub fn zeros(dims: &LatentDims) -> Self {
        Self {
            identity: Array1::zeros(dims.identity),
            expression: Array1::zeros(dims.expression),
            texture: Array1::zeros(dims.texture),
            illumination: Array1::zeros(dims.illumination),
        }
    }

    pub fn shape_code(&self) -> Array1<T> {
        concatenate(Axis(0), &[self.identity.view(), self.expression.view()]).unwrap()
    }

    pub fn appearance_code(&self) -> Array1<T> {
        concatenate(Axis(0), &[self.texture.view(), self.illumination.view()]).unwrap()
    }

    pub fn attribute(&self, a: Attribute) -> &Array1<T> {
        match a {
            Attribute::Identity => &self.identity,
            Attribute::Expression => &self.expression,
            Attribute::Texture => &self.texture,
            Attribute::Illumination => &self.illumination,
        }
    }

    pub fn attribute_mut(&mut self, a: Attribute) -> &mut Array1<T> {
        match a {
            Attribute::Identity => &mut self.identity,
            Attribute::Expression => &mut self.expression,
            Attribute::Texture => &mut self.texture,
            Attribute::Illumination => &mut self.illumination,
        }
    }

    pub fn dims_match(&self, dims: &LatentDims) -> bool {
        self.identity.len() == dims.identity
            && self.expression.len() == dims.expression
            && self.texture.len() == dims.texture
            && self.illumination.len() == dims.illumination
    }

    pub fn is_finite(&self) -> bool {
        Attribute::ALL
            .iter()
            .all(|&a| self.attribute(a).iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EyeSide {
    Right,
    Left,
}

/// Per-eye conditioning for the eye field.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeCondition<T> {
    pub shape: Array1<T>,
    pub appearance: Array1<T>,
    pub gaze_embedding: Array1<T>,
    pub side: EyeSide,
}

/// Blends the selected attributes `(1 - t) a + t b`; the rest is copied
/// from `a`.
pub fn interpolate_latents<T: Real>(
    a: &FaceLatent<T>,
    b: &FaceLatent<T>,
    t: f64,
    attributes: &[Attribute],
) -> Result<FaceLatent<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation weight {t} outside [0, 1]")));
    }
    for attr in Attribute::ALL {
        if a.attribute(attr).len() != b.attribute(attr).len() {
            return Err(Error::shape(
                "interpolate_latents",
                format!("{attr} dim {}", a.attribute(attr).len()),
                b.attribute(attr).len(),
            ));
        }
    }
    let mut out = a.clone();
    let (wa, wb) = (T::lit(1.0 - t), T::lit(t));
    for &attr in attributes {
        let blended = a.attribute(attr).mapv(|v| v * wa) + b.attribute(attr).mapv(|v| v * wb);
        *out.attribute_mut(attr) = blended;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_input_gives_zero_sines_and_unit_cosines() {
        let e = fourier_encode(&[0.0, 0.0, 0.0], 2, false).unwrap();
        assert_eq!(e.len(), 12);
        assert_eq!(&e[0..3], &[0.0; 3]);
        assert_eq!(&e[3..6], &[1.0; 3]);
        assert_eq!(&e[6..9], &[0.0; 3]);
        assert_eq!(&e[9..12], &[1.0; 3]);
    }

    #[test]
    fn default_position_width_is_63() {
        let cfg = EncodingConfig::default();
        assert_eq!(cfg.position_dim(), 63);
        assert_eq!(fourier_encode(&[0.3, -0.2, 1.7], 10, true).unwrap().len(), 63);
    }

    #[test]
    fn quarter_input_direct_evaluation() {
        let e = fourier_encode(&[0.25, 0.0, 0.0], 1, false).unwrap();
        let s = (PI / 4.0).sin();
        let c = (PI / 4.0).cos();
        let expected = [s, 0.0, 0.0, c, 1.0, 1.0];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(matches!(
            fourier_encode(&[f64::NAN, 0.0, 0.0], 2, true),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn gaze_embedding_axis_aligned() {
        let cfg = EncodingConfig {
            num_freqs_gaze: 1,
            ..Default::default()
        };
        let g = GazeVector::new([0.0, 0.0, 1.0]).unwrap();
        let e: Array1<f64> = embed_gaze(&g, &cfg);
        let expected = [0.0, 0.0, 0.0, 1.0, 1.0, -1.0];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(e, embed_gaze::<f64>(&g, &cfg));
        let ex: Array1<f64> = embed_gaze(&GazeVector::new([1.0, 0.0, 0.0]).unwrap(), &cfg);
        let ey: Array1<f64> = embed_gaze(&GazeVector::new([0.0, 1.0, 0.0]).unwrap(), &cfg);
        assert_ne!(ex, ey);
    }

    #[test]
    fn gaze_norm_window() {
        assert!(GazeVector::new([0.0, 0.0, 1.0005]).is_ok());
        assert!(GazeVector::new([0.0, 0.0, 1.01]).is_err());
        let g = GazeVector::new([0.0, 0.0005, 1.0]).unwrap();
        assert!((norm3(g.direction()) - 1.0).abs() < 1e-12);
        assert!(serde_json::from_str::<GazeVector>("[0.0, 0.0, 1.0005]").is_err());
    }

    #[test]
    fn pitch_yaw_round_trip() {
        let g = GazeVector::from_pitch_yaw_degrees(12.0, -20.0);
        let (p, y) = g.to_pitch_yaw();
        assert!((p.to_degrees() - 12.0).abs() < 1e-9);
        assert!((y.to_degrees() + 20.0).abs() < 1e-9);
        assert_eq!(GazeVector::from_pitch_yaw(0.0, 0.0), GazeVector::forward());
    }

    fn latent(id: f64, ill: [f64; 2]) -> FaceLatent<f64> {
        FaceLatent {
            identity: Array1::from_elem(3, id),
            expression: Array1::from_elem(2, id + 1.0),
            texture: Array1::from_elem(2, id + 2.0),
            illumination: Array1::from_vec(ill.to_vec()),
        }
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = latent(0.0, [0.0, 0.0]);
        let b = latent(5.0, [2.0, 4.0]);
        assert_eq!(interpolate_latents(&a, &b, 0.0, &Attribute::ALL).unwrap(), a);
        assert_eq!(interpolate_latents(&a, &b, 1.0, &Attribute::ALL).unwrap(), b);
        let mid = interpolate_latents(&a, &b, 0.5, &[Attribute::Illumination]).unwrap();
        assert_eq!(mid.illumination.to_vec(), vec![1.0, 2.0]);
        assert_eq!(mid.identity, a.identity);
        assert_eq!(mid.expression, a.expression);
        assert_eq!(mid.texture, a.texture);
        let mut short = b.clone();
        short.texture = Array1::zeros(1);
        assert!(interpolate_latents(&a, &short, 0.5, &[Attribute::Texture]).is_err());
        assert!(interpolate_latents(&a, &b, 1.5, &[Attribute::Texture]).is_err());
    }

    #[test]
    fn embeddings_distinct_on_one_degree_grid() {
        let cfg = EncodingConfig::default();
        let mut seen: Vec<Array1<f64>> = Vec::new();
        for p in (-25..=25).step_by(5) {
            for y in (-25..=25).step_by(5) {
                let e = embed_gaze(&GazeVector::from_pitch_yaw_degrees(p as f64, y as f64), &cfg);
                for other in &seen {
                    let gap = (&e - other).iter().fold(0.0f64, |m: f64, v: &f64| m.max(v.abs()));
                    assert!(gap > 1e-9);
                }
                seen.push(e);
            }
        }
        // finest spacing: 1 degree apart
        let a: Array1<f64> = embed_gaze(&GazeVector::from_pitch_yaw_degrees(0.0, 0.0), &cfg);
        let b: Array1<f64> = embed_gaze(&GazeVector::from_pitch_yaw_degrees(0.0, 1.0), &cfg);
        assert!((&a - &b).iter().any(|v| v.abs() > 1e-9));
    }

    proptest! {
        #[test]
        fn encoding_width_and_range(
            x in proptest::collection::vec(-50.0f64..50.0, 1..6),
            l in 1usize..8,
            include in any::<bool>(),
        ) {
            let e = fourier_encode(&x, l, include).unwrap();
            prop_assert_eq!(e.len(), encoded_dim(x.len(), l, include));
            let skip = if include { x.len() } else { 0 };
            prop_assert!(e[skip..].iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn interpolation_is_affine(t1 in 0.0f64..0.5, gap in 0.01f64..0.25, a0 in -3.0f64..3.0, b0 in -3.0f64..3.0) {
            let a = latent(a0, [a0, -a0]);
            let b = latent(b0, [b0 * 2.0, 1.0]);
            let t2 = t1 + gap;
            let t3 = t2 + gap;
            let r: Vec<_> = [t1, t2, t3]
                .iter()
                .map(|&t| interpolate_latents(&a, &b, t, &Attribute::ALL).unwrap())
                .collect();
            for attr in Attribute::ALL {
                let (u, v, w) = (r[0].attribute(attr), r[1].attribute(attr), r[2].attribute(attr));
                for i in 0..u.len() {
                    prop_assert!(((v[i] - u[i]) - (w[i] - v[i])).abs() < 1e-12);
                }
            }
        }
    }
}
