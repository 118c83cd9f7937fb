//! Pinhole camera, per-pixel ray bundles, and projected eye masks.
//!
//! Conventions: right-handed frames, the camera looks down +z with image x
//! to the right and image y down. Extrinsics are the camera-to-world pose
//! `world = R * cam + t`, so `t` is the camera center. Intrinsics are in
//! normalized image units: pixel `(i, j)` of an `h x w` grid sits at
//! `u = (j + 0.5) / w`, `v = (i + 0.5) / h`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
pub const DEFAULT_NEAR: f64 = 0.1;
pub const DEFAULT_FAR: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.5,
            cy: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub intrinsics: Intrinsics,
    /// Camera-to-world rotation, row-major.
    pub rotation: Mat3,
    /// Camera center in world units.
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics::default(),
            rotation: IDENTITY,
            translation: [0.0; 3],
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }
}

impl CameraSpec {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if k.fx == 0.0 || k.fy == 0.0 || ![k.fx, k.fy, k.cx, k.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("degenerate intrinsics {k:?}")));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Domain(format!(
                "bounds must satisfy far > near > 0 (near = {}, far = {})",
                self.near, self.far
            )));
        }
        let r = &self.rotation;
        let rtr = mat_mul(&transpose(r), r);
        let ortho_err = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| (rtr[i][j] - if i == j { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        if ortho_err > 1e-6 || (det(r) - 1.0).abs() > 1e-6 {
            return Err(Error::Domain("rotation is not a proper orthonormal matrix".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        mat_vec(&transpose(&self.rotation), sub(p, self.translation))
    }

    /// Normalized image coordinates of a world point, or `None` if it is not
    /// strictly in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.cx + k.fx * c[0] / c[2], k.cy + k.fy * c[1] / c[2]))
    }

    /// Unit world-space direction through normalized image point `(u, v)`.
    pub fn direction_at(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        normalize(mat_vec(&self.rotation, d))
    }

    /// Camera on a sphere of radius `distance` around the origin, looking at
    /// the origin. Zero yaw/pitch puts it on the -z axis facing the face.
    pub fn orbit(yaw_deg: f64, pitch_deg: f64, distance: f64, intrinsics: Intrinsics) -> Self {
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let center = [
            distance * pitch.cos() * yaw.sin(),
            -distance * pitch.sin(),
            -distance * pitch.cos() * yaw.cos(),
        ];
        Self::look_at(center, [0.0; 3], intrinsics)
    }

    /// Inverse of [`CameraSpec::orbit`] for the camera position: `(yaw, pitch)`
    /// in degrees and the distance to the origin.
    pub fn orbit_angles(&self) -> (f64, f64, f64) {
        let c = self.translation;
        let d = dot(c, c).sqrt();
        let pitch = (-c[1] / d).clamp(-1.0, 1.0).asin();
        let yaw = c[0].atan2(-c[2]);
        (yaw.to_degrees(), pitch.to_degrees(), d)
    }

    pub fn look_at(center: Vec3, target: Vec3, intrinsics: Intrinsics) -> Self {
        let z = normalize(sub(target, center));
        let down = [0.0, 1.0, 0.0];
        let x = normalize(cross(down, z));
        let y = cross(z, x);
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        Self {
            intrinsics,
            rotation,
            translation: center,
            near: DEFAULT_NEAR,
            far: DEFAULT_FAR,
        }
    }

    /// Rotates the camera about its own optical axis.
    pub fn rolled(&self, angle_rad: f64) -> Self {
        let (s, c) = angle_rad.sin_cos();
        let rz = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        Self {
            rotation: mat_mul(&self.rotation, &rz),
            ..*self
        }
    }

    pub fn with_bounds(mut self, near: f64, far: f64) -> Self {
        self.near = near;
        self.far = far;
        self
    }
}

/// Per-pixel rays, row-major over an `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBundle {
    pub height: usize,
    pub width: usize,
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub near: f64,
    pub far: f64,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

pub fn generate_rays(camera: &CameraSpec, height: usize, width: usize) -> Result<RayBundle> {
    if height == 0 || width == 0 {
        return Err(Error::Domain(format!("ray grid {height}x{width} is empty")));
    }
    camera.validate()?;
    let mut directions = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let u = (j as f64 + 0.5) / width as f64;
            let v = (i as f64 + 0.5) / height as f64;
            directions.push(camera.direction_at(u, v));
        }
    }
    Ok(RayBundle {
        height,
        width,
        origins: vec![camera.center(); height * width],
        directions,
        near: camera.near,
        far: camera.far,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskResolution {
    Feature,
    Image,
}

/// Soft mask with entries in `[0, 1]`, indexed `[row, col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeMask {
    pub grid: Array2<f64>,
    pub resolution: MaskResolution,
}

impl EyeMask {
    pub fn zeros(height: usize, width: usize, resolution: MaskResolution) -> Self {
        Self {
            grid: Array2::zeros((height, width)),
            resolution,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Area-average down to feature resolution.
    pub fn downsample(&self, factor: usize) -> Result<EyeMask> {
        Ok(EyeMask {
            grid: area_downsample(&self.grid, factor)?,
            resolution: MaskResolution::Feature,
        })
    }
}

pub fn area_downsample(grid: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (h, w) = grid.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "area_downsample",
            format!("dims divisible by {factor}"),
            format!("{h}x{w}"),
        ));
    }
    let inv = 1.0 / (factor * factor) as f64;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(i, j)| {
        let mut s = 0.0;
        for a in 0..factor {
            for b in 0..factor {
                s += grid[[i * factor + a, j * factor + b]];
            }
        }
        s * inv
    }))
}

/// Sub-samples per pixel axis used to resolve fractional mask coverage.
pub const MASK_SUPERSAMPLING: usize = 8;

/// Coverage of the camera-facing disc of world radius `eye_radius` centered
/// at `eye_center`.
pub fn project_eye_mask(
    camera: &CameraSpec,
    eye_center: Vec3,
    eye_radius: f64,
    height: usize,
    width: usize,
) -> Result<EyeMask> {
    camera.validate()?;
    let pc = camera.world_to_camera(eye_center);
    if pc[2] <= 0.0 {
        return Err(Error::Visibility(format!(
            "eye center {eye_center:?} lies at depth {} behind the camera plane",
            pc[2]
        )));
    }
    let mut mask = EyeMask::zeros(height, width, MaskResolution::Image);
    if eye_radius <= 0.0 {
        return Ok(mask);
    }
    let k = &camera.intrinsics;
    let (u0, v0) = (k.cx + k.fx * pc[0] / pc[2], k.cy + k.fy * pc[1] / pc[2]);
    let (ru, rv) = ((k.fx * eye_radius / pc[2]).abs(), (k.fy * eye_radius / pc[2]).abs());
    let (wf, hf) = (width as f64, height as f64);
    let j0 = (((u0 - ru) * wf).floor().max(0.0)) as usize;
    let j1 = (((u0 + ru) * wf).ceil().min(wf)).max(0.0) as usize;
    let i0 = (((v0 - rv) * hf).floor().max(0.0)) as usize;
    let i1 = (((v0 + rv) * hf).ceil().min(hf)).max(0.0) as usize;
    let s = MASK_SUPERSAMPLING;
    let inv = 1.0 / (s * s) as f64;
    for i in i0..i1.min(height) {
        for j in j0..j1.min(width) {
            let mut hits = 0usize;
            for a in 0..s {
                let v = (i as f64 + (a as f64 + 0.5) / s as f64) / hf;
                for b in 0..s {
                    let u = (j as f64 + (b as f64 + 0.5) / s as f64) / wf;
                    let du = (u - u0) / ru;
                    let dv = (v - v0) / rv;
                    if du * du + dv * dv <= 1.0 {
                        hits += 1;
                    }
                }
            }
            mask.grid[[i, j]] = hits as f64 * inv;
        }
    }
    Ok(mask)
}

/// Where a subject's eyes sit in the head frame. Index 0 is the right eye.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeGeometry {
    pub centers: [Vec3; 2],
    pub radius: f64,
    /// Outward direction the eyes face.
    pub normal: Vec3,
}

impl EyeGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Domain(format!("eye radius {} must be positive", self.radius)));
        }
        if (dot(self.normal, self.normal).sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::Domain("eye normal must be unit length".into()));
        }
        Ok(())
    }

    /// True when the eye's front side faces the camera.
    pub fn facing(&self, camera: &CameraSpec, side: usize) -> bool {
        dot(sub(camera.center(), self.centers[side]), self.normal) > 0.0
    }

    /// Image-resolution masks of both eyes with radius scaled by `margin`.
    /// Eyes turned away from the camera get empty masks.
    pub fn masks(&self, camera: &CameraSpec, height: usize, width: usize, margin: f64) -> Result<[EyeMask; 2]> {
        let one = |side: usize| {
            if self.facing(camera, side) {
                project_eye_mask(camera, self.centers[side], self.radius * margin, height, width)
            } else {
                Ok(EyeMask::zeros(height, width, MaskResolution::Image))
            }
        };
        Ok([one(0)?, one(1)?])
    }
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Rotation by `angle` radians about a unit `axis`.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalize(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
