//! Analytic toy head used as ground truth: a skin sphere with two flat eye
//! discs just in front of it. Each disc carries an iris disc shifted by the
//! tangential part of the gaze. Includes the inverse probes (gaze from an
//! image, head pose from an image) and the on-disk dataset manifest.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{add, dot, scale, sub, CameraSpec, EyeGeometry, Intrinsics, Vec3, MASK_SUPERSAMPLING};
use crate::encodings::GazeVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub skin: [f64; 3],
    pub sclera: [f64; 3],
    pub iris: [f64; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            skin: [0.8, 0.55, 0.4],
            sclera: [0.95, 0.95, 0.95],
            iris: [0.2, 0.3, 0.7],
        }
    }
}

/// Largest combined gaze angle that keeps the iris inside the eye disc.
pub const MAX_GAZE_ANGLE_DEG: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySceneParams {
    pub head_center: Vec3,
    pub head_radius: f64,
    /// Right eye first. Each disc lies in the plane through its center
    /// with normal `(0, 0, -1)`.
    pub eye_centers: [Vec3; 2],
    pub eye_radius: f64,
    pub iris_radius: f64,
    pub palette: Palette,
    /// Global brightness multiplier.
    pub brightness: f64,
    pub seed: u64,
}

impl Default for ToySceneParams {
    fn default() -> Self {
        Self {
            head_center: [0.0; 3],
            head_radius: 1.0,
            eye_centers: [[-0.28, -0.1, -1.001], [0.28, -0.1, -1.001]],
            eye_radius: 0.24,
            iris_radius: 0.08,
            palette: Palette::default(),
            brightness: 1.0,
            seed: 0,
        }
    }
}

pub const FACE_NORMAL: Vec3 = [0.0, 0.0, -1.0];
pub const ORBIT_DISTANCE: f64 = 2.5;

impl ToySceneParams {
    /// Seed 0 is the default subject; other seeds jitter the palette.
    pub fn for_subject(seed: u64) -> Self {
        let mut p = Self { seed, ..Self::default() };
        if seed != 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut jitter = |c: [f64; 3], amt: f64| c.map(|v| (v + rng.random_range(-amt..=amt)).clamp(0.05, 0.98));
            p.palette.skin = jitter(p.palette.skin, 0.12);
            p.palette.iris = jitter(p.palette.iris, 0.15);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.iris_radius && self.iris_radius < self.eye_radius && self.eye_radius < self.head_radius) {
            return Err(Error::Domain(format!(
                "need iris radius < eye radius < head radius, got {} / {} / {}",
                self.iris_radius, self.eye_radius, self.head_radius
            )));
        }
        if !(0.2..=1.0).contains(&self.brightness) {
            return Err(Error::Domain(format!("brightness {} outside [0.2, 1]", self.brightness)));
        }
        Ok(())
    }

    pub fn eye_geometry(&self) -> EyeGeometry {
        EyeGeometry {
            centers: self.eye_centers,
            radius: self.eye_radius,
            normal: FACE_NORMAL,
        }
    }

    /// Iris shift per unit of tangential gaze, sized so that gazes up to
    /// `MAX_GAZE_ANGLE_DEG` keep the iris at 90% of the available room.
    pub fn iris_gain(&self) -> f64 {
        0.9 * (self.eye_radius - self.iris_radius) / MAX_GAZE_ANGLE_DEG.to_radians().sin()
    }

    pub fn iris_center(&self, side: usize, gaze: &GazeVector) -> Vec3 {
        let g = gaze.direction();
        let tangential = sub(g, scale(FACE_NORMAL, dot(g, FACE_NORMAL)));
        add(self.eye_centers[side], scale(tangential, self.iris_gain()))
    }

    fn color(&self, c: [f64; 3]) -> [f64; 3] {
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Hit {
    Background,
    Skin,
    Eye { side: usize, iris: bool },
}

fn hit_disc(o: Vec3, d: Vec3, center: Vec3, radius: f64) -> Option<(f64, Vec3)> {
    let dn = dot(d, FACE_NORMAL);
    if dn >= 0.0 {
        return None;
    }
    let t = dot(sub(center, o), FACE_NORMAL) / dn;
    if t <= 0.0 {
        return None;
    }
    let q = add(o, scale(d, t));
    let r = sub(q, center);
    (dot(r, r) <= radius * radius).then_some((t, q))
}

fn hit_sphere(o: Vec3, d: Vec3, center: Vec3, radius: f64) -> Option<f64> {
    let oc = sub(o, center);
    let b = dot(oc, d);
    let c = dot(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then_some(t)
}

fn trace(p: &ToySceneParams, iris: &[Vec3; 2], o: Vec3, d: Vec3) -> Hit {
    let mut best: Option<(f64, Hit)> = None;
    for side in 0..2 {
        if let Some((t, q)) = hit_disc(o, d, p.eye_centers[side], p.eye_radius) {
            let r = sub(q, iris[side]);
            let h = Hit::Eye {
                side,
                iris: dot(r, r) <= p.iris_radius * p.iris_radius,
            };
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, h));
            }
        }
    }
    if let Some(t) = hit_sphere(o, d, p.head_center, p.head_radius) {
        if best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, Hit::Skin));
        }
    }
    best.map_or(Hit::Background, |(_, h)| h)
}

/// Ground-truth image (`3 x H x W`), head mask, and the two eye masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyFrame {
    pub image: Array3<f64>,
    pub head_mask: Array2<f64>,
    pub eye_masks: [Array2<f64>; 2],
}

pub fn render_toy_frame(
    params: &ToySceneParams,
    camera: &CameraSpec,
    gaze: &GazeVector,
    height: usize,
    width: usize,
) -> Result<ToyFrame> {
    params.validate()?;
    camera.validate()?;
    if camera.world_to_camera(params.head_center)[2] <= 0.0 {
        return Err(Error::Visibility("toy head is behind the camera".into()));
    }
    let iris = [params.iris_center(0, gaze), params.iris_center(1, gaze)];
    let s = MASK_SUPERSAMPLING;
    let inv = 1.0 / (s * s) as f64;
    let o = camera.center();
    let mut image = Array3::zeros((3, height, width));
    let mut head_mask = Array2::zeros((height, width));
    let mut eye_masks = [Array2::zeros((height, width)), Array2::zeros((height, width))];
    let pal = &params.palette;
    for i in 0..height {
        for j in 0..width {
            let mut rgb = [0.0; 3];
            let (mut head, mut eyes) = (0usize, [0usize; 2]);
            for a in 0..s {
                let v = (i as f64 + (a as f64 + 0.5) / s as f64) / height as f64;
                for b in 0..s {
                    let u = (j as f64 + (b as f64 + 0.5) / s as f64) / width as f64;
                    let c = match trace(params, &iris, o, camera.direction_at(u, v)) {
                        Hit::Background => continue,
                        Hit::Skin => params.color(pal.skin),
                        Hit::Eye { side, iris } => {
                            eyes[side] += 1;
                            if iris {
                                params.color(pal.iris)
                            } else {
                                params.color(pal.sclera)
                            }
                        }
                    };
                    head += 1;
                    for k in 0..3 {
                        rgb[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                // brightness applied last so scaling it is exact
                image[[k, i, j]] = params.brightness * (rgb[k] * inv);
            }
            head_mask[[i, j]] = head as f64 * inv;
            eye_masks[0][[i, j]] = eyes[0] as f64 * inv;
            eye_masks[1][[i, j]] = eyes[1] as f64 * inv;
        }
    }
    Ok(ToyFrame {
        image,
        head_mask,
        eye_masks,
    })
}

/// Exact eye-disc coverage masks for a camera, as the oracle would render.
pub fn toy_eye_masks(params: &ToySceneParams, camera: &CameraSpec, height: usize, width: usize) -> Result<[Array2<f64>; 2]> {
    Ok(render_toy_frame(params, camera, &GazeVector::forward(), height, width)?.eye_masks)
}

fn plane_hit(camera: &CameraSpec, center: Vec3, u: f64, v: f64) -> Option<Vec3> {
    hit_disc(camera.center(), camera.direction_at(u, v), center, f64::INFINITY).map(|(_, q)| q)
}

/// Largest colour residual, off the sclera-iris line, still read as eye.
pub const UNMIX_TOLERANCE: f64 = 0.15;

/// Per-eye iris centroid offsets on the eye plane, in units of tangential
/// gaze. Iris coverage is unmixed per pixel from the known palette.
fn iris_offsets(
    image: ArrayView3<f64>,
    eye_masks: [ArrayView2<f64>; 2],
    params: &ToySceneParams,
    camera: &CameraSpec,
) -> Result<[[f64; 2]; 2]> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::shape("probe image channels", 3, c));
    }
    for m in &eye_masks {
        if m.dim() != (h, w) {
            return Err(Error::shape("probe eye mask", format!("{h}x{w}"), format!("{:?}", m.dim())));
        }
    }
    let b = params.brightness;
    let pal = &params.palette;
    let is = sub(pal.iris, pal.sclera);
    let is2 = dot(is, is);
    let (du, dv) = (0.5 / w as f64, 0.5 / h as f64);
    let mut offsets = [[0.0; 2]; 2];
    for side in 0..2 {
        let center = params.eye_centers[side];
        let (mut sw, mut acc) = (0.0, [0.0; 3]);
        for ((i, j), &m) in eye_masks[side].indexed_iter() {
            if m <= 0.0 {
                continue;
            }
            let p = [image[[0, i, j]] / b, image[[1, i, j]] / b, image[[2, i, j]] / b];
            let resid: Vec3 = std::array::from_fn(|k| p[k] - m * pal.sclera[k] - (1.0 - m) * pal.skin[k]);
            let raw = dot(resid, is) / is2;
            let off_axis = sub(resid, scale(is, raw));
            if dot(off_axis, off_axis).sqrt() > UNMIX_TOLERANCE {
                continue;
            }
            let coverage = raw.clamp(0.0, m);
            if coverage <= 0.0 {
                continue;
            }
            let (u, v) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
            let (Some(q), Some(qu0), Some(qu1), Some(qv0), Some(qv1)) = (
                plane_hit(camera, center, u, v),
                plane_hit(camera, center, u - du, v),
                plane_hit(camera, center, u + du, v),
                plane_hit(camera, center, u, v - dv),
                plane_hit(camera, center, u, v + dv),
            ) else {
                continue;
            };
            let footprint = crate::camera::cross(sub(qu1, qu0), sub(qv1, qv0));
            let wgt = coverage * dot(footprint, footprint).sqrt();
            sw += wgt;
            for k in 0..3 {
                acc[k] += wgt * q[k];
            }
        }
        if sw <= 1e-12 {
            return Err(Error::Domain(format!(
                "no iris pixels found for the {} eye",
                if side == 0 { "right" } else { "left" }
            )));
        }
        let off = scale(sub(acc.map(|a| a / sw), center), 1.0 / params.iris_gain());
        offsets[side] = [off[0], off[1]];
    }
    Ok(offsets)
}

fn gaze_from_tangential(t: [f64; 2]) -> Result<GazeVector> {
    let t2 = (t[0] * t[0] + t[1] * t[1]).min(1.0);
    GazeVector::new([t[0], t[1], -(1.0 - t2).sqrt()])
}

/// Refinement passes that re-render the oracle at the current estimate and
/// cancel the centroid bias of finite pixels.
pub const PROBE_REFINEMENTS: usize = 3;

/// Inverts the iris displacement model: iris centroids on each eye plane
/// give the tangential gaze, averaged over both eyes.
pub fn estimate_gaze_from_toy_image(
    image: ArrayView3<f64>,
    eye_masks: [ArrayView2<f64>; 2],
    params: &ToySceneParams,
    camera: &CameraSpec,
) -> Result<GazeVector> {
    let (_, h, w) = image.dim();
    let mean = |o: [[f64; 2]; 2]| [(o[0][0] + o[1][0]) / 2.0, (o[0][1] + o[1][1]) / 2.0];
    let observed = mean(iris_offsets(image, eye_masks, params, camera)?);
    let mut t = observed;
    for _ in 0..PROBE_REFINEMENTS {
        let g = gaze_from_tangential(t)?;
        let frame = render_toy_frame(params, camera, &g, h, w)?;
        let m = [frame.eye_masks[0].view(), frame.eye_masks[1].view()];
        let predicted = mean(iris_offsets(frame.image.view(), m, params, camera)?);
        t = [t[0] + observed[0] - predicted[0], t[1] + observed[1] - predicted[1]];
    }
    gaze_from_tangential(t)
}

/// Head yaw and pitch (degrees) of an orbit camera, recovered from the
/// image positions of the two eye regions.
pub fn estimate_head_pose(
    image: ArrayView3<f64>,
    params: &ToySceneParams,
    distance: f64,
    intrinsics: Intrinsics,
) -> Result<(f64, f64)> {
    let (_, h, w) = image.dim();
    let pal = &params.palette;
    // Skin and background both lie on the line through black and the skin
    // colour; distance from that line measures eye content.
    let axis = scale(pal.skin, 1.0 / dot(pal.skin, pal.skin).sqrt());
    let perp = |c: Vec3| {
        let r = sub(c, scale(axis, dot(c, axis)));
        dot(r, r).sqrt()
    };
    let reach = params.brightness * perp(pal.sclera).min(perp(pal.iris));
    let mut pixels = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let eyeness = (perp([image[[0, i, j]], image[[1, i, j]], image[[2, i, j]]]) / reach).clamp(0.0, 1.0);
            if eyeness >= 0.25 {
                pixels.push(((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64, eyeness));
            }
        }
    }
    // two-means split along image x
    let mut split = 0.5;
    let mut acc = [[0.0; 3]; 2];
    for _ in 0..8 {
        acc = [[0.0; 3]; 2];
        for &(u, v, e) in &pixels {
            let side = usize::from(u >= split);
            acc[side][0] += e * u;
            acc[side][1] += e * v;
            acc[side][2] += e;
        }
        if acc.iter().any(|a| a[2] <= 1e-9) {
            break;
        }
        split = 0.5 * (acc[0][0] / acc[0][2] + acc[1][0] / acc[1][2]);
    }
    let observed = acc.map(|a| (a[0] / a[2], a[1] / a[2]));
    let cost = |yaw: f64, pitch: f64| {
        let cam = CameraSpec::orbit(yaw, pitch, distance, intrinsics);
        (0..2)
            .map(|s| match cam.project(params.eye_centers[s]) {
                Some((u, v)) => (u - observed[s].0).powi(2) + (v - observed[s].1).powi(2),
                None => f64::INFINITY,
            })
            .sum::<f64>()
    };
    let mut best = (0.0, 0.0, f64::INFINITY);
    let search = |center: (f64, f64), half: f64, step: f64, best: &mut (f64, f64, f64)| {
        let n = (half / step).round() as i64;
        for a in -n..=n {
            for bb in -n..=n {
                let (y, p) = (center.0 + a as f64 * step, center.1 + bb as f64 * step);
                let c = cost(y, p);
                if c < best.2 {
                    *best = (y, p, c);
                }
            }
        }
    };
    search((0.0, 0.0), 40.0, 1.0, &mut best);
    search((best.0, best.1), 1.0, 0.05, &mut best);
    Ok((best.0, best.1))
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const FRAMES_FILE: &str = "frames.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub id: String,
    pub eye_geometry: EyeGeometry,
    /// Present for oracle-rendered subjects, used by the probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySceneParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub subject: String,
    pub image: PathBuf,
    pub head_mask: PathBuf,
    pub right_eye_mask: PathBuf,
    pub left_eye_mask: PathBuf,
    pub camera: CameraSpec,
    pub gaze: GazeVector,
}

impl FrameRecord {
    fn paths(&self) -> [&PathBuf; 4] {
        [&self.image, &self.head_mask, &self.right_eye_mask, &self.left_eye_mask]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    height: usize,
    width: usize,
    subjects: Vec<SubjectMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub height: usize,
    pub width: usize,
    pub subjects: Vec<SubjectMeta>,
    pub frames: Vec<FrameRecord>,
}

impl Manifest {
    pub fn new(height: usize, width: usize, subjects: Vec<SubjectMeta>) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            height,
            width,
            subjects,
            frames: Vec::new(),
        }
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectMeta> {
        self.subjects.iter().find(|s| s.id == id).ok_or_else(|| Error::Unknown {
            kind: "subject",
            id: id.to_string(),
        })
    }

    pub fn frame(&self, id: &str) -> Result<&FrameRecord> {
        self.frames.iter().find(|f| f.id == id).ok_or_else(|| Error::Unknown {
            kind: "frame",
            id: id.to_string(),
        })
    }

    /// Structural checks that need no file access.
    pub fn validate_records(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Version {
                what: "manifest schema",
                found: self.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        let mut seen = HashSet::new();
        for f in &self.frames {
            if !seen.insert(f.id.as_str()) {
                return Err(Error::Manifest {
                    frame: f.id.clone(),
                    reason: "duplicate frame id".into(),
                });
            }
            self.subject(&f.subject).map_err(|_| Error::Manifest {
                frame: f.id.clone(),
                reason: format!("unknown subject `{}`", f.subject),
            })?;
            f.camera.validate().map_err(|e| Error::Manifest {
                frame: f.id.clone(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Validates records and every referenced file against `dir`.
    pub fn validate_files(&self, dir: &Path) -> Result<()> {
        self.validate_records()?;
        for f in &self.frames {
            for p in f.paths() {
                let full = dir.join(p);
                let dims = image::image_dimensions(&full).map_err(|e| Error::Manifest {
                    frame: f.id.clone(),
                    reason: format!("cannot read {}: {e}", p.display()),
                })?;
                if (dims.1 as usize, dims.0 as usize) != (self.height, self.width) {
                    return Err(Error::Manifest {
                        frame: f.id.clone(),
                        reason: format!(
                            "{} is {}x{}, manifest resolution is {}x{}",
                            p.display(),
                            dims.1,
                            dims.0,
                            self.height,
                            self.width
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    manifest.validate_records()?;
    fs::create_dir_all(dir)?;
    let meta = Meta {
        schema_version: manifest.schema_version,
        height: manifest.height,
        width: manifest.width,
        subjects: manifest.subjects.clone(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    let mut out = fs::File::create(dir.join(FRAMES_FILE))?;
    for f in &manifest.frames {
        writeln!(out, "{}", serde_json::to_string(f)?)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.is_file() || !dir.join(FRAMES_FILE).is_file() {
        return Err(Error::ManifestNotFound(dir.to_path_buf()));
    }
    let meta: Meta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
    if meta.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Version {
            what: "manifest schema",
            found: meta.schema_version,
            expected: MANIFEST_SCHEMA_VERSION,
        });
    }
    let mut frames = Vec::new();
    let reader = BufReader::new(fs::File::open(dir.join(FRAMES_FILE))?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            frame: format!("line {}", lineno + 1),
            reason: e.to_string(),
        })?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .map_or_else(|| format!("line {}", lineno + 1), str::to_string);
        let record: FrameRecord = serde_json::from_value(value).map_err(|e| Error::Manifest {
            frame: id,
            reason: e.to_string(),
        })?;
        frames.push(record);
    }
    let manifest = Manifest {
        schema_version: meta.schema_version,
        height: meta.height,
        width: meta.width,
        subjects: meta.subjects,
        frames,
    };
    manifest.validate_files(dir)?;
    Ok(manifest)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb<T: crate::Real>(image: ArrayView3<T>, path: &Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb([0, 1, 2].map(|c| to_u8(image[[c, i, j]].as_f64())))
    });
    img.save(path)?;
    Ok(())
}

pub fn save_mask<T: crate::Real>(mask: ArrayView2<T>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(mask[[y as usize, x as usize]].as_f64())]));
    img.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
    }))
}

pub fn load_mask(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as f32 / 255.0
    }))
}

/// A decoded training frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    pub image: Array3<f32>,
    pub head_mask: Array2<f32>,
    pub eye_masks: [Array2<f32>; 2],
}

pub fn load_frame(dir: &Path, record: &FrameRecord) -> Result<FrameData> {
    let ctx = |e: Error| Error::Manifest {
        frame: record.id.clone(),
        reason: e.to_string(),
    };
    Ok(FrameData {
        image: load_rgb(&dir.join(&record.image)).map_err(ctx)?,
        head_mask: load_mask(&dir.join(&record.head_mask)).map_err(ctx)?,
        eye_masks: [
            load_mask(&dir.join(&record.right_eye_mask)).map_err(ctx)?,
            load_mask(&dir.join(&record.left_eye_mask)).map_err(ctx)?,
        ],
    })
}

/// Writes one frame's image and masks under `dir` and returns its record.
pub fn write_frame_files<T: crate::Real>(
    dir: &Path,
    id: &str,
    subject: &str,
    image: ArrayView3<T>,
    head_mask: ArrayView2<T>,
    eye_masks: [ArrayView2<T>; 2],
    camera: CameraSpec,
    gaze: GazeVector,
) -> Result<FrameRecord> {
    fs::create_dir_all(dir.join("frames"))?;
    let rel = |suffix: &str| PathBuf::from("frames").join(format!("{id}_{suffix}.png"));
    let record = FrameRecord {
        id: id.to_string(),
        subject: subject.to_string(),
        image: rel("rgb"),
        head_mask: rel("head"),
        right_eye_mask: rel("eye_r"),
        left_eye_mask: rel("eye_l"),
        camera,
        gaze,
    };
    save_rgb(image, &dir.join(&record.image))?;
    save_mask(head_mask, &dir.join(&record.head_mask))?;
    save_mask(eye_masks[0], &dir.join(&record.right_eye_mask))?;
    save_mask(eye_masks[1], &dir.join(&record.left_eye_mask))?;
    Ok(record)
}

/// One frame of a toy dataset: camera orbit angles and gaze angles in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFrameSpec {
    pub subject: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub gaze_pitch: f64,
    pub gaze_yaw: f64,
    /// Overrides the subject brightness when set.
    #[serde(default)]
    pub brightness: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub subjects: Vec<ToySceneParams>,
    pub frames: Vec<ToyFrameSpec>,
    pub height: usize,
    pub width: usize,
    pub near: f64,
    pub far: f64,
}

impl ToyDatasetSpec {
    /// Every view combined with every gaze for subject 0.
    pub fn grid(views: &[(f64, f64)], gazes: &[(f64, f64)], height: usize, width: usize) -> Self {
        let pairs = views.iter().flat_map(|&v| gazes.iter().map(move |&g| (v, g)));
        Self::from_pairs(pairs, height, width)
    }

    /// Subject 0 under explicit `((yaw, pitch), (gaze_pitch, gaze_yaw))` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = ((f64, f64), (f64, f64))>, height: usize, width: usize) -> Self {
        let frames = pairs
            .into_iter()
            .map(|((yaw, pitch), (gaze_pitch, gaze_yaw))| ToyFrameSpec {
                subject: 0,
                yaw,
                pitch,
                gaze_pitch,
                gaze_yaw,
                brightness: None,
            })
            .collect();
        Self {
            subjects: vec![ToySceneParams::default()],
            frames,
            height,
            width,
            near: 1.0,
            far: 3.5,
        }
    }

    pub fn camera(&self, f: &ToyFrameSpec) -> CameraSpec {
        CameraSpec::orbit(f.yaw, f.pitch, ORBIT_DISTANCE, Intrinsics::default()).with_bounds(self.near, self.far)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() || self.subjects.is_empty() {
            return Err(Error::Config("toy dataset needs subjects and frames".into()));
        }
        for s in &self.subjects {
            s.validate()?;
        }
        for f in &self.frames {
            if f.subject >= self.subjects.len() {
                return Err(Error::Config(format!("frame refers to subject {}", f.subject)));
            }
            if let Some(b) = f.brightness {
                ToySceneParams { brightness: b, ..self.subjects[f.subject] }.validate()?;
            }
            let g = GazeVector::from_pitch_yaw_degrees(f.gaze_pitch, f.gaze_yaw);
            if g.angle_degrees(&GazeVector::forward()) > MAX_GAZE_ANGLE_DEG {
                return Err(Error::Config(format!(
                    "gaze ({}, {}) exceeds the {MAX_GAZE_ANGLE_DEG} degree range",
                    f.gaze_pitch, f.gaze_yaw
                )));
            }
        }
        self.camera(&self.frames[0]).validate()
    }
}

pub fn subject_id(index: usize) -> String {
    format!("s{index:02}")
}

/// Renders the dataset into `dir` and writes its manifest.
pub fn write_toy_dataset(spec: &ToyDatasetSpec, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let subjects = spec
        .subjects
        .iter()
        .enumerate()
        .map(|(i, p)| SubjectMeta {
            id: subject_id(i),
            eye_geometry: p.eye_geometry(),
            toy: Some(*p),
        })
        .collect();
    let mut manifest = Manifest::new(spec.height, spec.width, subjects);
    for (n, f) in spec.frames.iter().enumerate() {
        let mut params = spec.subjects[f.subject];
        if let Some(b) = f.brightness {
            params.brightness = b;
        }
        let camera = spec.camera(f);
        let gaze = GazeVector::from_pitch_yaw_degrees(f.gaze_pitch, f.gaze_yaw);
        let frame = render_toy_frame(&params, &camera, &gaze, spec.height, spec.width)?;
        let id = format!("f{n:04}");
        manifest.frames.push(write_frame_files(
            dir,
            &id,
            &subject_id(f.subject),
            frame.image.view(),
            frame.head_mask.view(),
            [frame.eye_masks[0].view(), frame.eye_masks[1].view()],
            camera,
            gaze,
        )?);
    }
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frontal() -> CameraSpec {
        CameraSpec::orbit(0.0, 0.0, ORBIT_DISTANCE, Intrinsics::default())
    }

    fn iris_centroid_px(frame: &ToyFrame, params: &ToySceneParams, side: usize) -> (f64, f64) {
        let pal = &params.palette;
        let is = sub(pal.iris, pal.sclera);
        let (mut s, mut si, mut sj) = (0.0, 0.0, 0.0);
        for ((i, j), &m) in frame.eye_masks[side].indexed_iter() {
            if m <= 0.0 {
                continue;
            }
            let p: Vec3 = std::array::from_fn(|k| frame.image[[k, i, j]] / params.brightness);
            let r: Vec3 = std::array::from_fn(|k| p[k] - m * pal.sclera[k] - (1.0 - m) * pal.skin[k]);
            let c = (dot(r, is) / dot(is, is)).clamp(0.0, m);
            s += c;
            si += c * (i as f64 + 0.5);
            sj += c * (j as f64 + 0.5);
        }
        (si / s, sj / s)
    }

    #[test]
    fn forward_gaze_centers_the_iris() {
        let p = ToySceneParams::default();
        let cam = frontal();
        let f = render_toy_frame(&p, &cam, &GazeVector::forward(), 64, 64).unwrap();
        for side in 0..2 {
            let (ci, cj) = iris_centroid_px(&f, &p, side);
            let (u, v) = cam.project(p.eye_centers[side]).unwrap();
            assert!((ci - v * 64.0).abs() < 0.5 && (cj - u * 64.0).abs() < 0.5);
        }
    }

    #[test]
    fn pitch_shift_matches_projection() {
        let p = ToySceneParams::default();
        let cam = frontal();
        let g = GazeVector::from_pitch_yaw_degrees(10.0, 0.0);
        let f = render_toy_frame(&p, &cam, &g, 64, 64).unwrap();
        for side in 0..2 {
            let (ci, cj) = iris_centroid_px(&f, &p, side);
            let (u, v) = cam.project(p.iris_center(side, &g)).unwrap();
            assert!((ci - v * 64.0).abs() < 0.5, "{ci} vs {}", v * 64.0);
            assert!((cj - u * 64.0).abs() < 0.5);
            let (_, v0) = cam.project(p.eye_centers[side]).unwrap();
            // looking up moves the iris up in the image
            assert!(v < v0);
        }
    }

    #[test]
    fn brightness_scales_exactly() {
        let cam = frontal();
        let g = GazeVector::from_pitch_yaw_degrees(5.0, -8.0);
        let a = render_toy_frame(&ToySceneParams { brightness: 0.8, ..Default::default() }, &cam, &g, 32, 32).unwrap();
        let b = render_toy_frame(&ToySceneParams { brightness: 0.4, ..Default::default() }, &cam, &g, 32, 32).unwrap();
        assert_eq!(a.head_mask, b.head_mask);
        assert_eq!(a.eye_masks, b.eye_masks);
        for (x, y) in a.image.iter().zip(b.image.iter()) {
            assert_eq!(*x * 0.5, *y);
        }
    }

    #[test]
    fn masks_nest_and_are_disjoint() {
        let p = ToySceneParams::default();
        let cam = CameraSpec::orbit(12.0, -6.0, ORBIT_DISTANCE, Intrinsics::default());
        let f = render_toy_frame(&p, &cam, &GazeVector::from_pitch_yaw_degrees(-10.0, 20.0), 48, 48).unwrap();
        for ((i, j), &h) in f.head_mask.indexed_iter() {
            let (r, l) = (f.eye_masks[0][[i, j]], f.eye_masks[1][[i, j]]);
            assert!(r + l <= h + 1e-12);
            assert!(r == 0.0 || l == 0.0);
        }
        assert!(f.eye_masks[0].sum() > 0.0 && f.eye_masks[1].sum() > 0.0);
    }

    #[test]
    fn deterministic_and_rejects_head_behind_camera() {
        let p = ToySceneParams::default();
        let cam = frontal();
        let g = GazeVector::forward();
        assert_eq!(render_toy_frame(&p, &cam, &g, 16, 16).unwrap(), render_toy_frame(&p, &cam, &g, 16, 16).unwrap());
        let away = CameraSpec::look_at([0.0, 0.0, -3.0], [0.0, 0.0, -6.0], Intrinsics::default());
        assert!(matches!(render_toy_frame(&p, &away, &g, 8, 8), Err(Error::Visibility(_))));
    }

    #[test]
    fn probe_round_trips_a_gaze_grid() {
        let p = ToySceneParams::default();
        for &(yaw, pitch) in &[(0.0, 0.0), (10.0, 5.0), (-10.0, -5.0)] {
            let cam = CameraSpec::orbit(yaw, pitch, ORBIT_DISTANCE, Intrinsics::default());
            let masks = toy_eye_masks(&p, &cam, 64, 64).unwrap();
            let mut worst: f64 = 0.0;
            for gp in [-16.0, -8.0, 0.0, 8.0, 16.0] {
                for gy in [-16.0, -8.0, 0.0, 8.0, 16.0] {
                    let g = GazeVector::from_pitch_yaw_degrees(gp, gy);
                    let f = render_toy_frame(&p, &cam, &g, 64, 64).unwrap();
                    let est = estimate_gaze_from_toy_image(f.image.view(), [masks[0].view(), masks[1].view()], &p, &cam).unwrap();
                    worst = worst.max(est.angle_degrees(&g));
                }
            }
            assert!(worst <= 1.0, "view ({yaw}, {pitch}): worst {worst}");
        }
    }

    #[test]
    fn probe_rejects_missing_iris() {
        let p = ToySceneParams::default();
        let cam = frontal();
        let masks = toy_eye_masks(&p, &cam, 32, 32).unwrap();
        let flat = Array3::zeros((3, 32, 32));
        assert!(estimate_gaze_from_toy_image(flat.view(), [masks[0].view(), masks[1].view()], &p, &cam).is_err());
    }

    #[test]
    fn pose_probe_recovers_orbit_angles() {
        let p = ToySceneParams::default();
        for &(yaw, pitch) in &[(0.0, 0.0), (10.0, 5.0), (-10.0, -5.0), (15.0, -8.0)] {
            let cam = CameraSpec::orbit(yaw, pitch, ORBIT_DISTANCE, Intrinsics::default());
            let f = render_toy_frame(&p, &cam, &GazeVector::forward(), 64, 64).unwrap();
            let (ey, ep) = estimate_head_pose(f.image.view(), &p, ORBIT_DISTANCE, Intrinsics::default()).unwrap();
            assert!((ey - yaw).abs() < 1.5 && (ep - pitch).abs() < 1.5, "({yaw}, {pitch}) -> ({ey}, {ep})");
        }
    }
}
