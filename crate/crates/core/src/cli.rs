//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{concatenate, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::camera::CameraSpec;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::datagen::{
    read_manifest, save_rgb, write_frame_files, write_manifest, write_toy_dataset, Manifest, ToyDatasetSpec, ToySceneParams,
};
use crate::encodings::{interpolate_latents, Attribute, GazeVector};
use crate::error::{Error, Result};
use crate::eval::{evaluate, redirect, shifted_camera, EvalConfig};
use crate::model::{forward, ModelBundle, Profile};
use crate::trainer::{train, Dataset, LossRecord, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "nerf-gaze", version, about = "Gaze and head redirection with decoupled face and eye feature fields")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (TOML) for the chosen command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// desk or paper-shape
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit networks and latent codes to a dataset.
    Train(TrainArgs),
    /// Reconstruct one dataset frame.
    Render(FrameArgs),
    /// Re-render a frame under a new camera and/or gaze.
    Redirect(RedirectArgs),
    /// Sweep latent attributes between two frames.
    Interpolate(InterpolateArgs),
    /// Render a labelled synthetic dataset from a checkpoint.
    ExportDataset(ExportArgs),
    /// Write a JSON metrics report.
    Eval(DataArgs),
    /// Write an oracle-rendered toy dataset.
    ToyDataset(ToyArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory holding the manifest.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_frames: Option<usize>,
    /// Drop the eye-mask term from the losses.
    #[arg(long)]
    pub no_eye_mask_term: bool,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct FrameArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub frame: String,
}

#[derive(Debug, Args)]
pub struct RedirectArgs {
    #[command(flatten)]
    pub source: FrameArgs,
    /// Take camera and gaze from this frame.
    #[arg(long)]
    pub target_frame: Option<String>,
    /// Orbit camera yaw in degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub yaw: Option<f64>,
    /// Orbit camera pitch in degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub pitch: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub gaze_pitch: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub gaze_yaw: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    /// Comma-separated subset of identity, expression, texture, illumination.
    #[arg(long, value_delimiter = ',', required = true)]
    pub attributes: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Sweep spec (TOML).
    #[arg(long)]
    pub sweep: PathBuf,
}

#[derive(Debug, Args)]
pub struct ToyArgs {
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Grid of synthetic frames rendered from one source frame's latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Source frame ids; every one is combined with the full grid.
    pub frames: Vec<String>,
    /// `[pitch, yaw]` gazes in degrees; empty keeps each source gaze.
    #[serde(default)]
    pub gazes: Vec<[f64; 2]>,
    /// `[yaw, pitch]` orbit camera angles in degrees; empty keeps each source camera.
    #[serde(default)]
    pub poses: Vec<[f64; 2]>,
    #[serde(default)]
    pub attributes: Vec<AttributeSweep>,
}

/// Blends `attribute` toward frame `with` at each weight in `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSweep {
    pub attribute: String,
    pub with: String,
    pub t: Vec<f64>,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("sweep spec: {e}")))
    }

    fn validate(&self, manifest: &Manifest) -> Result<Vec<(Attribute, AttributeSweep)>> {
        if self.frames.is_empty() {
            return Err(Error::Config("sweep spec lists no source frames".into()));
        }
        for f in &self.frames {
            manifest.frame(f)?;
        }
        for g in &self.gazes {
            check_gaze(g[0], g[1])?;
        }
        let mut attrs = Vec::new();
        for a in &self.attributes {
            let attr: Attribute = a.attribute.parse()?;
            manifest.frame(&a.with)?;
            if a.t.is_empty() || a.t.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::Config(format!("sweep weights for {attr} must be non-empty and in [0, 1]")));
            }
            attrs.push((attr, a.clone()));
        }
        Ok(attrs)
    }
}

fn check_gaze(pitch: f64, yaw: f64) -> Result<GazeVector> {
    if !(pitch.is_finite() && yaw.is_finite()) || pitch.abs() >= 90.0 || yaw.abs() >= 180.0 {
        return Err(Error::Domain(format!("invalid gaze pitch {pitch}, yaw {yaw}")));
    }
    Ok(GazeVector::from_pitch_yaw_degrees(pitch, yaw))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_bundle(common: &Common) -> Result<ModelBundle<f32>> {
    let path = common
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let bundle = load_checkpoint(path)?;
    if let Some(p) = common.profile {
        if p != bundle.config.profile {
            return Err(Error::Config(format!("checkpoint uses the {} profile, not {p}", bundle.config.profile)));
        }
    }
    Ok(bundle)
}

fn out_path(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Writes a directory by filling a sibling staging directory and renaming
/// it into place, so failures leave nothing at `dir`.
fn staged<F: FnOnce(&Path) -> Result<()>>(dir: &Path, fill: F) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Config(format!("output directory {} is not empty", dir.display())));
    }
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let stage = dir.with_file_name(format!(".{name}.partial"));
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    match fill(&stage) {
        Ok(()) => {
            if dir.exists() {
                fs::remove_dir(dir)?;
            }
            fs::rename(&stage, dir)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&stage);
            Err(e)
        }
    }
}

fn train_config(common: &Common, args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.profile {
        cfg.profile = p;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(b) = args.batch_frames {
        cfg.batch_frames = b;
    }
    if args.no_eye_mask_term {
        cfg.loss.eye_mask_term = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_loss_log(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut s = String::from("step,rec,per,total\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.rec, r.per, r.total));
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_train(common: &Common, args: &TrainArgs) -> Result<()> {
    let cfg = train_config(common, args)?;
    let data = Dataset::load(&args.data.data)?;
    let out = out_path(common, "run");
    let quiet = args.quiet;
    let steps = cfg.steps;
    let mut progress = |r: &LossRecord| {
        if !quiet && (r.step % 100 == 0 || r.step + 1 == steps) {
            eprintln!("step {:>5}  rec {:.5}  per {:.5}  total {:.5}", r.step, r.rec, r.per, r.total);
        }
    };
    // validate everything before the run so a bad output path fails fast
    if out.exists() && fs::read_dir(&out)?.next().is_some() {
        return Err(Error::Config(format!("output directory {} is not empty", out.display())));
    }
    let result = train(&cfg, &data, &mut progress)?;
    staged(&out, |dir| {
        save_checkpoint(&result.bundle, &dir.join("checkpoint.ngz"))?;
        write_loss_log(&result.history, &dir.join("loss.csv"))?;
        fs::write(dir.join("train.toml"), toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?)?;
        Ok(())
    })?;
    if let Some(ck) = &common.checkpoint {
        fs::copy(out.join("checkpoint.ngz"), ck)?;
    }
    println!("{}", out.join("checkpoint.ngz").display());
    Ok(())
}

fn frame_index(data: &Dataset, id: &str) -> Result<usize> {
    data.manifest.frames.iter().position(|f| f.id == id).ok_or_else(|| Error::Unknown {
        kind: "frame",
        id: id.to_string(),
    })
}

fn cmd_render(common: &Common, args: &FrameArgs) -> Result<()> {
    let bundle = load_bundle(common)?;
    let data = Dataset::load(&args.data.data)?;
    let f = frame_index(&data, &args.frame)?;
    let out = out_path(common, &format!("{}.png", args.frame));
    let (img, _, _) = redirect(&bundle, &data, f, None, None)?;
    save_rgb(img.view(), &out)?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RedirectSidecar {
    pub source_frame: String,
    pub camera: CameraSpec,
    pub gaze: GazeVector,
    pub gaze_pitch_deg: f64,
    pub gaze_yaw_deg: f64,
}

fn cmd_redirect(common: &Common, args: &RedirectArgs) -> Result<()> {
    let bundle = load_bundle(common)?;
    let data = Dataset::load(&args.source.data.data)?;
    let f = frame_index(&data, &args.source.frame)?;
    let source = &data.manifest.frames[f];
    let mut camera = None;
    let mut gaze = None;
    if let Some(t) = &args.target_frame {
        let target = data.manifest.frame(t)?;
        camera = Some(target.camera);
        gaze = Some(target.gaze);
    }
    match (args.yaw, args.pitch) {
        (None, None) => {}
        (yaw, pitch) => {
            let (sy, sp, _) = source.camera.orbit_angles();
            let (y, p) = (yaw.unwrap_or(sy), pitch.unwrap_or(sp));
            camera = Some(shifted_camera(&source.camera, y - sy, p - sp));
        }
    }
    match (args.gaze_pitch, args.gaze_yaw) {
        (None, None) => {}
        (p, y) => {
            let (sp, sy) = source.gaze.to_pitch_yaw();
            gaze = Some(check_gaze(p.unwrap_or(sp.to_degrees()), y.unwrap_or(sy.to_degrees()))?);
        }
    }
    if camera.is_none() && gaze.is_none() {
        return Err(Error::Config(
            "redirect needs a target: --target-frame, --yaw/--pitch or --gaze-pitch/--gaze-yaw".into(),
        ));
    }
    let out = out_path(common, &format!("{}_redirect.png", source.id));
    let (img, cam, g) = redirect(&bundle, &data, f, camera, gaze)?;
    let (gp, gy) = g.to_pitch_yaw();
    let side = RedirectSidecar {
        source_frame: source.id.clone(),
        camera: cam,
        gaze: g,
        gaze_pitch_deg: gp.to_degrees(),
        gaze_yaw_deg: gy.to_degrees(),
    };
    save_rgb(img.view(), &out)?;
    fs::write(out.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
    println!("{}", out.display());
    Ok(())
}

/// Renders the interpolation strip: `steps` images from `a` toward `b`
/// in the selected attributes, all under frame `a`'s camera and gaze.
pub fn interpolation_strip(bundle: &ModelBundle<f32>, data: &Dataset, a: usize, b: usize, attributes: &[Attribute], steps: usize) -> Result<Vec<Array3<f32>>> {
    if attributes.is_empty() {
        return Err(Error::Config("attribute subset is empty".into()));
    }
    if steps < 2 {
        return Err(Error::Config("interpolation needs at least 2 steps".into()));
    }
    let ra = &data.manifest.frames[a];
    let la = bundle.latents.face_latent(&ra.id)?;
    let lb = bundle.latents.face_latent(&data.manifest.frames[b].id)?;
    let eyes = data.eye_geometry(a)?;
    (0..steps)
        .map(|k| {
            let t = k as f64 / (steps - 1) as f64;
            let l = interpolate_latents(&la, &lb, t, attributes)?;
            bundle.render(&ra.camera, &l, &ra.gaze, eyes)
        })
        .collect()
}

fn parse_attributes(names: &[String]) -> Result<Vec<Attribute>> {
    let attrs = names
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse())
        .collect::<Result<Vec<Attribute>>>()?;
    if attrs.is_empty() {
        return Err(Error::Config("attribute subset is empty".into()));
    }
    Ok(attrs)
}

fn cmd_interpolate(common: &Common, args: &InterpolateArgs) -> Result<()> {
    let attrs = parse_attributes(&args.attributes)?;
    let bundle = load_bundle(common)?;
    let data = Dataset::load(&args.data.data)?;
    let (a, b) = (frame_index(&data, &args.from)?, frame_index(&data, &args.to)?);
    let strip = interpolation_strip(&bundle, &data, a, b, &attrs, args.steps)?;
    let out = out_path(common, "interpolation");
    staged(&out, |dir| {
        for (k, img) in strip.iter().enumerate() {
            save_rgb(img.view(), &dir.join(format!("{k:03}.png")))?;
        }
        let views: Vec<_> = strip.iter().map(|i| i.view()).collect();
        let joined = concatenate(Axis(2), &views).expect("same height");
        save_rgb(joined.view(), &dir.join("strip.png"))
    })?;
    println!("{}", out.display());
    Ok(())
}

fn upsample(grid: &Array2<f32>, factor: usize) -> Array2<f32> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(i, j)| grid[[i / factor, j / factor]])
}

/// Renders the sweep and returns the manifest written under `dir`.
pub fn export_dataset(bundle: &ModelBundle<f32>, data: &Dataset, spec: &SweepSpec, dir: &Path) -> Result<Manifest> {
    let attrs = spec.validate(&data.manifest)?;
    let cfg = &bundle.config;
    let (h, w) = (cfg.image_height(), cfg.image_width());
    let mut subjects = Vec::new();
    for f in &spec.frames {
        let s = data.manifest.subject(&data.manifest.frame(f)?.subject)?;
        if !subjects.iter().any(|x: &crate::datagen::SubjectMeta| x.id == s.id) {
            subjects.push(s.clone());
        }
    }
    let mut manifest = Manifest::new(h, w, subjects);
    let mut n = 0;
    for fid in &spec.frames {
        let f = frame_index(data, fid)?;
        let rec = &data.manifest.frames[f];
        let eyes = data.eye_geometry(f)?;
        let base = bundle.latents.face_latent(fid)?;
        let cameras: Vec<CameraSpec> = if spec.poses.is_empty() {
            vec![rec.camera]
        } else {
            let (sy, sp, _) = rec.camera.orbit_angles();
            spec.poses.iter().map(|p| shifted_camera(&rec.camera, p[0] - sy, p[1] - sp)).collect()
        };
        let gazes: Vec<GazeVector> = if spec.gazes.is_empty() {
            vec![rec.gaze]
        } else {
            spec.gazes.iter().map(|g| check_gaze(g[0], g[1])).collect::<Result<_>>()?
        };
        let mut latents = vec![base.clone()];
        for (attr, sweep) in &attrs {
            let other = bundle.latents.face_latent(&sweep.with)?;
            latents = latents
                .iter()
                .flat_map(|l| sweep.t.iter().map(move |&t| (l, t)))
                .map(|(l, t)| interpolate_latents(l, &other, t, &[*attr]))
                .collect::<Result<_>>()?;
        }
        for camera in &cameras {
            for gaze in &gazes {
                for latent in &latents {
                    let (out, _) = forward(cfg, &bundle.networks, camera, latent, gaze, eyes, false)?;
                    let head = upsample(&out.global.density, cfg.decoder.upscale());
                    let masks = eyes.masks(camera, h, w, 1.0)?;
                    let masks = masks.map(|m| m.grid.mapv(|v| v as f32));
                    let id = format!("x{n:04}");
                    n += 1;
                    manifest.frames.push(write_frame_files(
                        dir,
                        &id,
                        &rec.subject,
                        out.image.view(),
                        head.view(),
                        [masks[0].view(), masks[1].view()],
                        *camera,
                        *gaze,
                    )?);
                }
            }
        }
    }
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

fn cmd_export(common: &Common, args: &ExportArgs) -> Result<()> {
    let spec = SweepSpec::from_toml(&read_text(&args.sweep)?)?;
    let bundle = load_bundle(common)?;
    let data = Dataset::load(&args.data.data)?;
    spec.validate(&data.manifest)?;
    let out = out_path(common, "export");
    let mut count = 0;
    staged(&out, |dir| {
        count = export_dataset(&bundle, &data, &spec, dir)?.frames.len();
        Ok(())
    })?;
    read_manifest(&out)?;
    println!("{} ({count} frames)", out.display());
    Ok(())
}

fn cmd_eval(common: &Common, args: &DataArgs) -> Result<()> {
    let cfg = match &common.config {
        Some(p) => toml::from_str::<EvalConfig>(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => EvalConfig::default(),
    };
    let bundle = load_bundle(common)?;
    let data = Dataset::load(&args.data)?;
    let report = evaluate(&bundle, &data, &cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &common.out {
        Some(p) => {
            fs::write(p, &json)?;
            println!("{}", p.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

/// The four-view, two-gaze toy set used by the overfit checks.
pub fn default_toy_spec(size: usize) -> ToyDatasetSpec {
    // four corner gazes, each seen from two views and paired differently in each
    let (a, b, c, d) = ((-12.0, -12.0), (12.0, 12.0), (-12.0, 12.0), (12.0, -12.0));
    let views = [((-12.0, -6.0), [a, b]), ((12.0, -6.0), [c, d]), ((-12.0, 6.0), [a, c]), ((12.0, 6.0), [b, d])];
    let pairs = views.into_iter().flat_map(|(v, gs)| gs.map(|g| (v, g)));
    ToyDatasetSpec::from_pairs(pairs, size, size)
}

fn cmd_toy(common: &Common, args: &ToyArgs) -> Result<()> {
    let mut spec = match &common.config {
        Some(p) => toml::from_str::<ToyDatasetSpec>(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => default_toy_spec(args.size),
    };
    if let Some(seed) = common.seed {
        spec.subjects = spec
            .subjects
            .iter()
            .enumerate()
            .map(|(i, _)| ToySceneParams::for_subject(seed.wrapping_add(i as u64)))
            .collect();
    }
    spec.validate()?;
    let out = out_path(common, "toy");
    staged(&out, |dir| write_toy_dataset(&spec, dir).map(|_| ()))?;
    println!("{}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Train(a) => cmd_train(c, a),
        Command::Render(a) => cmd_render(c, a),
        Command::Redirect(a) => cmd_redirect(c, a),
        Command::Interpolate(a) => cmd_interpolate(c, a),
        Command::ExportDataset(a) => cmd_export(c, a),
        Command::Eval(a) => cmd_eval(c, a),
        Command::ToyDataset(a) => cmd_toy(c, a),
    }
}
