//! wasm-bindgen bindings for `www/index.html`. Every entry point takes the
//! orbit camera angles and the gaze angles in degrees.

use nerf_gaze::camera::{CameraSpec, Intrinsics};
use nerf_gaze::datagen::{estimate_gaze_from_toy_image, render_toy_frame, ToyFrame, ToySceneParams, ORBIT_DISTANCE};
use nerf_gaze::encodings::GazeVector;
use wasm_bindgen::prelude::*;

const MAX_SIZE: usize = 256;

fn scene(yaw: f64, pitch: f64, gaze_pitch: f64, gaze_yaw: f64, size: usize) -> Result<(ToySceneParams, CameraSpec, GazeVector, ToyFrame), String> {
    if size == 0 || size > MAX_SIZE {
        return Err(format!("size must be in 1..={MAX_SIZE}"));
    }
    let params = ToySceneParams::default();
    let camera = CameraSpec::orbit(yaw, pitch, ORBIT_DISTANCE, Intrinsics::default()).with_bounds(1.0, 3.5);
    let gaze = GazeVector::from_pitch_yaw_degrees(gaze_pitch, gaze_yaw);
    let frame = render_toy_frame(&params, &camera, &gaze, size, size).map_err(|e| e.to_string())?;
    Ok((params, camera, gaze, frame))
}

fn rgba(frame: &ToyFrame, overlay: bool) -> Vec<u8> {
    let (_, h, w) = frame.image.dim();
    let mut out = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        for j in 0..w {
            let mut px = [0.0; 3];
            for (k, p) in px.iter_mut().enumerate() {
                *p = frame.image[[k, i, j]];
            }
            if overlay {
                let (r, l) = (frame.eye_masks[0][[i, j]], frame.eye_masks[1][[i, j]]);
                px[0] = px[0] * (1.0 - 0.6 * r) + 0.6 * r;
                px[1] = px[1] * (1.0 - 0.6 * l) + 0.6 * l;
            }
            out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
    }
    out
}

/// Oracle image as RGBA bytes, `size x size`.
pub fn render_rgba(yaw: f64, pitch: f64, gaze_pitch: f64, gaze_yaw: f64, size: usize, overlay: bool) -> Result<Vec<u8>, String> {
    scene(yaw, pitch, gaze_pitch, gaze_yaw, size).map(|(_, _, _, f)| rgba(&f, overlay))
}

/// `[pitch, yaw, error]` in degrees recovered by the toy gaze probe.
pub fn probe(yaw: f64, pitch: f64, gaze_pitch: f64, gaze_yaw: f64, size: usize) -> Result<Vec<f64>, String> {
    let (params, camera, gaze, frame) = scene(yaw, pitch, gaze_pitch, gaze_yaw, size)?;
    let masks = [frame.eye_masks[0].view(), frame.eye_masks[1].view()];
    let est = estimate_gaze_from_toy_image(frame.image.view(), masks, &params, &camera).map_err(|e| e.to_string())?;
    let (p, y) = est.to_pitch_yaw();
    Ok(vec![p.to_degrees(), y.to_degrees(), est.angle_degrees(&gaze)])
}

#[wasm_bindgen]
pub fn render_toy(yaw: f64, pitch: f64, gaze_pitch: f64, gaze_yaw: f64, size: usize) -> Result<Vec<u8>, JsValue> {
    render_rgba(yaw, pitch, gaze_pitch, gaze_yaw, size, false).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn render_eye_masks(yaw: f64, pitch: f64, gaze_pitch: f64, gaze_yaw: f64, size: usize) -> Result<Vec<u8>, JsValue> {
    render_rgba(yaw, pitch, gaze_pitch, gaze_yaw, size, true).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn probe_gaze(yaw: f64, pitch: f64, gaze_pitch: f64, gaze_yaw: f64, size: usize) -> Result<Vec<f64>, JsValue> {
    probe(yaw, pitch, gaze_pitch, gaze_yaw, size).map_err(|e| JsValue::from_str(&e))
}
