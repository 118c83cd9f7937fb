//! Masked reconstruction and perceptual losses with gradients w.r.t. the
//! predicted image. Images are `3 x H x W`, masks `H x W` in `[0, 1]`.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::uniform_matrix;
use crate::real::Real;

/// Multi-stage image features with a vector-Jacobian product.
pub trait PerceptualExtractor<T: Real> {
    /// Identity recorded in checkpoints.
    fn kind(&self) -> &str;
    fn seed(&self) -> u64;
    fn stage_count(&self) -> usize;
    /// Spatial downsampling of stage `i` relative to the input.
    fn downsampling(&self, stage: usize) -> usize;
    fn extract(&self, image: ArrayView3<T>) -> Result<Vec<Array3<T>>>;
    /// Gradient w.r.t. the image of `sum_i <d_stages[i], psi_i(image)>`.
    fn extract_backward(&self, image: ArrayView3<T>, d_stages: &[Array3<T>]) -> Result<Array3<T>>;
}

/// 3x3 zero-padded convolution, 2x average pooling, tanh.
#[derive(Clone, Debug)]
struct ConvStage {
    /// `in*9 x out`, rows ordered `(c, dy, dx)`.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Fixed random convolutional features, reproducible from a seed.
#[derive(Clone, Debug)]
pub struct SeededConvExtractor {
    seed: u64,
    stages: Vec<ConvStage>,
}

pub const DEFAULT_EXTRACTOR_KIND: &str = "seeded-conv";
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed;

impl SeededConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3usize, 8, 16, 32];
        let stages = widths
            .windows(2)
            .map(|w| ConvStage {
                weight: uniform_matrix(w[0] * 9, w[1], 1.0, &mut rng),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { seed, stages }
    }
}

impl Default for SeededConvExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_EXTRACTOR_SEED)
    }
}

fn im2col<T: Real>(x: ArrayView3<T>) -> Array2<T> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((h * w, c * 9));
    for i in 0..h {
        for j in 0..w {
            let mut row = col.row_mut(i * w + j);
            for ch in 0..c {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (y, xx) = (i + dy, j + dx);
                        if y >= 1 && y <= h && xx >= 1 && xx <= w {
                            row[ch * 9 + dy * 3 + dx] = x[[ch, y - 1, xx - 1]];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
    let mut x = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let row = col.row(i * w + j);
            for ch in 0..c {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (y, xx) = (i + dy, j + dx);
                        if y >= 1 && y <= h && xx >= 1 && xx <= w {
                            x[[ch, y - 1, xx - 1]] += row[ch * 9 + dy * 3 + dx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Pixel-major `h*w x c` to pooled CHW.
fn avg_pool<T: Real>(x: &Array2<T>, h: usize, w: usize) -> Array3<T> {
    let c = x.ncols();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Array3::zeros((c, oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let v = x[[(2 * i) * w + 2 * j, ch]]
                    + x[[(2 * i) * w + 2 * j + 1, ch]]
                    + x[[(2 * i + 1) * w + 2 * j, ch]]
                    + x[[(2 * i + 1) * w + 2 * j + 1, ch]];
                out[[ch, i, j]] = v * quarter;
            }
        }
    }
    out
}

struct StageTrace<T> {
    input_dims: (usize, usize, usize),
    out: Array3<T>,
}

impl SeededConvExtractor {
    fn check(&self, image: ArrayView3<f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        let f = 1 << self.stages.len();
        if c != 3 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Domain(format!(
                "extractor needs a 3-channel image with sides divisible by {f}, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    fn trace<T: Real>(&self, image: ArrayView3<T>) -> Result<Vec<StageTrace<T>>> {
        self.check(image.mapv(|v| v.as_f64()).view())?;
        let mut traces: Vec<StageTrace<T>> = Vec::with_capacity(self.stages.len());
        let mut x = image.to_owned();
        for (i, st) in self.stages.iter().enumerate() {
            let dims = x.dim();
            let col = im2col(x.view());
            let wt = st.weight.mapv(T::lit);
            let pre = col.dot(&wt) + &st.bias.mapv(T::lit);
            let out = avg_pool(&pre, dims.1, dims.2).mapv(|v| v.tanh());
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: format!("perceptual stage {i}"),
                    detail: "feature grid".into(),
                });
            }
            x = out.clone();
            traces.push(StageTrace { input_dims: dims, out });
        }
        Ok(traces)
    }
}

impl<T: Real> PerceptualExtractor<T> for SeededConvExtractor {
    fn kind(&self) -> &str {
        DEFAULT_EXTRACTOR_KIND
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn stage_count(&self) -> usize {
        self.stages.len()
    }

    fn downsampling(&self, stage: usize) -> usize {
        1 << (stage + 1)
    }

    fn extract(&self, image: ArrayView3<T>) -> Result<Vec<Array3<T>>> {
        Ok(self.trace(image)?.into_iter().map(|t| t.out).collect())
    }

    fn extract_backward(&self, image: ArrayView3<T>, d_stages: &[Array3<T>]) -> Result<Array3<T>> {
        let traces = self.trace(image)?;
        if d_stages.len() != traces.len() {
            return Err(Error::shape("perceptual stage gradients", traces.len(), d_stages.len()));
        }
        let quarter = T::lit(0.25);
        let mut carry: Option<Array3<T>> = None;
        for i in (0..traces.len()).rev() {
            let t = &traces[i];
            let mut d_out = d_stages[i].clone();
            if let Some(c) = carry.take() {
                d_out += &c;
            }
            // through tanh
            Zip::from(&mut d_out).and(&t.out).for_each(|d, &y| *d *= T::one() - y * y);
            // through pooling, into pixel-major pre-activations
            let (_, h, w) = t.input_dims;
            let co = d_out.dim().0;
            let mut d_pre = Array2::zeros((h * w, co));
            for ch in 0..co {
                for i2 in 0..h / 2 {
                    for j2 in 0..w / 2 {
                        let g = d_out[[ch, i2, j2]] * quarter;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            d_pre[[(2 * i2 + dy) * w + 2 * j2 + dx, ch]] = g;
                        }
                    }
                }
            }
            let wt = self.stages[i].weight.mapv(T::lit);
            let d_col = d_pre.dot(&wt.t());
            carry = Some(col2im(&d_col, t.input_dims.0, h, w));
        }
        Ok(carry.expect("at least one stage"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub reconstruction_weight: f64,
    pub perceptual_weight: f64,
    /// When false the eye-mask terms are dropped from both losses.
    pub eye_mask_term: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            reconstruction_weight: 1.0,
            perceptual_weight: 1.0,
            eye_mask_term: true,
        }
    }
}

/// Weighted loss terms; `total == rec + per`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub per: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(rec: f64, per: f64) -> Self {
        Self { rec, per, total: rec + per }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Masks<'a, T> {
    pub head: ArrayView2<'a, T>,
    pub eye: ArrayView2<'a, T>,
}

fn check_shapes<T: Real>(pred: ArrayView3<T>, gt: ArrayView3<T>, masks: &Masks<T>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape("prediction vs ground truth", format!("{:?}", gt.dim()), format!("{:?}", pred.dim())));
    }
    let hw = (pred.dim().1, pred.dim().2);
    for (name, m) in [("head mask", masks.head), ("eye mask", masks.eye)] {
        if m.dim() != hw {
            return Err(Error::shape(name, format!("{hw:?}"), format!("{:?}", m.dim())));
        }
    }
    Ok(())
}

fn mask_weights<T: Real>(masks: &Masks<T>, eye_term: bool) -> Array2<T> {
    let mut w = masks.head.mapv(|m| m * m);
    if eye_term {
        Zip::from(&mut w).and(masks.eye).for_each(|a, &m| *a += m * m);
    }
    w
}

/// `(||M_h (pred - gt)||^2 + ||M_e (pred - gt)||^2) / (H W)`.
pub fn reconstruction_loss<T: Real>(pred: ArrayView3<T>, gt: ArrayView3<T>, masks: Masks<T>) -> Result<f64> {
    reconstruction_with_grad(pred, gt, masks, true).map(|(l, _)| l)
}

pub fn reconstruction_with_grad<T: Real>(
    pred: ArrayView3<T>,
    gt: ArrayView3<T>,
    masks: Masks<T>,
    eye_term: bool,
) -> Result<(f64, Array3<T>)> {
    check_shapes(pred, gt, &masks)?;
    let (_, h, w) = pred.dim();
    let n = (h * w) as f64;
    let mw = mask_weights(&masks, eye_term);
    let mut loss = 0.0;
    let mut grad = Array3::zeros(pred.dim());
    let scale = T::lit(2.0 / n);
    for c in 0..pred.dim().0 {
        Zip::from(grad.slice_mut(s![c, .., ..]))
            .and(pred.slice(s![c, .., ..]))
            .and(gt.slice(s![c, .., ..]))
            .and(&mw)
            .for_each(|g, &p, &t, &m| {
                let r = p - t;
                loss += (m * r * r).as_f64();
                *g = scale * m * r;
            });
    }
    Ok((loss / n, grad))
}

fn apply_mask<T: Real>(img: ArrayView3<T>, mask: ArrayView2<T>) -> Array3<T> {
    let mut out = img.to_owned();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch *= &mask;
    }
    out
}

fn perceptual_branch<T: Real>(
    pred: ArrayView3<T>,
    gt: ArrayView3<T>,
    mask: ArrayView2<T>,
    extractor: &dyn PerceptualExtractor<T>,
) -> Result<(f64, Array3<T>)> {
    let mp = apply_mask(pred, mask);
    let mg = apply_mask(gt, mask);
    let fp = extractor.extract(mp.view())?;
    let fg = extractor.extract(mg.view())?;
    let mut loss = 0.0;
    let mut d_stages = Vec::with_capacity(fp.len());
    for (a, b) in fp.iter().zip(&fg) {
        let n = a.len() as f64;
        let diff = a - b;
        loss += diff.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / n;
        d_stages.push(diff * T::lit(2.0 / n));
    }
    let d_masked = extractor.extract_backward(mp.view(), &d_stages)?;
    Ok((loss, apply_mask(d_masked.view(), mask)))
}

/// Stage-normalized feature distance of the head-masked and eye-masked images.
pub fn perceptual_loss<T: Real>(
    pred: ArrayView3<T>,
    gt: ArrayView3<T>,
    masks: Masks<T>,
    extractor: &dyn PerceptualExtractor<T>,
) -> Result<f64> {
    perceptual_with_grad(pred, gt, masks, extractor, true).map(|(l, _)| l)
}

pub fn perceptual_with_grad<T: Real>(
    pred: ArrayView3<T>,
    gt: ArrayView3<T>,
    masks: Masks<T>,
    extractor: &dyn PerceptualExtractor<T>,
    eye_term: bool,
) -> Result<(f64, Array3<T>)> {
    check_shapes(pred, gt, &masks)?;
    let (mut loss, mut grad) = perceptual_branch(pred, gt, masks.head, extractor)?;
    if eye_term {
        let (l, g) = perceptual_branch(pred, gt, masks.eye, extractor)?;
        loss += l;
        grad += &g;
    }
    Ok((loss, grad))
}

pub fn total_loss<T: Real>(
    pred: ArrayView3<T>,
    gt: ArrayView3<T>,
    masks: Masks<T>,
    extractor: &dyn PerceptualExtractor<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss_with_grad(pred, gt, masks, extractor, cfg).map(|(b, _)| b)
}

/// Loss breakdown and `dL_total / dpred`.
pub fn total_loss_with_grad<T: Real>(
    pred: ArrayView3<T>,
    gt: ArrayView3<T>,
    masks: Masks<T>,
    extractor: &dyn PerceptualExtractor<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array3<T>)> {
    let (rec, g_rec) = reconstruction_with_grad(pred, gt, masks, cfg.eye_mask_term)?;
    let mut grad = g_rec * T::lit(cfg.reconstruction_weight);
    let mut per = 0.0;
    if cfg.perceptual_weight != 0.0 {
        let (p, g_per) = perceptual_with_grad(pred, gt, masks, extractor, cfg.eye_mask_term)?;
        per = p;
        grad.scaled_add(T::lit(cfg.perceptual_weight), &g_per);
    }
    Ok((
        LossBreakdown::new(cfg.reconstruction_weight * rec, cfg.perceptual_weight * per),
        grad,
    ))
}
