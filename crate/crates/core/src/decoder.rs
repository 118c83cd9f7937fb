//! Coarse-to-fine neural rendering decoder.
//!
//! One block maps `C x H x W` to `C' x 2H x 2W`:
//! `X' = PixShuffle(Repeat(X, 4) + φ(X), 2)`, then a fixed per-channel blur
//! and a learned pointwise channel map. `Repeat` places each input channel
//! on all four sub-pixels of its shuffle group, so without the residual the
//! block is a nearest-neighbour upsample. Features are kept pixel-major
//! (`H*W x C`) so every pointwise map is a single matrix product.

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, leaky_relu, leaky_relu_backward, sigmoid, Linear, Parameters};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub input_channels: usize,
    /// Output channels of each block; its length is the block count.
    pub channel_schedule: Vec<usize>,
    /// 1D taps of the separable blur; `K = outer(taps, taps) / sum^2`.
    pub blur_taps: Vec<f64>,
    pub output_channels: usize,
}

impl DecoderConfig {
    pub fn desk(input_channels: usize) -> Self {
        Self {
            input_channels,
            channel_schedule: vec![32, 16],
            blur_taps: vec![1.0, 3.0, 3.0, 1.0],
            output_channels: 3,
        }
    }

    pub fn paper_shape() -> Self {
        Self {
            input_channels: 256,
            channel_schedule: vec![128, 64, 32],
            blur_taps: vec![1.0, 3.0, 3.0, 1.0],
            output_channels: 3,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.channel_schedule.len()
    }

    pub fn upscale(&self) -> usize {
        1 << self.num_blocks()
    }

    /// Image-pixel radius beyond which a feature pixel's footprint cannot
    /// influence the output.
    pub fn receptive_radius(&self) -> usize {
        self.upscale() * self.blur_taps.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.is_empty() {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        if self.channel_schedule.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return Err(Error::Config("decoder channel counts must be positive".into()));
        }
        if self.blur_taps.is_empty()
            || self.blur_taps.iter().any(|&t| t < 0.0 || !t.is_finite())
            || self.blur_taps.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("blur taps must be non-negative with positive sum".into()));
        }
        if self.output_channels != 3 {
            return Err(Error::Config("decoder emits RGB".into()));
        }
        Ok(())
    }

    /// Normalized 1D taps.
    pub fn taps(&self) -> Vec<f64> {
        let sum: f64 = self.blur_taps.iter().sum();
        self.blur_taps.iter().map(|t| t / sum).collect()
    }

    /// The full normalized 2D kernel.
    pub fn kernel(&self) -> Array2<f64> {
        let k = self.taps();
        Array2::from_shape_fn((k.len(), k.len()), |(i, j)| k[i] * k[j])
    }
}

/// Pixel-major feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    /// `height*width x channels`.
    pub data: Array2<T>,
}

impl<T: Real> Grid<T> {
    pub fn from_chw(chw: ArrayView3<T>) -> Self {
        let (c, h, w) = chw.dim();
        let data = chw
            .to_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous")
            .reversed_axes()
            .as_standard_layout()
            .into_owned();
        Self { height: h, width: w, data }
    }

    pub fn to_chw(&self) -> Array3<T> {
        let c = self.data.ncols();
        self.data
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, self.height, self.width))
            .expect("contiguous")
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// Per-channel separable convolution with clamped borders. Output pixel
/// `x` reads input `x + a - (len - 1) / 2` for tap `a`.
pub fn blur<T: Real>(x: &Grid<T>, taps: &[f64]) -> Grid<T> {
    let rows = blur_axis(x, taps, false);
    blur_axis(&rows, taps, true)
}

pub fn blur_backward<T: Real>(dy: &Grid<T>, taps: &[f64]) -> Grid<T> {
    let cols = blur_axis_transpose(dy, taps, true);
    blur_axis_transpose(&cols, taps, false)
}

fn tap_index(pos: usize, a: usize, len: usize, n: usize) -> usize {
    let off = (len - 1) / 2;
    (pos + a).saturating_sub(off).min(n - 1)
}

fn blur_axis<T: Real>(x: &Grid<T>, taps: &[f64], vertical: bool) -> Grid<T> {
    let (h, w) = (x.height, x.width);
    let mut out = Array2::zeros(x.data.dim());
    let k: Vec<T> = taps.iter().map(|&t| T::lit(t)).collect();
    for i in 0..h {
        for j in 0..w {
            let mut row = out.row_mut(i * w + j);
            for (a, &ka) in k.iter().enumerate() {
                let src = if vertical {
                    tap_index(i, a, k.len(), h) * w + j
                } else {
                    i * w + tap_index(j, a, k.len(), w)
                };
                row.scaled_add(ka, &x.data.row(src));
            }
        }
    }
    Grid { height: h, width: w, data: out }
}

fn blur_axis_transpose<T: Real>(dy: &Grid<T>, taps: &[f64], vertical: bool) -> Grid<T> {
    let (h, w) = (dy.height, dy.width);
    let mut out = Array2::zeros(dy.data.dim());
    let k: Vec<T> = taps.iter().map(|&t| T::lit(t)).collect();
    for i in 0..h {
        for j in 0..w {
            let g = dy.data.row(i * w + j);
            for (a, &ka) in k.iter().enumerate() {
                let dst = if vertical {
                    tap_index(i, a, k.len(), h) * w + j
                } else {
                    i * w + tap_index(j, a, k.len(), w)
                };
                out.row_mut(dst).scaled_add(ka, &g);
            }
        }
    }
    Grid { height: h, width: w, data: out }
}

/// `(H*W x 4C)` with channel `c*4 + dy*2 + dx` to `(2H*2W x C)`.
pub fn pixel_shuffle<T: Real>(x: &Grid<T>) -> Grid<T> {
    let (h, w) = (x.height, x.width);
    let c = x.channels() / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Array2::zeros((oh * ow, c));
    for i in 0..h {
        for j in 0..w {
            let src = x.data.row(i * w + j);
            for dy in 0..2 {
                for dx in 0..2 {
                    let mut dst = out.row_mut((2 * i + dy) * ow + 2 * j + dx);
                    let sub = dy * 2 + dx;
                    for ch in 0..c {
                        dst[ch] = src[ch * 4 + sub];
                    }
                }
            }
        }
    }
    Grid { height: oh, width: ow, data: out }
}

pub fn pixel_unshuffle<T: Real>(x: &Grid<T>) -> Grid<T> {
    let (h, w) = (x.height / 2, x.width / 2);
    let c = x.channels();
    let ow = x.width;
    let mut out = Array2::zeros((h * w, 4 * c));
    for i in 0..h {
        for j in 0..w {
            let mut dst = out.row_mut(i * w + j);
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = x.data.row((2 * i + dy) * ow + 2 * j + dx);
                    let sub = dy * 2 + dx;
                    for ch in 0..c {
                        dst[ch * 4 + sub] = src[ch];
                    }
                }
            }
        }
    }
    Grid { height: h, width: w, data: out }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeBlock<T> {
    pub phi_hidden: Linear<T>,
    pub phi_out: Linear<T>,
    pub adjust: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input: Grid<T>,
    phi_pre: Array2<T>,
    phi_act: Array2<T>,
    blurred: Grid<T>,
    adjust_pre: Array2<T>,
}

impl<T: Real> BlockCache<T> {
    /// Features after shuffle and blur, before the channel map.
    pub fn blurred(&self) -> &Grid<T> {
        &self.blurred
    }
}

impl<T: Real> DecodeBlock<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            phi_hidden: Linear::zeros(c_in, 4 * c_in),
            phi_out: Linear::zeros(4 * c_in, 4 * c_in),
            adjust: Linear::zeros(c_in, c_out),
        }
    }

    pub fn init<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            phi_hidden: Linear::init(c_in, 4 * c_in, 2f64.sqrt(), rng),
            phi_out: Linear::init(4 * c_in, 4 * c_in, 0.5, rng),
            adjust: Linear::init(c_in, c_out, 2f64.sqrt(), rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.adjust.fan_in()
    }

    pub fn forward_cached(&self, x: &Grid<T>, taps: &[f64]) -> Result<(Grid<T>, BlockCache<T>)> {
        let c = self.in_channels();
        if x.channels() != c {
            return Err(Error::shape("decode block input channels", c, x.channels()));
        }
        let phi_pre = self.phi_hidden.forward(x.data.view());
        let phi_act = leaky_relu(&phi_pre);
        let mut y = self.phi_out.forward(phi_act.view());
        for (mut row, src) in y.rows_mut().into_iter().zip(x.data.rows()) {
            for ch in 0..c {
                for sub in 0..4 {
                    row[ch * 4 + sub] += src[ch];
                }
            }
        }
        let shuffled = pixel_shuffle(&Grid {
            height: x.height,
            width: x.width,
            data: y,
        });
        let blurred = blur(&shuffled, taps);
        let adjust_pre = self.adjust.forward(blurred.data.view());
        let out = Grid {
            height: blurred.height,
            width: blurred.width,
            data: leaky_relu(&adjust_pre),
        };
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                phi_pre,
                phi_act,
                blurred,
                adjust_pre,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache<T>, d_out: Array2<T>, taps: &[f64], grad: &mut DecodeBlock<T>) -> Grid<T> {
        let mut dz = d_out;
        leaky_relu_backward(&cache.adjust_pre, &mut dz);
        let d_blurred = Grid {
            height: cache.blurred.height,
            width: cache.blurred.width,
            data: self.adjust.backward(cache.blurred.data.view(), dz.view(), &mut grad.adjust),
        };
        let d_y = pixel_unshuffle(&blur_backward(&d_blurred, taps));
        let c = self.in_channels();
        let mut dx = Array2::zeros(cache.input.data.dim());
        for (mut row, g) in dx.rows_mut().into_iter().zip(d_y.data.rows()) {
            for ch in 0..c {
                row[ch] = g[ch * 4] + g[ch * 4 + 1] + g[ch * 4 + 2] + g[ch * 4 + 3];
            }
        }
        let mut d_act = self.phi_out.backward(cache.phi_act.view(), d_y.data.view(), &mut grad.phi_out);
        leaky_relu_backward(&cache.phi_pre, &mut d_act);
        dx += &self.phi_hidden.backward(cache.input.data.view(), d_act.view(), &mut grad.phi_hidden);
        Grid {
            height: cache.input.height,
            width: cache.input.width,
            data: dx,
        }
    }
}

impl<T: Real> Parameters<T> for DecodeBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.phi_hidden.visit(&join(prefix, "phi_hidden"), f);
        self.phi_out.visit(&join(prefix, "phi_out"), f);
        self.adjust.visit(&join(prefix, "adjust"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.phi_hidden.visit_mut(&join(prefix, "phi_hidden"), f);
        self.phi_out.visit_mut(&join(prefix, "phi_out"), f);
        self.adjust.visit_mut(&join(prefix, "adjust"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    pub blocks: Vec<DecodeBlock<T>>,
    pub to_rgb: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    last: Grid<T>,
    /// Sigmoid outputs, pixel-major.
    rgb: Array2<T>,
}

impl<T: Real> Decoder<T> {
    fn channel_pairs(config: &DecoderConfig) -> Vec<(usize, usize)> {
        let mut c = config.input_channels;
        config
            .channel_schedule
            .iter()
            .map(|&next| {
                let pair = (c, next);
                c = next;
                pair
            })
            .collect()
    }

    pub fn zeros(config: DecoderConfig) -> Self {
        let blocks = Self::channel_pairs(&config)
            .into_iter()
            .map(|(a, b)| DecodeBlock::zeros(a, b))
            .collect();
        let last = *config.channel_schedule.last().expect("validated schedule");
        Self {
            to_rgb: Linear::zeros(last, config.output_channels),
            blocks,
            config,
        }
    }

    pub fn init<R: Rng>(config: DecoderConfig, rng: &mut R) -> Self {
        let blocks = Self::channel_pairs(&config)
            .into_iter()
            .map(|(a, b)| DecodeBlock::init(a, b, rng))
            .collect();
        let last = *config.channel_schedule.last().expect("validated schedule");
        Self {
            to_rgb: Linear::init(last, config.output_channels, 1.0, rng),
            blocks,
            config,
        }
    }

    /// `C x H x W` features to a `3 x H 2^B x W 2^B` image in `[0, 1]`.
    pub fn neural_render(&self, features: ArrayView3<T>) -> Result<Array3<T>> {
        self.run(features, false).map(|(img, _)| img)
    }

    pub fn forward_cached(&self, features: ArrayView3<T>) -> Result<(Array3<T>, DecoderCache<T>)> {
        self.run(features, true)
    }

    fn run(&self, features: ArrayView3<T>, keep: bool) -> Result<(Array3<T>, DecoderCache<T>)> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "decoder input".into(),
                detail: "global feature map".into(),
            });
        }
        let taps = self.config.taps();
        let mut x = Grid::from_chw(features);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward_cached(&x, &taps)?;
            if y.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    stage: format!("decoder block {b}"),
                    detail: format!("{}x{} output", y.height, y.width),
                });
            }
            if keep {
                caches.push(cache);
            }
            x = y;
        }
        let rgb = self.to_rgb.forward(x.data.view()).mapv(sigmoid);
        let image = Grid {
            height: x.height,
            width: x.width,
            data: rgb.clone(),
        }
        .to_chw();
        Ok((image, DecoderCache { blocks: caches, last: x, rgb }))
    }

    /// Accumulates parameter gradients and returns `dL/dfeatures` (`C x H x W`).
    pub fn backward(&self, cache: &DecoderCache<T>, d_image: ArrayView3<T>, grad: &mut Decoder<T>) -> Array3<T> {
        let taps = self.config.taps();
        let d_rgb = Grid::from_chw(d_image).data;
        let d_pre = ndarray::Zip::from(&d_rgb)
            .and(&cache.rgb)
            .map_collect(|&d, &y| d * y * (T::one() - y));
        let mut dx = self.to_rgb.backward(cache.last.data.view(), d_pre.view(), &mut grad.to_rgb);
        let mut grid = None;
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let g = block.backward(&cache.blocks[b], dx, &taps, &mut grad.blocks[b]);
            dx = g.data.clone();
            grid = Some(g);
        }
        grid.expect("at least one block").to_chw()
    }
}

impl<T: Real> Parameters<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        for (b, block) in self.blocks.iter().enumerate() {
            block.visit(&join(prefix, &format!("block{b}")), f);
        }
        self.to_rgb.visit(&join(prefix, "to_rgb"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&join(prefix, &format!("block{b}")), f);
        }
        self.to_rgb.visit_mut(&join(prefix, "to_rgb"), f);
    }
}

/// Extracts one channel of a pixel-major grid as an `H x W` array.
pub fn channel<T: Real>(g: &Grid<T>, c: usize) -> Array2<T> {
    g.data
        .slice(s![.., c])
        .to_owned()
        .into_shape_with_order((g.height, g.width))
        .expect("contiguous")
}
