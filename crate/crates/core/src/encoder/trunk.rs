//! Frozen convolutional trunk producing stride-8 feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensorcore::Tensor;
use crate::{Error, Result};

/// Smallest accepted image edge.
pub const MIN_EDGE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    /// Output channels of the three stride-2 stages.
    pub channels: [usize; 3],
    /// Feature dimension `D` after the 1×1 lift.
    pub dim: usize,
    /// Optional 2× bilinear upsample of the final grid (stride 4).
    pub upsample: bool,
    /// Realize each stride-2 stage as a stride-1 convolution followed by 2×2
    /// average pooling instead of a strided convolution.
    pub antialias: bool,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self { channels: [16, 32, 32], dim: 32, upsample: false, antialias: true }
    }
}

/// Spatial feature grid `[H, W, D]` with its source image size.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid: Tensor<f32>,
    pub image_w: usize,
    pub image_h: usize,
    pub stride: usize,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.grid.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    /// `[ky][kx][cin][cout]`
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv {
    fn random(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Self {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let w = Normal::new(0.0, std).expect("positive std");
        let b = Normal::new(0.0, 0.05).expect("positive std");
        Self {
            cin,
            cout,
            k,
            weight: (0..k * k * cin * cout).map(|_| w.sample(rng) as f32).collect(),
            bias: (0..cout).map(|_| b.sample(rng) as f32).collect(),
        }
    }

    /// Stride-`s` convolution with replicate padding; output pixel `(i, j)`
    /// is centred on input `(s·i, s·j)`.
    fn apply(&self, x: &[f32], h: usize, w: usize, stride: usize, relu: bool) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let r = (self.k / 2) as isize;
        let mut out = vec![0.0f32; oh * ow * self.cout];
        for i in 0..oh {
            for j in 0..ow {
                let acc = &mut out[(i * ow + j) * self.cout..][..self.cout];
                acc.copy_from_slice(&self.bias);
                for ky in 0..self.k {
                    let y = ((i * stride) as isize + ky as isize - r).clamp(0, h as isize - 1) as usize;
                    for kx in 0..self.k {
                        let xx = ((j * stride) as isize + kx as isize - r).clamp(0, w as isize - 1) as usize;
                        let px = &x[(y * w + xx) * self.cin..][..self.cin];
                        let wk = &self.weight[(ky * self.k + kx) * self.cin * self.cout..];
                        for (ci, &v) in px.iter().enumerate() {
                            let row = &wk[ci * self.cout..][..self.cout];
                            for (a, &wv) in acc.iter_mut().zip(row) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                if relu {
                    acc.iter_mut().for_each(|a| *a = a.max(0.0));
                }
            }
        }
        (out, oh, ow)
    }
}

/// Three stride-2 3×3 stages with ReLU, then a 1×1 lift to `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    config: TrunkConfig,
    convs: Vec<Conv>,
}

impl Trunk {
    pub fn random(config: TrunkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for &c in &config.channels {
            convs.push(Conv::random(&mut rng, 3, cin, c));
            cin = c;
        }
        convs.push(Conv::random(&mut rng, 1, cin, config.dim));
        Self { config, convs }
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn stride(&self) -> usize {
        if self.config.upsample {
            4
        } else {
            8
        }
    }

    /// `image: [h, w, 3]` with values in `[0, 1]`.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<FeatureMap> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Config(format!("image must be [h, w, 3], got {s:?}")));
        }
        let (mut h, mut w) = (s[0], s[1]);
        if h < MIN_EDGE || w < MIN_EDGE {
            return Err(Error::ImageTooSmall { w, h, min: MIN_EDGE });
        }
        let (image_h, image_w) = (h, w);
        let mut x: Vec<f32> = image.data().iter().map(|v| v - 0.5).collect();
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            let last = i == n - 1;
            if !last && self.config.antialias {
                let (y, oh, ow) = conv.apply(&x, h, w, 1, true);
                (x, h, w) = avg_pool2(&y, oh, ow, conv.cout);
            } else {
                let (y, oh, ow) = conv.apply(&x, h, w, if last { 1 } else { 2 }, !last);
                (x, h, w) = (y, oh, ow);
            }
        }
        let d = self.config.dim;
        let mut grid = Tensor::new([h, w, d], x)?;
        if self.config.upsample {
            grid = upsample2x(&grid);
        }
        Ok(FeatureMap { grid, image_w, image_h, stride: self.stride() })
    }

    /// Named tensors for checkpointing.
    pub fn entries(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let w = Tensor::new([c.k, c.k, c.cin, c.cout], c.weight.clone()).expect("conv shape");
            out.push((format!("trunk.conv{i}.weight"), w));
            out.push((format!("trunk.conv{i}.bias"), Tensor::vector(&c.bias)));
        }
        out
    }

    /// Rebuilds a trunk from [`Trunk::entries`] output.
    pub fn from_entries(config: TrunkConfig, entries: &[(String, Tensor<f32>)]) -> Result<Self> {
        let mut t = Self::random(config, 0);
        for (i, c) in t.convs.iter_mut().enumerate() {
            let find = |name: String| {
                entries
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| v)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))
            };
            let w = find(format!("trunk.conv{i}.weight"))?;
            let b = find(format!("trunk.conv{i}.bias"))?;
            if w.len() != c.weight.len() || b.len() != c.bias.len() {
                return Err(Error::Config(format!("trunk stage {i} shape mismatch")));
            }
            c.weight = w.data().to_vec();
            c.bias = b.data().to_vec();
        }
        Ok(t)
    }
}

/// 2×2 mean pooling, replicating the last row/column for odd sizes.
fn avg_pool2(x: &[f32], h: usize, w: usize, c: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0f32; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let dst = &mut out[(i * ow + j) * c..][..c];
            for (y, xx) in [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)] {
                let src = &x[(y.min(h - 1) * w + xx.min(w - 1)) * c..][..c];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += 0.25 * s);
            }
        }
    }
    (out, oh, ow)
}

/// Bilinear 2× upsample of `[H, W, D]` using the half-pixel convention.
fn upsample2x(grid: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, d) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let src = grid.data();
    let mut out = vec![0.0f32; 4 * h * w * d];
    for i in 0..2 * h {
        for j in 0..2 * w {
            let fy = ((i as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (h - 1) as f32);
            let fx = ((j as f32 + 0.5) / 2.0 - 0.5).clamp(0.0, (w - 1) as f32);
            let dst = &mut out[(i * 2 * w + j) * d..][..d];
            bilinear_into(src, h, w, d, fy, fx, 1.0, dst);
        }
    }
    Tensor::new([2 * h, 2 * w, d], out).expect("upsample shape")
}

/// Adds `weight ·` the bilinear sample at grid position `(fy, fx)` into `dst`.
/// The position must already be clamped to the grid.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_into(src: &[f32], h: usize, w: usize, d: usize, fy: f32, fx: f32, weight: f32, dst: &mut [f32]) {
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
    let corners = [
        (y0, x0, (1.0 - ty) * (1.0 - tx)),
        (y0, x1, (1.0 - ty) * tx),
        (y1, x0, ty * (1.0 - tx)),
        (y1, x1, ty * tx),
    ];
    for (y, x, c) in corners {
        if c == 0.0 {
            continue;
        }
        let px = &src[(y * w + x) * d..][..d];
        for (o, &v) in dst.iter_mut().zip(px) {
            *o += weight * c * v;
        }
    }
}
