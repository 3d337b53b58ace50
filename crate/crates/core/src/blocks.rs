//! Differentiable building blocks shared by the prebuilder and the recurrent
//! reconstructor: channel attention, residual and residual-dense blocks,
//! pixel shuffle and bicubic resampling.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Parameters};
use crate::tensor::Tensor;

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Squeeze-and-excitation channel attention without biases:
/// `x * sigmoid(W2 relu(W1 avgpool(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeBlock {
    channels: usize,
    reduced: usize,
    /// `reduced x channels`, row-major.
    pub w1: Vec<f64>,
    /// `channels x reduced`, row-major.
    pub w2: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SeCache {
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    pub scales: Vec<f64>,
}

impl SeBlock {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "SE reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        let reduced = channels / reduction;
        Ok(Self {
            channels,
            reduced,
            w1: vec![0.0; reduced * channels],
            w2: vec![0.0; channels * reduced],
        })
    }

    pub fn kaiming<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        let mut se = Self::zeros(channels, reduction)?;
        let n1 = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("finite std");
        let n2 = Normal::new(0.0, (2.0 / se.reduced as f64).sqrt()).expect("finite std");
        se.w1.iter_mut().for_each(|w| *w = n1.sample(rng));
        se.w2.iter_mut().for_each(|w| *w = n2.sample(rng));
        Ok(se)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduced(&self) -> usize {
        self.reduced
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, SeCache)> {
        if x.channels() != self.channels {
            return Err(Error::Config(format!(
                "SE block sized for {} channels received {}",
                self.channels,
                x.channels()
            )));
        }
        let n = x.plane_len() as f64;
        let pooled: Vec<f64> = (0..self.channels)
            .map(|c| x.plane(c).iter().sum::<f64>() / n)
            .collect();
        let hidden: Vec<f64> = (0..self.reduced)
            .map(|r| {
                self.w1[r * self.channels..(r + 1) * self.channels]
                    .iter()
                    .zip(&pooled)
                    .map(|(w, s)| w * s)
                    .sum::<f64>()
            })
            .collect();
        let scales: Vec<f64> = (0..self.channels)
            .map(|c| {
                let a: f64 = self.w2[c * self.reduced..(c + 1) * self.reduced]
                    .iter()
                    .zip(&hidden)
                    .map(|(w, h)| w * h.max(0.0))
                    .sum();
                sigmoid(a)
            })
            .collect();
        let mut out = x.clone();
        for (c, &e) in scales.iter().enumerate() {
            out.plane_mut(c).iter_mut().for_each(|v| *v *= e);
        }
        Ok((
            out,
            SeCache {
                pooled,
                hidden,
                scales,
            },
        ))
    }

    pub fn backward(&self, x: &Tensor, cache: &SeCache, grad_out: &Tensor, grads: &mut SeBlock) -> Tensor {
        let n = x.plane_len() as f64;
        let mut grad_x = grad_out.clone();
        let mut grad_pre = vec![0.0; self.channels];
        for c in 0..self.channels {
            let e = cache.scales[c];
            let d_scale: f64 = grad_out
                .plane(c)
                .iter()
                .zip(x.plane(c))
                .map(|(g, v)| g * v)
                .sum();
            grad_pre[c] = d_scale * e * (1.0 - e);
            grad_x.plane_mut(c).iter_mut().for_each(|g| *g *= e);
        }
        let mut grad_hidden = vec![0.0; self.reduced];
        for c in 0..self.channels {
            for r in 0..self.reduced {
                grads.w2[c * self.reduced + r] += grad_pre[c] * cache.hidden[r].max(0.0);
                grad_hidden[r] += self.w2[c * self.reduced + r] * grad_pre[c];
            }
        }
        let mut grad_pooled = vec![0.0; self.channels];
        for r in 0..self.reduced {
            if cache.hidden[r] <= 0.0 {
                continue;
            }
            let g = grad_hidden[r];
            for c in 0..self.channels {
                grads.w1[r * self.channels + c] += g * cache.pooled[c];
                grad_pooled[c] += self.w1[r * self.channels + c] * g;
            }
        }
        for c in 0..self.channels {
            let g = grad_pooled[c] / n;
            grad_x.plane_mut(c).iter_mut().for_each(|v| *v += g);
        }
        grad_x
    }
}

impl Parameters for SeBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "w2"), &self.w2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "w2"), &mut self.w2);
    }
}

/// `x + conv(relu(conv(x)))` with 3x3 kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn zeros(width: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::zeros(width, width, 3, 1)?,
            conv2: Conv2d::zeros(width, width, 3, 1)?,
        })
    }

    pub fn kaiming<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::kaiming(width, width, 3, 1, rng)?,
            conv2: Conv2d::kaiming(width, width, 3, 1, rng)?,
        })
    }

    pub fn width(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_cached(x).0
    }

    /// Returns the output and the inner activation.
    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, Tensor) {
        let inner = self.conv1.forward(x).relu();
        let out = x.add(&self.conv2.forward(&inner));
        (out, inner)
    }

    pub fn backward(&self, x: &Tensor, inner: &Tensor, grad_out: &Tensor, grads: &mut ResidualBlock) -> Tensor {
        let d_inner = self
            .conv2
            .backward(inner, grad_out, &mut grads.conv2, true)
            .expect("input gradient requested");
        let d_pre = Tensor::relu_backward(inner, &d_inner);
        let mut grad_x = self
            .conv1
            .backward(x, &d_pre, &mut grads.conv1, true)
            .expect("input gradient requested");
        grad_x.add_assign(grad_out);
        grad_x
    }
}

impl Parameters for ResidualBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Number of densely connected 3x3 stages in a residual dense block.
pub const RDB_STAGES: usize = 3;

/// Three densely connected 3x3 conv+ReLU stages, a 1x1 fusion back to the
/// input width and a local residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDenseBlock {
    pub stages: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl ResidualDenseBlock {
    fn build(
        width: usize,
        growth: usize,
        mut make: impl FnMut(usize, usize, usize) -> Result<Conv2d>,
    ) -> Result<Self> {
        let stages = (0..RDB_STAGES)
            .map(|i| make(width + i * growth, growth, 3))
            .collect::<Result<Vec<_>>>()?;
        let fuse = make(width + RDB_STAGES * growth, width, 1)?;
        Ok(Self { stages, fuse })
    }

    pub fn zeros(width: usize, growth: usize) -> Result<Self> {
        Self::build(width, growth, |i, o, k| Conv2d::zeros(i, o, k, 1))
    }

    pub fn kaiming<R: Rng + ?Sized>(width: usize, growth: usize, rng: &mut R) -> Result<Self> {
        Self::build(width, growth, |i, o, k| Conv2d::kaiming(i, o, k, 1, rng))
    }

    pub fn width(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn growth(&self) -> usize {
        self.stages[0].out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_cached(x).0
    }

    /// Returns the output and the stage activations (excluding `x`).
    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut feats: Vec<Tensor> = Vec::with_capacity(RDB_STAGES);
        for stage in &self.stages {
            let input = dense_input(x, &feats);
            feats.push(stage.forward(&input).relu());
        }
        let fused = self.fuse.forward(&dense_input(x, &feats));
        (fused.add(x), feats)
    }

    pub fn backward(
        &self,
        x: &Tensor,
        feats: &[Tensor],
        grad_out: &Tensor,
        grads: &mut ResidualDenseBlock,
    ) -> Tensor {
        let growth = self.growth();
        let all = dense_input(x, feats);
        let d_all = self
            .fuse
            .backward(&all, grad_out, &mut grads.fuse, true)
            .expect("input gradient requested");
        let mut sizes = vec![x.channels()];
        sizes.extend(std::iter::repeat(growth).take(feats.len()));
        let mut d_parts = d_all.split_channels(&sizes);
        d_parts[0].add_assign(grad_out);
        for i in (0..self.stages.len()).rev() {
            let d_pre = Tensor::relu_backward(&feats[i], &d_parts[i + 1]);
            let input = dense_input(x, &feats[..i]);
            let d_input = self.stages[i]
                .backward(&input, &d_pre, &mut grads.stages[i], true)
                .expect("input gradient requested");
            for (j, part) in d_input.split_channels(&sizes[..=i]).iter().enumerate() {
                d_parts[j].add_assign(part);
            }
        }
        d_parts.swap_remove(0)
    }
}

fn dense_input(x: &Tensor, feats: &[Tensor]) -> Tensor {
    if feats.is_empty() {
        return x.clone();
    }
    let mut parts: Vec<&Tensor> = Vec::with_capacity(feats.len() + 1);
    parts.push(x);
    parts.extend(feats.iter());
    Tensor::concat_channels(&parts).expect("stage outputs share spatial size")
}

impl Parameters for ResidualDenseBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

/// Rearranges `(C * s^2, H, W)` into `(C, s * H, s * W)`.
///
/// Input channel `c * s^2 + dy * s + dx` lands at output offset `(dy, dx)`
/// inside each `s x s` cell.
pub fn pixel_shuffle(x: &Tensor, scale: usize) -> Result<Tensor> {
    let s2 = scale * scale;
    if scale == 0 || x.channels() % s2 != 0 {
        return Err(Error::Config(format!(
            "pixel shuffle by {scale} needs channels divisible by {s2}, got {}",
            x.channels()
        )));
    }
    let (h, w) = (x.height(), x.width());
    let c_out = x.channels() / s2;
    let (oh, ow) = (h * scale, w * scale);
    let mut out = Tensor::zeros(c_out, oh, ow);
    let dst = out.data_mut();
    for c in 0..c_out {
        for dy in 0..scale {
            for dx in 0..scale {
                let src = x.plane(c * s2 + dy * scale + dx);
                for y in 0..h {
                    let row = (c * oh + y * scale + dy) * ow;
                    for xx in 0..w {
                        dst[row + xx * scale + dx] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, scale: usize) -> Result<Tensor> {
    if scale == 0 || x.height() % scale != 0 || x.width() % scale != 0 {
        return Err(Error::Config(format!(
            "pixel unshuffle by {scale} needs spatial dims divisible by it, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    let s2 = scale * scale;
    let (oh, ow) = (x.height(), x.width());
    let (h, w) = (oh / scale, ow / scale);
    let mut out = Tensor::zeros(x.channels() * s2, h, w);
    for c in 0..x.channels() {
        for dy in 0..scale {
            for dx in 0..scale {
                let dst = out.plane_mut(c * s2 + dy * scale + dx);
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] = x.get(c, y * scale + dy, xx * scale + dx);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(first_index, weights)` resampling `n_in` samples
/// to `n_out`. Indices outside the input are clamped to the edge.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let factor = n_out as f64 / n_in as f64;
    // Downscaling stretches the kernel to act as a low-pass filter.
    let stretch = factor.min(1.0);
    let support = 2.0 / stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) / factor - 0.5;
            let lo = (center - support).ceil() as isize;
            let hi = (center + support).floor() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| {
                    let w = cubic_kernel((j as f64 - center) * stretch);
                    (j.clamp(0, n_in as isize - 1) as usize, w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = taps.iter().map(|&(_, w)| w).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling of every channel to `out_h x out_w`.
///
/// Output values are not clamped; cubic overshoot near edges is preserved.
pub fn resize_bicubic(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("bicubic target size must be positive".into()));
    }
    let (c, h, w) = img.shape();
    let row_taps = resample_taps(h, out_h);
    let col_taps = resample_taps(w, out_w);
    let mut tmp = Tensor::zeros(c, h, out_w);
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = tmp.plane_mut(ch);
        for y in 0..h {
            for (x, taps) in col_taps.iter().enumerate() {
                dst[y * out_w + x] = taps.iter().map(|&(j, wt)| wt * src[y * w + j]).sum();
            }
        }
    }
    let mut out = Tensor::zeros(c, out_h, out_w);
    for ch in 0..c {
        let src = tmp.plane(ch);
        let dst = out.plane_mut(ch);
        for (y, taps) in row_taps.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] = taps.iter().map(|&(j, wt)| wt * src[j * out_w + x]).sum();
            }
        }
    }
    Ok(out)
}

/// Bicubic resize by a positive factor; output dims are rounded.
pub fn bicubic_resize(img: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!("resize factor must be positive, got {factor}")));
    }
    let out_h = (img.height() as f64 * factor).round() as usize;
    let out_w = (img.width() as f64 * factor).round() as usize;
    resize_bicubic(img, out_h, out_w)
}
