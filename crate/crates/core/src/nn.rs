//! Convolution layer and the parameter-visiting machinery shared by every
//! trainable component.
//!
//! Gradients are stored in a value of the same type as the module they belong
//! to (see [`Parameters::zeros_like`]), so a backward pass takes `&self` plus a
//! `&mut Self` accumulator and parameter layouts never have to be described
//! twice.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A module owning trainable `f64` buffers.
///
/// Implementations must visit buffers in the same order in `visit` and
/// `visit_mut`; checkpoints and the optimizer rely on that order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    /// `(name, length)` for every buffer in visiting order.
    fn layout(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.len())));
        out
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, p| out.extend_from_slice(p));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::Config(format!(
                "parameter vector has {} values, model expects {}",
                flat.len(),
                expected
            )));
        }
        let mut offset = 0;
        self.visit_mut("", &mut |_, p| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, p| p.iter_mut().for_each(|v| *v = value));
    }

    /// A copy with every parameter set to zero; used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Zero-padded, stride-1, "same" 2-D convolution with optional channel groups.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    groups: usize,
    /// Layout `(out, in / groups, kernel, kernel)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {kernel} must be odd for same-size padding"
            )));
        }
        if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Config(format!(
                "{in_channels} -> {out_channels} channels cannot be split into {groups} groups"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("convolution with zero channels".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            groups,
            weight: vec![0.0; out_channels * (in_channels / groups) * kernel * kernel],
            bias: vec![0.0; out_channels],
        })
    }

    /// Kaiming fan-in normal weights, zero biases.
    pub fn kaiming<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, groups)?;
        let fan_in = conv.group_in() * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        for w in conv.weight.iter_mut() {
            *w = normal.sample(rng);
        }
        Ok(conv)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    fn patch_len(&self) -> usize {
        self.group_in() * self.kernel * self.kernel
    }

    /// Weight index for `(out, in-within-group, ky, kx)`.
    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.group_in() + i) * self.kernel + ky) * self.kernel + kx
    }

    fn check_input(&self, x: &Tensor) {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "convolution expects {} input channels",
            self.in_channels
        );
    }

    /// Unrolls the receptive fields of one channel group into a
    /// `(patch_len, height * width)` matrix.
    fn im2col(&self, x: &Tensor, group: usize, cols: &mut [f64]) {
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        cols.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.group_in() {
            let plane = x.plane(group * self.group_in() + ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = sy as usize * w;
                        let sx0 = (x0 as isize + dx) as usize;
                        dst[y * w + x0..y * w + x1]
                            .copy_from_slice(&plane[src_row + sx0..src_row + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }

    /// Scatters a column-matrix gradient back onto the input channels of one group.
    fn col2im(&self, cols: &[f64], group: usize, grad_x: &mut Tensor) {
        let (h, w) = (grad_x.height(), grad_x.width());
        let hw = h * w;
        let k = self.kernel;
        let pad = (k / 2) as isize;
        for ci in 0..self.group_in() {
            let plane = grad_x.plane_mut(group * self.group_in() + ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_row = sy as usize * w;
                        let sx0 = (x0 as isize + dx) as usize;
                        for (d, s) in plane[dst_row + sx0..dst_row + sx0 + (x1 - x0)]
                            .iter_mut()
                            .zip(&src[y * w + x0..y * w + x1])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    fn direct_input(&self) -> bool {
        self.kernel == 1
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.check_input(x);
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let kl = self.patch_len();
        let go = self.group_out();
        let mut out = Tensor::zeros(self.out_channels, h, w);
        for (o, b) in self.bias.iter().enumerate() {
            out.plane_mut(o).iter_mut().for_each(|v| *v = *b);
        }
        let mut cols = if self.direct_input() {
            Vec::new()
        } else {
            vec![0.0; kl * hw]
        };
        for g in 0..self.groups {
            let b_ptr = if self.direct_input() {
                x.data()[g * self.group_in() * hw..].as_ptr()
            } else {
                self.im2col(x, g, &mut cols);
                cols.as_ptr()
            };
            let a = &self.weight[g * go * kl..(g + 1) * go * kl];
            let c = &mut out.data_mut()[g * go * hw..(g + 1) * go * hw];
            // SAFETY: all three operands are live, correctly sized row-major
            // buffers: a is go x kl, b is kl x hw, c is go x hw.
            unsafe {
                matrixmultiply::dgemm(
                    go,
                    kl,
                    hw,
                    1.0,
                    a.as_ptr(),
                    kl as isize,
                    1,
                    b_ptr,
                    hw as isize,
                    1,
                    1.0,
                    c.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to `x` when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grads: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        self.check_input(x);
        assert_eq!(grad_out.channels(), self.out_channels);
        let (h, w) = (x.height(), x.width());
        let hw = h * w;
        let kl = self.patch_len();
        let go = self.group_out();

        for o in 0..self.out_channels {
            grads.bias[o] += grad_out.plane(o).iter().sum::<f64>();
        }

        let mut grad_x = need_input_grad.then(|| x.zeros_like());
        let mut cols = vec![0.0; kl * hw];
        for g in 0..self.groups {
            let gy = &grad_out.data()[g * go * hw..(g + 1) * go * hw];
            let b_ptr = if self.direct_input() {
                x.data()[g * self.group_in() * hw..].as_ptr()
            } else {
                self.im2col(x, g, &mut cols);
                cols.as_ptr()
            };
            let dw = &mut grads.weight[g * go * kl..(g + 1) * go * kl];
            // SAFETY: dW (go x kl) += dY (go x hw) * cols^T, with cols viewed
            // through transposed strides.
            unsafe {
                matrixmultiply::dgemm(
                    go,
                    hw,
                    kl,
                    1.0,
                    gy.as_ptr(),
                    hw as isize,
                    1,
                    b_ptr,
                    1,
                    hw as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    kl as isize,
                    1,
                );
            }
            if let Some(gx) = grad_x.as_mut() {
                let a = &self.weight[g * go * kl..(g + 1) * go * kl];
                if self.direct_input() {
                    let dst = &mut gx.data_mut()[g * self.group_in() * hw..(g + 1) * self.group_in() * hw];
                    // SAFETY: dX_g (kl x hw) += W^T (kl x go) * dY (go x hw).
                    unsafe {
                        matrixmultiply::dgemm(
                            kl,
                            go,
                            hw,
                            1.0,
                            a.as_ptr(),
                            1,
                            kl as isize,
                            gy.as_ptr(),
                            hw as isize,
                            1,
                            1.0,
                            dst.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                } else {
                    let mut dcols = vec![0.0; kl * hw];
                    // SAFETY: dcols (kl x hw) = W^T (kl x go) * dY (go x hw).
                    unsafe {
                        matrixmultiply::dgemm(
                            kl,
                            go,
                            hw,
                            1.0,
                            a.as_ptr(),
                            1,
                            kl as isize,
                            gy.as_ptr(),
                            hw as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    self.col2im(&dcols, g, gx);
                }
            }
        }
        grad_x
    }
}

impl Parameters for Conv2d {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Trainable parameter count of a convolution with the given shape.
pub fn conv_param_count(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> usize {
    out_channels * (in_channels / groups) * kernel * kernel + out_channels
}
