use rand::Rng;

use super::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// 2-D convolution with square kernel, zero padding and integer stride,
/// computed as an im2col matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out, in * k * k)` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Saved forward state needed by [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-uniform initialisation scaled for the leaky rectifier.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.channels
            )));
        }
        if x.height + 2 * self.padding < self.kernel || x.width + 2 * self.padding < self.kernel {
            return Err(Error::shape(format!(
                "{}x{} input smaller than {}x{} kernel",
                x.height, x.width, self.kernel, self.kernel
            )));
        }
        Ok(())
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * n];
        let (h, w) = (x.height as isize, x.width as isize);
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.in_channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * w as usize..];
                        let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor3 {
        let (c_in, h, w) = shape;
        let k = self.kernel;
        let n = oh * ow;
        let mut out = Tensor3::zeros(c_in, h, w);
        let (hi, wi) = (h as isize, w as isize);
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..c_in {
            let plane = out.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= hi {
                            continue;
                        }
                        let base = iy as usize * w;
                        let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                        for (ox, v) in src.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < wi {
                                plane[base + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, cols: &[f64], oh: usize, ow: usize) -> Tensor3 {
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        for (o, b) in self.bias.iter().enumerate() {
            out.plane_mut(o).fill(*b);
        }
        // SAFETY: slices are sized m*k, k*n and m*n with the given strides.
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                kk,
                n,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        self.check_input(x)?;
        let (oh, ow) = self.output_hw(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        Ok(self.apply(&cols, oh, ow))
    }

    pub fn forward_cached(&self, x: &Tensor3) -> Result<(Tensor3, ConvCache)> {
        self.check_input(x)?;
        let (oh, ow) = self.output_hw(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let y = self.apply(&cols, oh, ow);
        Ok((
            y,
            ConvCache {
                cols,
                in_shape: x.shape(),
                out_hw: (oh, ow),
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` (when given) and returns the
    /// input gradient (when `need_input` is set).
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &Tensor3,
        grad: Option<&mut Conv2d>,
        need_input: bool,
    ) -> Option<Tensor3> {
        let (oh, ow) = cache.out_hw;
        let n = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        debug_assert_eq!(grad_out.data.len(), self.out_channels * n);
        if let Some(g) = grad {
            for o in 0..self.out_channels {
                g.bias[o] += grad_out.plane(o).iter().sum::<f64>();
            }
            // dW += dY * cols^T
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    n,
                    kk,
                    1.0,
                    grad_out.data.as_ptr(),
                    n as isize,
                    1,
                    cache.cols.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    g.weight.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        }
        if !need_input {
            return None;
        }
        // dcols = W^T * dY
        let mut dcols = vec![0.0; kk * n];
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.out_channels,
                n,
                1.0,
                self.weight.as_ptr(),
                1,
                kk as isize,
                grad_out.data.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Some(self.col2im(&dcols, cache.in_shape, oh, ow))
    }
}

impl Parameterized for Conv2d {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}
