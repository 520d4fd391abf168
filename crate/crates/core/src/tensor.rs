//! Dense channel-major feature maps and the image/latent types built on them.

use crate::error::{Error, Result};

/// A `(channels, height, width)` array of reals, row-major within each plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the window `[y0, y0 + h) x [x0, x0 + w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor3 {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        let mut out = Tensor3::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = (c * self.height + y0 + y) * self.width + x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}

/// An RGB image with every sample in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor3);

impl ImageTensor {
    /// Wraps `values` (channel-major, 3 planes) after checking the range invariant.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor3::from_vec(3, height, width, values)?)
    }

    pub fn from_tensor(t: Tensor3) -> Result<Self> {
        if t.channels != 3 {
            return Err(Error::shape(format!("image needs 3 channels, got {}", t.channels)));
        }
        if t.height == 0 || t.width == 0 {
            return Err(Error::shape("image dimensions must be at least 1x1"));
        }
        if let Some(v) = t.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    /// Clamps every value into `[0, 1]`; NaN maps to 0.
    pub fn from_tensor_clamped(mut t: Tensor3) -> Result<Self> {
        for v in &mut t.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::from_tensor(t)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut t = Tensor3::zeros(3, height, width);
        for (c, v) in rgb.iter().enumerate() {
            t.plane_mut(c).fill(*v);
        }
        Self::from_tensor(t)
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn num_pixels(&self) -> usize {
        self.0.height * self.0.width
    }

    pub fn as_tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> ImageTensor {
        ImageTensor(self.0.crop(y0, x0, h, w))
    }
}

/// Continuous encoder output.
pub type LatentTensor = Tensor3;

/// Hard-rounded latent; the entropy-coded payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<i32>,
}

impl QuantizedLatent {
    pub fn from_vec(channels: usize, height: usize, width: usize, values: Vec<i32>) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} symbols for a {channels}x{height}x{width} latent",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// The latent as reals, for feeding the decoder.
    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3 {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.values.iter().map(|&v| v as f64).collect(),
        }
    }
}
