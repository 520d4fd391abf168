//! Minimal layer library with explicit backward passes.
//!
//! Every layer keeps its parameters in plain `Vec<f64>` buffers. A gradient
//! has the same type as the layer it belongs to (see [`Parameterized`]), so an
//! optimizer only ever walks matching lists of slices.

mod adam;
mod conv;
mod ops;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use ops::{
    leaky_relu, leaky_relu_backward, pixel_shuffle2, pixel_shuffle2_backward, upsample_nearest2,
    upsample_nearest2_backward, LEAKY_SLOPE,
};

use crate::error::{Error, Result};

/// Anything that owns trainable parameter buffers.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape(format!("expected {n} parameters, got {}", flat.len())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Same structure with every parameter set to zero.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}
