//! Base codec: analysis/synthesis networks, quantizer, factorized entropy
//! model and the rate-distortion objective.

mod entropy_model;
mod network;
mod train;

pub(crate) use entropy_model::sigmoid;
pub use entropy_model::{estimate_rate_bits, EntropyModel, PMF_FLOOR};
pub use network::{
    CodecDims, DecoderCache, DecoderGrads, DecoderParams, EncoderCache, EncoderParams, DOWNSAMPLE,
    NUM_BLOCKS,
};
pub use train::{crop_loss_and_grad, evaluate_rd, fine_tune_base, train_base, RdEval, TrainConfig, TrainReport, DEFAULT_DISTORTION_SCALE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LatentTensor, QuantizedLatent, Tensor3};

/// Original `(height, width)` of an image before padding.
pub type OriginalDims = (usize, usize);

/// Pads with edge replication to the smallest multiples of `factor`.
pub fn pad_to_multiple(x: &ImageTensor, factor: usize) -> (ImageTensor, OriginalDims) {
    let factor = factor.max(1);
    let (h, w) = (x.height(), x.width());
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    (pad_to(x, ph, pw), (h, w))
}

/// Edge-replicating pad to at least `(h, w)`.
pub(crate) fn pad_to(x: &ImageTensor, h: usize, w: usize) -> ImageTensor {
    let (sh, sw) = (x.height(), x.width());
    if sh >= h && sw >= w {
        return x.clone();
    }
    let (h, w) = (h.max(sh), w.max(sw));
    let src = x.as_tensor();
    let mut out = Tensor3::zeros(3, h, w);
    for c in 0..3 {
        for y in 0..h {
            let sy = y.min(sh - 1);
            for xx in 0..w {
                *out.at_mut(c, y, xx) = src.at(c, sy, xx.min(sw - 1));
            }
        }
    }
    ImageTensor::from_tensor(out).expect("padding preserves range")
}

/// Crops the top-left `dims` window (undoes [`pad_to_multiple`]).
pub fn crop_to(x: &ImageTensor, dims: OriginalDims) -> ImageTensor {
    if (x.height(), x.width()) == dims {
        return x.clone();
    }
    x.crop(0, 0, dims.0, dims.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `Uniform(-1/2, 1/2)` noise, the training proxy.
    Noise { seed: u64 },
    /// Round half away from zero.
    Round,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Quantized {
    Hard(QuantizedLatent),
    Soft(LatentTensor),
}

pub fn quantize(y: &LatentTensor, mode: QuantMode) -> Quantized {
    match mode {
        QuantMode::Round => Quantized::Hard(quantize_round(y)),
        QuantMode::Noise { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Quantized::Soft(add_uniform_noise(y, &mut rng))
        }
    }
}

/// `f64::round` rounds half away from zero, so the result is platform independent.
pub fn quantize_round(y: &LatentTensor) -> QuantizedLatent {
    QuantizedLatent {
        channels: y.channels,
        height: y.height,
        width: y.width,
        values: y
            .data
            .iter()
            .map(|v| v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect(),
    }
}

pub fn add_uniform_noise<R: Rng>(y: &LatentTensor, rng: &mut R) -> LatentTensor {
    let mut out = y.clone();
    for v in &mut out.data {
        *v += rng.random::<f64>() - 0.5;
    }
    out
}

pub fn mse(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    let (a, b) = (x.as_tensor(), x_hat.as_tensor());
    if !a.same_shape(b) {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `lambda * MSE(x, x_hat) + rate_bits / num_pixels`.
pub fn rd_loss(
    x: &ImageTensor,
    x_hat: &ImageTensor,
    rate_bits: f64,
    lambda: f64,
    num_pixels: usize,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if num_pixels == 0 {
        return Err(Error::invalid("num_pixels must be positive"));
    }
    Ok(lambda * mse(x, x_hat)? + rate_bits / num_pixels as f64)
}

/// Encoder, plain decoder and entropy model trained for one tradeoff.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    pub dims: CodecDims,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub entropy: EntropyModel,
}

impl BaseModel {
    pub fn init(dims: CodecDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dims,
            encoder: EncoderParams::new(&dims, &mut rng),
            decoder: DecoderParams::new(&dims, &mut rng),
            entropy: EntropyModel::new(dims.latent_channels, 2.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameterized;

    #[test]
    fn padding_dims() {
        let img = |h, w| ImageTensor::filled(h, w, [0.2, 0.4, 0.6]).unwrap();
        let (p, d) = pad_to_multiple(&img(512, 512), 16);
        assert_eq!((p.height(), p.width(), d), (512, 512, (512, 512)));
        let (p, d) = pad_to_multiple(&img(500, 300), 16);
        assert_eq!((p.height(), p.width(), d), (512, 304, (500, 300)));
        let (p, _) = pad_to_multiple(&img(1, 1), 16);
        assert_eq!((p.height(), p.width()), (16, 16));
    }

    #[test]
    fn padding_replicates_edges() {
        let x = ImageTensor::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let (p, dims) = pad_to_multiple(&x, 4);
        assert_eq!(p.as_tensor().at(0, 3, 3), 0.2);
        assert_eq!(p.as_tensor().at(2, 2, 0), 0.5);
        assert_eq!(crop_to(&p, dims), x);
    }

    #[test]
    fn rounding_rule() {
        let y = Tensor3::from_vec(1, 1, 6, vec![2.4, -2.5, 2.5, -0.4, 7.0, -3.0]).unwrap();
        assert_eq!(quantize_round(&y).values, vec![2, -3, 3, 0, 7, -3]);
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let y = Tensor3::from_vec(1, 4, 4, (0..16).map(|i| i as f64 * 0.3 - 2.0).collect()).unwrap();
        let a = quantize(&y, QuantMode::Noise { seed: 9 });
        let b = quantize(&y, QuantMode::Noise { seed: 9 });
        assert_eq!(a, b);
        let Quantized::Soft(n) = a else { panic!("noise mode returns reals") };
        assert!(n.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() <= 0.5));
        assert!(n.data.iter().zip(&y.data).any(|(p, q)| p != q));
    }

    #[test]
    fn rd_loss_examples() {
        let x = ImageTensor::filled(2, 2, [0.0; 3]).unwrap();
        assert_eq!(rd_loss(&x, &x, 0.0, 3.0, 4).unwrap(), 0.0);
        let xh = ImageTensor::filled(2, 2, [0.1; 3]).unwrap();
        let l = rd_loss(&x, &xh, 4.0, 100.0, 4).unwrap();
        assert!((l - 2.0).abs() < 1e-12);
        let l2 = rd_loss(&x, &xh, 4.0, 101.0, 4).unwrap();
        assert!(l2 > l);
        assert!(rd_loss(&x, &xh, 4.0, 0.0, 4).is_err());
        let other = ImageTensor::filled(2, 3, [0.1; 3]).unwrap();
        assert!(rd_loss(&x, &other, 0.0, 1.0, 4).is_err());
    }

    #[test]
    fn latent_shape_and_null_case() {
        let dims = CodecDims::default();
        let mut model = BaseModel::init(dims, 3);
        let x = ImageTensor::filled(64, 64, [0.3, 0.5, 0.7]).unwrap();
        let y = model.encoder.encode_latent(&x).unwrap();
        assert_eq!(y.shape(), (32, 4, 4));
        assert_eq!(y, model.encoder.encode_latent(&x).unwrap());
        model.encoder.fill(0.0);
        assert!(model.encoder.encode_latent(&x).unwrap().data.iter().all(|&v| v == 0.0));
        let bad = ImageTensor::filled(40, 64, [0.3; 3]).unwrap();
        assert!(model.encoder.encode_latent(&bad).is_err());
    }

    #[test]
    fn decode_restores_shape() {
        let dims = CodecDims {
            hidden_channels: 8,
            latent_channels: 4,
            modulator_hidden: 4,
        };
        let model = BaseModel::init(dims, 5);
        let x = ImageTensor::filled(48, 32, [0.3, 0.5, 0.7]).unwrap();
        let y = model.encoder.encode_latent(&x).unwrap();
        assert_eq!(y.shape(), (4, 3, 2));
        let out = model.decoder.decode(&quantize_round(&y).to_tensor()).unwrap();
        assert_eq!((out.height(), out.width()), (48, 32));
    }
}
