use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    add_uniform_noise, crop_to, estimate_rate_bits, mse, pad_to_multiple, quantize_round, BaseModel, CodecDims,
    DOWNSAMPLE,
};
use crate::data::{random_crop, split_holdout};
use crate::error::{Error, Result};
use crate::nn::{Adam, Parameterized};
use crate::tensor::{ImageTensor, Tensor3};

/// Multiplier applied to the tradeoff before it weights the `[0, 1]`-range
/// MSE, so that tradeoffs are on the usual 8-bit scale.
pub const DEFAULT_DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub distortion_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            crop_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            holdout_fraction: 0.1,
            distortion_scale: DEFAULT_DISTORTION_SCALE,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps and batch_size must be at least 1"));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::invalid(format!(
                "crop_size {} must be a positive multiple of {DOWNSAMPLE}",
                self.crop_size
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.distortion_scale > 0.0) {
            return Err(Error::invalid("learning_rate and distortion_scale must be positive"));
        }
        Ok(())
    }
}

/// Operational (hard-quantized) rate-distortion figures on a set of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdEval {
    pub loss: f64,
    pub mse: f64,
    pub bpp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_holdout: RdEval,
    pub final_holdout: RdEval,
    /// Mean minibatch loss per step.
    pub losses: Vec<f64>,
}

/// Round-mode evaluation through the plain decoder, averaged over images.
pub fn evaluate_rd(model: &BaseModel, images: &[ImageTensor], lambda: f64, distortion_scale: f64) -> Result<RdEval> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = RdEval::default();
    for img in images {
        let (padded, dims) = pad_to_multiple(img, DOWNSAMPLE);
        let z = quantize_round(&model.encoder.encode_latent(&padded)?);
        let bits = estimate_rate_bits(&z, &model.entropy)?;
        let recon = crop_to(&model.decoder.decode(&z.to_tensor())?, dims);
        let m = mse(img, &recon)?;
        let bpp = bits / img.num_pixels() as f64;
        acc.mse += m;
        acc.bpp += bpp;
        acc.loss += lambda * distortion_scale * m + bpp;
    }
    let n = images.len() as f64;
    Ok(RdEval {
        loss: acc.loss / n,
        mse: acc.mse / n,
        bpp: acc.bpp / n,
    })
}

/// Gradient of one crop's noisy-quantization RD loss.
fn crop_gradient(
    model: &BaseModel,
    crop: &ImageTensor,
    lambda_eff: f64,
    rng: &mut ChaCha8Rng,
    grad: &mut BaseModel,
) -> Result<f64> {
    let (y, enc_cache) = model.encoder.forward_cached(crop)?;
    let y_tilde = add_uniform_noise(&y, rng);
    let (bits, dbits_dy, dbits_dlog) = model.entropy.rate_bits_with_grad(&y_tilde)?;
    let (x_hat, dec_cache) = model.decoder.forward_cached(&y_tilde, None)?;

    let npix = crop.num_pixels() as f64;
    let x = crop.as_tensor();
    let xh = x_hat.as_tensor();
    let n_el = x.data.len() as f64;
    let mut dout = Tensor3::zeros(3, x.height, x.width);
    let mut sq = 0.0;
    for ((d, a), b) in dout.data.iter_mut().zip(&xh.data).zip(&x.data) {
        let diff = a - b;
        sq += diff * diff;
        *d = lambda_eff * 2.0 * diff / n_el;
    }
    let loss = lambda_eff * sq / n_el + bits / npix;

    let dg = model.decoder.backward(&dec_cache, &dout, true, true);
    grad.decoder.add_scaled(&dg.params.expect("requested"), 1.0);
    let mut dlatent = dg.latent.expect("requested");
    for (g, r) in dlatent.data.iter_mut().zip(&dbits_dy.data) {
        *g += r / npix;
    }
    model.encoder.backward(&enc_cache, &dlatent, &mut grad.encoder);
    for (g, r) in grad.entropy.log_scales.iter_mut().zip(&dbits_dlog) {
        *g += r / npix;
    }
    Ok(loss)
}

/// Trains encoder, plain decoder and entropy model from a seeded
/// initialisation.
pub fn train_base(
    dataset: &[ImageTensor],
    lambda: f64,
    dims: CodecDims,
    cfg: &TrainConfig,
) -> Result<(BaseModel, TrainReport)> {
    fine_tune_base(BaseModel::init(dims, cfg.seed), dataset, lambda, cfg)
}

/// Continues training `model` at `lambda`.
pub fn fine_tune_base(
    mut model: BaseModel,
    dataset: &[ImageTensor],
    lambda: f64,
    cfg: &TrainConfig,
) -> Result<(BaseModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    cfg.validate()?;
    let (train, holdout) = split_holdout(dataset, cfg.holdout_fraction)?;
    let initial_holdout = evaluate_rd(&model, holdout, lambda, cfg.distortion_scale)?;
    let lambda_eff = lambda * cfg.distortion_scale;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba5e);
    let mut opt_enc = Adam::new(cfg.learning_rate);
    let mut opt_dec = Adam::new(cfg.learning_rate);
    let mut opt_ent = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grad = BaseModel {
            dims: model.dims,
            encoder: model.encoder.zeros_like(),
            decoder: model.decoder.zeros_like(),
            entropy: model.entropy.zeros_like(),
        };
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let idx = rand::Rng::random_range(&mut rng, 0..train.len());
            let crop = random_crop(&train[idx], cfg.crop_size, &mut rng);
            loss += crop_gradient(&model, &crop, lambda_eff, &mut rng, &mut grad)?;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss} at step {step}")));
        }
        for t in grad.encoder.tensors_mut().into_iter().chain(grad.decoder.tensors_mut()).chain(grad.entropy.tensors_mut()) {
            t.iter_mut().for_each(|g| *g *= inv);
        }
        if !(grad.encoder.all_finite() && grad.decoder.all_finite() && grad.entropy.all_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {step}")));
        }
        opt_enc.step(&mut model.encoder, &grad.encoder);
        opt_dec.step(&mut model.decoder, &grad.decoder);
        opt_ent.step(&mut model.entropy, &grad.entropy);
        losses.push(loss);
        if (step + 1) % 250 == 0 {
            log::debug!("train_base step {} loss {:.5}", step + 1, loss);
        }
    }

    let final_holdout = evaluate_rd(&model, holdout, lambda, cfg.distortion_scale)?;
    Ok((
        model,
        TrainReport {
            initial_holdout,
            final_holdout,
            losses,
        },
    ))
}

/// Total RD loss of one crop with fixed noise; exposed for gradient checks.
#[doc(hidden)]
pub fn crop_loss_and_grad(model: &BaseModel, crop: &ImageTensor, lambda_eff: f64, noise_seed: u64) -> Result<(f64, BaseModel)> {
    let mut grad = BaseModel {
        dims: model.dims,
        encoder: model.encoder.zeros_like(),
        decoder: model.decoder.zeros_like(),
        entropy: model.entropy.zeros_like(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let loss = crop_gradient(model, crop, lambda_eff, &mut rng, &mut grad)?;
    Ok((loss, grad))
}
