//! Conditional feature modulation: per-layer tradeoff values mapped through
//! small two-layer networks to positive channel scales that multiply the
//! decoder's intermediate features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{DecoderCache, DecoderParams};
use crate::error::{Error, Result};
use crate::nn::{Parameterized, LEAKY_SLOPE};
use crate::tensor::{ImageTensor, QuantizedLatent, Tensor3};

pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e4;

/// `ln(e - 1)`, the pre-activation whose softplus is 1.
pub const SOFTPLUS_ONE: f64 = 0.541_324_854_612_918_1;

/// Numerically stable `ln(1 + e^x)`, floored at the smallest normal `f64`
/// so it stays strictly positive where `e^x` underflows.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p().max(f64::MIN_POSITIVE)
    }
}

#[inline]
fn softplus_grad(x: f64) -> f64 {
    crate::codec::sigmoid(x)
}

/// Clamps a tradeoff into `[LAMBDA_MIN, LAMBDA_MAX]`; reports whether it moved.
pub fn clamp_lambda(lambda: f64) -> (f64, bool) {
    let c = if lambda.is_nan() {
        LAMBDA_MIN
    } else {
        lambda.clamp(LAMBDA_MIN, LAMBDA_MAX)
    };
    (c, c != lambda)
}

/// Per-layer tradeoffs `lambda^1..lambda^K`.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffVector(Vec<f64>);

impl TradeoffVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("tradeoff vector needs at least one layer"));
        }
        if let Some(v) = values.iter().find(|v| !(LAMBDA_MIN..=LAMBDA_MAX).contains(*v)) {
            return Err(Error::invalid(format!(
                "tradeoff {v} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]"
            )));
        }
        Ok(Self(values))
    }

    /// The same tradeoff on every layer.
    pub fn uniform(lambda: f64, k: usize) -> Result<Self> {
        Self::new(vec![lambda; k])
    }

    /// Clamps each entry into range (NaN goes to the lower bound).
    pub fn clamped(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| clamp_lambda(v).0).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Channel scales `s^k`, all strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVector(pub Vec<f64>);

/// Modulator `m^k`: `1 -> hidden -> N^k` with a leaky rectifier in between,
/// fed with `ln lambda^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulatorLayer {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `(N^k, hidden)` row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct LayerTrace {
    u: f64,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pre: Vec<f64>,
    clamped: bool,
    lambda: f64,
}

impl ModulatorLayer {
    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    pub fn channels(&self) -> usize {
        self.b2.len()
    }

    fn trace(&self, lambda: f64) -> LayerTrace {
        let (lam, clamped) = clamp_lambda(lambda);
        if clamped {
            log::warn!("tradeoff {lambda} clamped to {lam}");
        }
        let u = lam.ln();
        let hidden_pre: Vec<f64> = self.w1.iter().zip(&self.b1).map(|(w, b)| w * u + b).collect();
        let hidden: Vec<f64> = hidden_pre
            .iter()
            .map(|&v| if v < 0.0 { v * LEAKY_SLOPE } else { v })
            .collect();
        let h = self.hidden();
        let pre = (0..self.channels())
            .map(|i| {
                let row = &self.w2[i * h..(i + 1) * h];
                self.b2[i] + row.iter().zip(&hidden).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect();
        LayerTrace {
            u,
            hidden_pre,
            hidden,
            pre,
            clamped,
            lambda: lam,
        }
    }

    /// Pre-softplus network output `m^k(ln lambda)`.
    pub fn network_output(&self, lambda: f64) -> Vec<f64> {
        self.trace(lambda).pre
    }

    /// Gradients of `sum_i ds[i] * s[i]` w.r.t. this layer and w.r.t. lambda.
    fn backward(&self, t: &LayerTrace, ds: &[f64], grad: Option<&mut ModulatorLayer>) -> f64 {
        let h = self.hidden();
        let dpre: Vec<f64> = ds.iter().zip(&t.pre).map(|(d, &p)| d * softplus_grad(p)).collect();
        let mut dhidden = vec![0.0; h];
        for (i, dp) in dpre.iter().enumerate() {
            let row = &self.w2[i * h..(i + 1) * h];
            for (dh, w) in dhidden.iter_mut().zip(row) {
                *dh += dp * w;
            }
        }
        let dhidden_pre: Vec<f64> = dhidden
            .iter()
            .zip(&t.hidden_pre)
            .map(|(d, &p)| if p < 0.0 { d * LEAKY_SLOPE } else { *d })
            .collect();
        if let Some(g) = grad {
            for (i, dp) in dpre.iter().enumerate() {
                g.b2[i] += dp;
                for j in 0..h {
                    g.w2[i * h + j] += dp * t.hidden[j];
                }
            }
            for j in 0..h {
                g.w1[j] += dhidden_pre[j] * t.u;
                g.b1[j] += dhidden_pre[j];
            }
        }
        if t.clamped {
            return 0.0;
        }
        let du: f64 = dhidden_pre.iter().zip(&self.w1).map(|(d, w)| d * w).sum();
        du / t.lambda
    }
}

/// All modulators `Psi = {Psi^k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulatorParams {
    pub layers: Vec<ModulatorLayer>,
}

impl ModulatorParams {
    /// Random first layer; zero second-layer weights with biases at
    /// [`SOFTPLUS_ONE`], so training starts from (numerically) unit scales.
    pub fn new(channels: &[usize], hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = channels
            .iter()
            .map(|&n| ModulatorLayer {
                w1: (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
                b1: (0..hidden).map(|_| rng.random_range(2.0..6.0)).collect(),
                w2: vec![0.0; n * hidden],
                b2: vec![SOFTPLUS_ONE; n],
            })
            .collect();
        Self { layers }
    }

    /// Every pre-softplus output equals `ln(e - 1)` regardless of lambda.
    pub fn identity(channels: &[usize], hidden: usize) -> Self {
        let layers = channels
            .iter()
            .map(|&n| ModulatorLayer {
                w1: vec![0.0; hidden],
                b1: vec![0.0; hidden],
                w2: vec![0.0; n * hidden],
                b2: vec![SOFTPLUS_ONE; n],
            })
            .collect();
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.channels()).collect()
    }

    pub fn all_scales(&self, lam: &TradeoffVector) -> Result<Vec<Vec<f64>>> {
        if lam.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} tradeoffs for {} modulated layers",
                lam.len(),
                self.layers.len()
            )));
        }
        Ok(self
            .layers
            .iter()
            .zip(lam.values())
            .map(|(l, &v)| scale_factors(v, l).0)
            .collect())
    }
}

impl Parameterized for ModulatorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [&l.w1[..], &l.b1[..], &l.w2[..], &l.b2[..]])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w1[..], &mut l.b1[..], &mut l.w2[..], &mut l.b2[..]])
            .collect()
    }
}

/// `s = softplus(m(ln lambda))`. Out-of-range tradeoffs are clamped with a warning.
pub fn scale_factors(lambda_k: f64, psi_k: &ModulatorLayer) -> ScaleVector {
    ScaleVector(psi_k.network_output(lambda_k).into_iter().map(softplus).collect())
}

/// `Y'[i] = s[i] * Y[i]`.
pub fn modulate(y: &Tensor3, s: &ScaleVector) -> Result<Tensor3> {
    if y.channels != s.0.len() {
        return Err(Error::shape(format!(
            "{} scales for a {}-channel feature map",
            s.0.len(),
            y.channels
        )));
    }
    let mut out = y.clone();
    let n = out.plane_len();
    for (c, &sc) in s.0.iter().enumerate() {
        for v in &mut out.data[c * n..(c + 1) * n] {
            *v *= sc;
        }
    }
    Ok(out)
}

fn check_k(theta: &DecoderParams, psi: &ModulatorParams, lam: &TradeoffVector) -> Result<()> {
    if theta.num_blocks() != lam.len() || psi.num_layers() != lam.len() {
        return Err(Error::shape(format!(
            "decoder has {} blocks, modulators {}, tradeoffs {}",
            theta.num_blocks(),
            psi.num_layers(),
            lam.len()
        )));
    }
    if theta.modulated_channels() != psi.channels() {
        return Err(Error::shape("modulator widths do not match decoder channels"));
    }
    Ok(())
}

/// `g_theta(z, lambda)`: decoding blocks with modulation after each.
pub fn conditional_decode(
    z: &QuantizedLatent,
    theta: &DecoderParams,
    psi: &ModulatorParams,
    lam: &TradeoffVector,
) -> Result<ImageTensor> {
    conditional_decode_real(&z.to_tensor(), theta, psi, lam)
}

/// [`conditional_decode`] for a real-valued (e.g. noisy) latent.
pub fn conditional_decode_real(
    z: &Tensor3,
    theta: &DecoderParams,
    psi: &ModulatorParams,
    lam: &TradeoffVector,
) -> Result<ImageTensor> {
    check_k(theta, psi, lam)?;
    let scales = psi.all_scales(lam)?;
    theta.decode_with_scales(z, Some(&scales))
}

/// Forward state of [`conditional_forward`].
pub struct ConditionalCache {
    decoder: DecoderCache,
    layers: Vec<LayerTrace>,
}

pub struct ConditionalGrads {
    pub theta: Option<DecoderParams>,
    pub psi: Option<ModulatorParams>,
    /// `d loss / d lambda^k`.
    pub lambda: Vec<f64>,
}

pub fn conditional_forward(
    z: &Tensor3,
    theta: &DecoderParams,
    psi: &ModulatorParams,
    lam: &TradeoffVector,
) -> Result<(ImageTensor, ConditionalCache)> {
    check_k(theta, psi, lam)?;
    let layers: Vec<LayerTrace> = psi.layers.iter().zip(lam.values()).map(|(l, &v)| l.trace(v)).collect();
    let scales: Vec<Vec<f64>> = layers.iter().map(|t| t.pre.iter().map(|&p| softplus(p)).collect()).collect();
    let (out, decoder) = theta.forward_cached(z, Some(&scales))?;
    Ok((out, ConditionalCache { decoder, layers }))
}

/// Backward from `d loss / d output`. The tradeoff gradient is always returned.
pub fn conditional_backward(
    theta: &DecoderParams,
    psi: &ModulatorParams,
    cache: &ConditionalCache,
    grad_out: &Tensor3,
    want_theta: bool,
    want_psi: bool,
) -> ConditionalGrads {
    let dg = theta.backward(&cache.decoder, grad_out, want_theta, false);
    let mut gpsi = want_psi.then(|| psi.zeros_like());
    let lambda = psi
        .layers
        .iter()
        .enumerate()
        .map(|(k, layer)| {
            let g = gpsi.as_mut().map(|p| &mut p.layers[k]);
            layer.backward(&cache.layers[k], &dg.scales[k], g)
        })
        .collect();
    ConditionalGrads {
        theta: dg.params,
        psi: gpsi,
        lambda,
    }
}
