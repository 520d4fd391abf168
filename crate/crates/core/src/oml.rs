//! Encode-time adaptation of the decoder's tradeoff conditions.
//!
//! The latent is fixed; only the K per-layer tradeoffs move. Every candidate
//! is rounded to binary16 before it is evaluated, so the decoder, which only
//! sees the transmitted fp16 values, reproduces the encoder's best
//! reconstruction exactly.

use serde::{Deserialize, Serialize};

use crate::bitstream::fp16_round;
use crate::codec::{crop_to, pad_to, DecoderParams, OriginalDims, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::metrics::{distortion, distortion_with_grad, Metric};
use crate::modulation::{
    clamp_lambda, conditional_backward, conditional_decode_real, conditional_forward, ModulatorParams,
    TradeoffVector, LAMBDA_MAX, LAMBDA_MIN,
};
use crate::tensor::{ImageTensor, QuantizedLatent, Tensor3};

pub const DEFAULT_GAMMA_GRID: [f64; 6] = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Autodiff,
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OmlConfig {
    pub iterations: usize,
    pub gamma_grid: Vec<f64>,
    pub metric: Metric,
    pub gradient_mode: GradientMode,
    /// Central-difference step, relative to the coordinate.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for OmlConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            gamma_grid: DEFAULT_GAMMA_GRID.to_vec(),
            metric: Metric::Mse,
            gradient_mode: GradientMode::Autodiff,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

impl OmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() {
            return Err(Error::invalid("gamma grid is empty"));
        }
        if self.gamma_grid.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::invalid("gamma grid entries must be positive and finite"));
        }
        if self.gamma_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("gamma grid must be strictly increasing"));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(Error::invalid("fd_step must be positive"));
        }
        Ok(())
    }
}

/// One evaluated candidate. `iteration` 0 is the initial point; `gamma` is
/// `None` there.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OmlTraceEntry {
    pub iteration: usize,
    pub gamma: Option<f64>,
    pub lambdas: Vec<f64>,
    pub distortion: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adaptation {
    /// fp16-representable values.
    pub best: Vec<f64>,
    pub best_distortion: f64,
    pub initial_distortion: f64,
    pub trace: Vec<OmlTraceEntry>,
}

#[derive(Clone, Debug)]
pub struct OmlResult {
    pub best: TradeoffVector,
    pub best_reconstruction: ImageTensor,
    pub best_distortion: f64,
    pub initial_distortion: f64,
    pub trace: Vec<OmlTraceEntry>,
}

/// A distortion as a function of the tradeoff vector.
pub trait LambdaObjective {
    fn evaluate(&mut self, lam: &[f64]) -> Result<f64>;

    /// Analytic gradient, if the objective has one.
    fn gradient(&mut self, _lam: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

/// Plain closures as an objective: a value function and an optional gradient.
pub struct FnObjective<F, G = fn(&[f64]) -> Vec<f64>> {
    pub value: F,
    pub grad: Option<G>,
}

impl<F: FnMut(&[f64]) -> f64> FnObjective<F> {
    pub fn new(value: F) -> Self {
        Self { value, grad: None }
    }
}

impl<F: FnMut(&[f64]) -> f64, G: FnMut(&[f64]) -> Vec<f64>> FnObjective<F, G> {
    pub fn with_gradient(value: F, grad: G) -> Self {
        Self {
            value,
            grad: Some(grad),
        }
    }
}

impl<F: FnMut(&[f64]) -> f64, G: FnMut(&[f64]) -> Vec<f64>> LambdaObjective for FnObjective<F, G> {
    fn evaluate(&mut self, lam: &[f64]) -> Result<f64> {
        Ok((self.value)(lam))
    }

    fn gradient(&mut self, lam: &[f64]) -> Option<Result<Vec<f64>>> {
        self.grad.as_mut().map(|g| Ok(g(lam)))
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Gradient of `objective` at `lam`. Finite differences are central with a
/// relative step, one-sided at the clamp bounds.
pub fn grad_lambda(
    objective: &mut dyn LambdaObjective,
    lam: &[f64],
    mode: GradientMode,
    fd_step: f64,
) -> Result<Vec<f64>> {
    let g = match mode {
        GradientMode::Autodiff => objective
            .gradient(lam)
            .ok_or_else(|| Error::invalid("objective has no analytic gradient"))??,
        GradientMode::FiniteDifference => {
            let mut g = Vec::with_capacity(lam.len());
            let mut p = lam.to_vec();
            for k in 0..lam.len() {
                let h = fd_step * lam[k].abs().max(LAMBDA_MIN);
                let hi = (lam[k] + h).min(LAMBDA_MAX.max(lam[k]));
                let lo = (lam[k] - h).max(LAMBDA_MIN.min(lam[k]));
                p[k] = hi;
                let fp = finite(objective.evaluate(&p)?, "objective")?;
                p[k] = lo;
                let fm = finite(objective.evaluate(&p)?, "objective")?;
                p[k] = lam[k];
                g.push((fp - fm) / (hi - lo));
            }
            g
        }
    };
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tradeoff gradient".into()));
    }
    Ok(g)
}

fn candidate(point: &[f64], g: &[f64], gamma: f64) -> Vec<f64> {
    point
        .iter()
        .zip(g)
        .map(|(&l, &d)| fp16_round(clamp_lambda(l - gamma * d).0))
        .collect()
}

/// Step-size search on the first iteration over `cfg.gamma_grid`, then
/// fixed-step descent that halves the step on every non-improving candidate.
/// The linearization point is always the best candidate so far.
pub fn adapt(objective: &mut dyn LambdaObjective, lambda_init: &[f64], cfg: &OmlConfig) -> Result<Adaptation> {
    cfg.validate()?;
    if lambda_init.is_empty() {
        return Err(Error::invalid("empty tradeoff vector"));
    }
    let init: Vec<f64> = lambda_init.iter().map(|&l| fp16_round(l)).collect();
    let d0 = finite(objective.evaluate(&init)?, "initial distortion")?;
    let mut trace = vec![OmlTraceEntry {
        iteration: 0,
        gamma: None,
        lambdas: init.clone(),
        distortion: d0,
        accepted: true,
    }];
    let mut best = init;
    let mut best_d = d0;
    // Rejected or non-finite candidates score +inf.
    let score = |obj: &mut dyn LambdaObjective, lam: &[f64], best: &[f64], best_d: f64| -> Result<f64> {
        if lam == best {
            return Ok(best_d);
        }
        let d = obj.evaluate(lam)?;
        Ok(if d.is_finite() { d } else { f64::INFINITY })
    };

    if cfg.iterations == 0 {
        return Ok(Adaptation {
            best,
            best_distortion: best_d,
            initial_distortion: d0,
            trace,
        });
    }

    let mut g = grad_lambda(objective, &best, cfg.gradient_mode, cfg.fd_step)?;
    let mut chosen: Option<(usize, f64)> = None;
    for &gamma in &cfg.gamma_grid {
        let c = candidate(&best, &g, gamma);
        let d = score(objective, &c, &best, best_d)?;
        trace.push(OmlTraceEntry {
            iteration: 1,
            gamma: Some(gamma),
            lambdas: c,
            distortion: d,
            accepted: false,
        });
        if d.is_finite() && chosen.is_none_or(|(_, bd)| d < bd) {
            chosen = Some((trace.len() - 1, d));
        }
    }
    let mut gamma_star = match chosen {
        Some((i, d)) => {
            let gamma = trace[i].gamma.unwrap();
            if d < best_d {
                trace[i].accepted = true;
                best = trace[i].lambdas.clone();
                best_d = d;
                g = grad_lambda(objective, &best, cfg.gradient_mode, cfg.fd_step)?;
                gamma
            } else {
                gamma / 2.0
            }
        }
        None => cfg.gamma_grid[0] / 2.0,
    };

    for iteration in 2..=cfg.iterations {
        let c = candidate(&best, &g, gamma_star);
        let d = score(objective, &c, &best, best_d)?;
        let accepted = d < best_d;
        trace.push(OmlTraceEntry {
            iteration,
            gamma: Some(gamma_star),
            lambdas: c.clone(),
            distortion: d,
            accepted,
        });
        if accepted {
            best = c;
            best_d = d;
            if iteration < cfg.iterations {
                g = grad_lambda(objective, &best, cfg.gradient_mode, cfg.fd_step)?;
            }
        } else {
            gamma_star /= 2.0;
        }
    }
    Ok(Adaptation {
        best,
        best_distortion: best_d,
        initial_distortion: d0,
        trace,
    })
}

/// Distortion of the conditional decode of a fixed latent against one patch.
pub struct PatchObjective<'a> {
    z: Tensor3,
    theta: &'a DecoderParams,
    psi: &'a ModulatorParams,
    metric: Metric,
    target: ImageTensor,
    eval_dims: OriginalDims,
}

impl<'a> PatchObjective<'a> {
    /// `x` is the unpadded patch; `z` the latent of its padded version.
    /// Distortion is measured over the patch itself, except that MS-SSIM on
    /// patches smaller than its 16-pixel minimum uses the padded area.
    pub fn new(
        x: &ImageTensor,
        z: &QuantizedLatent,
        theta: &'a DecoderParams,
        psi: &'a ModulatorParams,
        metric: Metric,
    ) -> Result<Self> {
        let (ph, pw) = (z.height * DOWNSAMPLE, z.width * DOWNSAMPLE);
        let (h, w) = (x.height(), x.width());
        if h > ph || w > pw || h + DOWNSAMPLE <= ph || w + DOWNSAMPLE <= pw {
            return Err(Error::shape(format!(
                "patch {h}x{w} does not match a {}x{} latent",
                z.height, z.width
            )));
        }
        let (target, eval_dims) = if metric == Metric::Msssim && h.min(w) < 16 {
            (pad_to(x, ph, pw), (ph, pw))
        } else {
            (x.clone(), (h, w))
        };
        Ok(Self {
            z: z.to_tensor(),
            theta,
            psi,
            metric,
            target,
            eval_dims,
        })
    }

    /// Reconstruction at `lam`, cropped to the patch.
    pub fn reconstruct(&self, lam: &[f64]) -> Result<ImageTensor> {
        let lam = TradeoffVector::new(lam.to_vec())?;
        conditional_decode_real(&self.z, self.theta, self.psi, &lam)
    }
}

impl LambdaObjective for PatchObjective<'_> {
    fn evaluate(&mut self, lam: &[f64]) -> Result<f64> {
        let x_hat = crop_to(&self.reconstruct(lam)?, self.eval_dims);
        distortion(&self.target, &x_hat, self.metric)
    }

    fn gradient(&mut self, lam: &[f64]) -> Option<Result<Vec<f64>>> {
        let run = || -> Result<Vec<f64>> {
            let lam = TradeoffVector::new(lam.to_vec())?;
            let (out, cache) = conditional_forward(&self.z, self.theta, self.psi, &lam)?;
            let (_, g) = distortion_with_grad(&self.target, &crop_to(&out, self.eval_dims), self.metric)?;
            let mut full = Tensor3::zeros(3, out.height(), out.width());
            for c in 0..3 {
                for y in 0..g.height {
                    for x in 0..g.width {
                        *full.at_mut(c, y, x) = g.at(c, y, x);
                    }
                }
            }
            Ok(conditional_backward(self.theta, self.psi, &cache, &full, false, false).lambda)
        };
        Some(run())
    }
}

/// Adapts the tradeoffs of one patch, starting from `lambda_t` on every layer.
pub fn oml_adapt_patch(
    x: &ImageTensor,
    z: &QuantizedLatent,
    theta: &DecoderParams,
    psi: &ModulatorParams,
    lambda_t: f64,
    cfg: &OmlConfig,
) -> Result<OmlResult> {
    if !(lambda_t.is_finite() && lambda_t > 0.0) {
        return Err(Error::invalid(format!("lambda_t must be positive, got {lambda_t}")));
    }
    let k = theta.num_blocks();
    let start = vec![fp16_round(clamp_lambda(lambda_t).0); k];
    let mut obj = PatchObjective::new(x, z, theta, psi, cfg.metric)?;
    let a = adapt(&mut obj, &start, cfg)?;
    let best_reconstruction = crop_to(&obj.reconstruct(&a.best)?, (x.height(), x.width()));
    Ok(OmlResult {
        best: TradeoffVector::new(a.best)?,
        best_reconstruction,
        best_distortion: a.best_distortion,
        initial_distortion: a.initial_distortion,
        trace: a.trace,
    })
}
