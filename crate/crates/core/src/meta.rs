//! MAML over a grid of tradeoffs.
//!
//! The inner loop adapts only the modulators to one task; the outer loop
//! updates decoder and modulators on the post-adaptation loss summed over
//! tasks. Encoders and entropy models are frozen and only read.
//!
//! The loop itself works on a flat parameter vector through
//! [`MetaObjective`], which the codec and the scalar toy both implement.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    add_uniform_noise, crop_to, estimate_rate_bits, mse, pad_to_multiple, quantize_round, DecoderParams,
    EncoderParams, EntropyModel, RdEval, DEFAULT_DISTORTION_SCALE, DOWNSAMPLE,
};
use crate::data::{random_crop, split_holdout};
use crate::error::{Error, Result};
use crate::metrics::{distortion_with_grad, Metric};
use crate::model::CodecModel;
use crate::modulation::{conditional_backward, conditional_decode, conditional_forward, ModulatorParams, TradeoffVector};
use crate::nn::{Adam, Parameterized};
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaQuant {
    /// Hard rounding; the decoder sees what it will see at encode time.
    #[default]
    Round,
    Noise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner step size; 0 turns the objective into plain multi-task training.
    /// The RD loss weighs MSE by `lambda * distortion_scale`, so useful inner
    /// steps are small.
    pub alpha: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub outer_iterations: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub first_order: bool,
    pub optimizer: OuterOptimizer,
    pub quantization: MetaQuant,
    pub holdout_fraction: f64,
    pub distortion_scale: f64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-5,
            inner_steps: 1,
            outer_lr: 1e-4,
            outer_iterations: 1000,
            batch_size: 2,
            crop_size: 64,
            first_order: true,
            optimizer: OuterOptimizer::Adam,
            quantization: MetaQuant::Round,
            holdout_fraction: 0.1,
            distortion_scale: DEFAULT_DISTORTION_SCALE,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::invalid("alpha must be >= 0 and outer_lr > 0"));
        }
        if self.inner_steps == 0 || self.outer_iterations == 0 || self.batch_size == 0 {
            return Err(Error::invalid("inner_steps, outer_iterations and batch_size must be at least 1"));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::invalid(format!("crop_size must be a positive multiple of {DOWNSAMPLE}")));
        }
        if !(self.distortion_scale > 0.0) {
            return Err(Error::invalid("distortion_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Minibatch for the inner gradient.
    Inner,
    /// Minibatch for the post-adaptation loss.
    Outer,
}

/// A family of tasks over one flat parameter vector.
pub trait MetaObjective {
    type Task;

    /// Part of the parameter vector adapted by the inner loop.
    fn inner_range(&self) -> Range<usize>;

    fn loss_and_grad(&mut self, task: &Self::Task, split: Split, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Hessian-vector product of the inner loss; central differences of the
    /// gradient unless overridden.
    fn hvp(&mut self, task: &Self::Task, params: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vn == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let pn = params.iter().map(|x| x * x).sum::<f64>().sqrt();
        let eps = 6e-6 * (1.0 + pn) / vn;
        let shift = |s: f64| params.iter().zip(v).map(|(p, d)| p + s * d).collect::<Vec<_>>();
        let (_, gp) = self.loss_and_grad(task, Split::Inner, &shift(eps))?;
        let (_, gm) = self.loss_and_grad(task, Split::Inner, &shift(-eps))?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
    }
}

fn check_grad(g: &[f64], what: &str) -> Result<()> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} gradient, coordinate {i}"))),
        None => Ok(()),
    }
}

/// `steps` plain gradient steps on the inner loss, restricted to the inner range.
pub fn inner_adapt_flat<O: MetaObjective>(
    obj: &mut O,
    task: &O::Task,
    params: &[f64],
    alpha: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    Ok(inner_trajectory(obj, task, params, alpha, steps)?.pop().expect("non-empty"))
}

/// Iterates `p_0 .. p_steps`.
fn inner_trajectory<O: MetaObjective>(
    obj: &mut O,
    task: &O::Task,
    params: &[f64],
    alpha: f64,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let range = obj.inner_range();
    let mut traj = vec![params.to_vec()];
    for _ in 0..steps {
        let p = traj.last().unwrap();
        let mut next = p.clone();
        if alpha != 0.0 {
            let (_, g) = obj.loss_and_grad(task, Split::Inner, p)?;
            check_grad(&g, "inner")?;
            for i in range.clone() {
                next[i] -= alpha * g[i];
            }
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Post-adaptation loss of one task and its gradient with respect to the
/// pre-adaptation parameters. First-order mode drops second derivatives.
pub fn meta_gradient<O: MetaObjective>(
    obj: &mut O,
    task: &O::Task,
    params: &[f64],
    alpha: f64,
    steps: usize,
    first_order: bool,
) -> Result<(f64, Vec<f64>)> {
    let traj = inner_trajectory(obj, task, params, alpha, steps)?;
    let (loss, mut v) = obj.loss_and_grad(task, Split::Outer, traj.last().unwrap())?;
    check_grad(&v, "outer")?;
    if !first_order && alpha != 0.0 {
        // p_{t+1} = p_t - alpha P grad(p_t), so J_t^T v = v - alpha H(p_t) P v.
        let range = obj.inner_range();
        for p in traj[..steps].iter().rev() {
            let mut pv = vec![0.0; v.len()];
            pv[range.clone()].copy_from_slice(&v[range.clone()]);
            let hv = obj.hvp(task, p, &pv)?;
            for (a, b) in v.iter_mut().zip(&hv) {
                *a -= alpha * b;
            }
        }
        check_grad(&v, "meta")?;
    }
    Ok((loss, v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaReport {
    /// Mean post-adaptation loss per outer iteration.
    pub losses: Vec<f64>,
    pub initial_holdout: Vec<RdEval>,
    pub final_holdout: Vec<RdEval>,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 100;

/// Outer loop over a flat parameter vector. `tasks(i)` supplies the tasks of
/// outer iteration `i`; their meta-gradients are averaged.
pub fn meta_train_flat<O: MetaObjective>(
    obj: &mut O,
    params: &mut [f64],
    cfg: &MetaConfig,
    mut tasks: impl FnMut(usize) -> Result<Vec<O::Task>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.outer_lr);
    let mut losses = Vec::with_capacity(cfg.outer_iterations);
    let mut above = 0;
    for it in 0..cfg.outer_iterations {
        let batch = tasks(it)?;
        if batch.is_empty() {
            return Err(Error::invalid("no tasks to train on"));
        }
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for t in &batch {
            let (l, g) = meta_gradient(obj, t, params, cfg.alpha, cfg.inner_steps, cfg.first_order)?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("meta loss at iteration {it}")));
        }
        match cfg.optimizer {
            OuterOptimizer::Adam => adam.step_slices(&mut [&mut *params], &[&grad]),
            OuterOptimizer::Sgd => params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= cfg.outer_lr * g),
        }
        losses.push(loss);
        above = if loss > DIVERGENCE_FACTOR * losses[0] { above + 1 } else { 0 };
        if above >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged(format!(
                "meta loss {loss:.4e} above {DIVERGENCE_FACTOR}x the initial {:.4e} for {DIVERGENCE_PATIENCE} iterations",
                losses[0]
            )));
        }
        if (it + 1) % 100 == 0 {
            log::debug!("meta iteration {} loss {:.5}", it + 1, loss);
        }
    }
    Ok(losses)
}

/// Scalar toy family `L_j(psi) = (psi - c_j)^2`, identical on both splits.
pub struct QuadraticTasks {
    pub centers: Vec<f64>,
}

impl MetaObjective for QuadraticTasks {
    type Task = usize;

    fn inner_range(&self) -> Range<usize> {
        0..1
    }

    fn loss_and_grad(&mut self, task: &usize, _split: Split, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = params[0] - self.centers[*task];
        Ok((d * d, vec![2.0 * d]))
    }

    fn hvp(&mut self, _task: &usize, _params: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![2.0 * v[0]])
    }
}

/// Tradeoffs with their frozen encoders and entropy models.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskGrid {
    pub lambdas: Vec<f64>,
    pub encoders: Vec<EncoderParams>,
    pub entropy: Vec<EntropyModel>,
}

impl TaskGrid {
    pub fn new(lambdas: Vec<f64>, encoders: Vec<EncoderParams>, entropy: Vec<EntropyModel>) -> Result<Self> {
        if lambdas.len() < 2 {
            return Err(Error::invalid("a task grid needs at least two tradeoffs"));
        }
        if encoders.len() != lambdas.len() || entropy.len() != lambdas.len() {
            return Err(Error::invalid("one encoder and entropy model per tradeoff"));
        }
        if lambdas.iter().any(|l| !(*l > 0.0)) || lambdas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("tradeoffs must be positive and strictly increasing"));
        }
        Ok(Self { lambdas, encoders, entropy })
    }

    pub fn from_model(model: &CodecModel) -> Result<Self> {
        Self::new(
            model.lambdas(),
            model.qualities.iter().map(|q| q.encoder.clone()).collect(),
            model.qualities.iter().map(|q| q.entropy.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task: usize,
    pub lambda: f64,
    pub crops: Vec<ImageTensor>,
}

/// One seeded minibatch of `crop_size` crops per tradeoff.
pub fn sample_task_batch(
    grid: &TaskGrid,
    dataset: &[ImageTensor],
    batch: usize,
    crop_size: usize,
    seed: u64,
) -> Result<Vec<TaskBatch>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch == 0 || crop_size == 0 {
        return Err(Error::invalid("batch and crop size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(grid
        .lambdas
        .iter()
        .enumerate()
        .map(|(task, &lambda)| TaskBatch {
            task,
            lambda,
            crops: (0..batch)
                .map(|_| random_crop(&dataset[rng.random_range(0..dataset.len())], crop_size, &mut rng))
                .collect(),
        })
        .collect())
}

/// One task instance: fixed latents of both minibatches under the task's encoder.
pub struct CodecTask {
    pub lambda: f64,
    inner: Vec<(Tensor3, ImageTensor)>,
    outer: Vec<(Tensor3, ImageTensor)>,
    inner_bpp: f64,
    outer_bpp: f64,
}

impl CodecTask {
    fn encode(
        grid: &TaskGrid,
        b: &TaskBatch,
        quant: MetaQuant,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<(Tensor3, ImageTensor)>, f64)> {
        let mut out = Vec::with_capacity(b.crops.len());
        let mut bpp = 0.0;
        for crop in &b.crops {
            let y = grid.encoders[b.task].encode_latent(crop)?;
            let z = quantize_round(&y);
            bpp += estimate_rate_bits(&z, &grid.entropy[b.task])? / crop.num_pixels() as f64;
            let latent = match quant {
                MetaQuant::Round => z.to_tensor(),
                MetaQuant::Noise => add_uniform_noise(&y, rng),
            };
            out.push((latent, crop.clone()));
        }
        Ok((out, bpp / b.crops.len() as f64))
    }

    pub fn new(grid: &TaskGrid, inner: &TaskBatch, outer: &TaskBatch, quant: MetaQuant, seed: u64) -> Result<Self> {
        if inner.task != outer.task {
            return Err(Error::invalid("minibatches belong to different tasks"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inner_set, inner_bpp) = Self::encode(grid, inner, quant, &mut rng)?;
        let (outer_set, outer_bpp) = Self::encode(grid, outer, quant, &mut rng)?;
        Ok(Self {
            lambda: inner.lambda,
            inner: inner_set,
            outer: outer_set,
            inner_bpp,
            outer_bpp,
        })
    }
}

/// RD loss of the conditional decoder; parameters are `[decoder | modulators]`.
/// The rate term is constant because the encoders are frozen.
pub struct CodecMetaObjective {
    theta: DecoderParams,
    psi: ModulatorParams,
    n_theta: usize,
    distortion_scale: f64,
}

impl CodecMetaObjective {
    pub fn new(theta: &DecoderParams, psi: &ModulatorParams, distortion_scale: f64) -> Self {
        Self {
            theta: theta.clone(),
            psi: psi.clone(),
            n_theta: theta.num_params(),
            distortion_scale,
        }
    }

    pub fn flatten(theta: &DecoderParams, psi: &ModulatorParams) -> Vec<f64> {
        let mut v = theta.to_flat();
        v.extend(psi.to_flat());
        v
    }

    pub fn unflatten(&self, params: &[f64]) -> Result<(DecoderParams, ModulatorParams)> {
        let mut theta = self.theta.clone();
        let mut psi = self.psi.clone();
        theta.load_flat(&params[..self.n_theta])?;
        psi.load_flat(&params[self.n_theta..])?;
        Ok((theta, psi))
    }
}

impl MetaObjective for CodecMetaObjective {
    type Task = CodecTask;

    fn inner_range(&self) -> Range<usize> {
        self.n_theta..self.n_theta + self.psi.num_params()
    }

    fn loss_and_grad(&mut self, task: &CodecTask, split: Split, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (theta, psi) = self.unflatten(params)?;
        let (set, bpp) = match split {
            Split::Inner => (&task.inner, task.inner_bpp),
            Split::Outer => (&task.outer, task.outer_bpp),
        };
        let lam = TradeoffVector::uniform(task.lambda, theta.num_blocks())?;
        let weight = task.lambda * self.distortion_scale / set.len() as f64;
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for (z, x) in set {
            let (x_hat, cache) = conditional_forward(z, &theta, &psi, &lam)?;
            let (d, mut g) = distortion_with_grad(x, &x_hat, Metric::Mse)?;
            g.data.iter_mut().for_each(|v| *v *= weight);
            loss += weight * d;
            let cg = conditional_backward(&theta, &psi, &cache, &g, true, true);
            let flat_t = cg.theta.expect("requested").to_flat();
            let flat_p = cg.psi.expect("requested").to_flat();
            for (a, b) in grad.iter_mut().zip(flat_t.iter().chain(&flat_p)) {
                *a += b;
            }
        }
        Ok((loss + bpp, grad))
    }
}

/// Hard-quantized RD figures of the conditional decoder at tradeoff `j`
/// (same value on every layer), averaged over `images`.
pub fn evaluate_conditional(
    theta: &DecoderParams,
    psi: &ModulatorParams,
    grid: &TaskGrid,
    j: usize,
    images: &[ImageTensor],
    distortion_scale: f64,
) -> Result<RdEval> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let lam = TradeoffVector::uniform(grid.lambdas[j], theta.num_blocks())?;
    let mut acc = RdEval::default();
    for img in images {
        let (padded, dims) = pad_to_multiple(img, DOWNSAMPLE);
        let z = quantize_round(&grid.encoders[j].encode_latent(&padded)?);
        let bpp = estimate_rate_bits(&z, &grid.entropy[j])? / img.num_pixels() as f64;
        let m = mse(img, &crop_to(&conditional_decode(&z, theta, psi, &lam)?, dims))?;
        acc.mse += m;
        acc.bpp += bpp;
        acc.loss += grid.lambdas[j] * distortion_scale * m + bpp;
    }
    let n = images.len() as f64;
    Ok(RdEval {
        loss: acc.loss / n,
        mse: acc.mse / n,
        bpp: acc.bpp / n,
    })
}

/// Modulators after `steps` inner steps on one task.
pub fn inner_adapt(
    theta: &DecoderParams,
    psi: &ModulatorParams,
    task: &CodecTask,
    alpha: f64,
    steps: usize,
    distortion_scale: f64,
) -> Result<ModulatorParams> {
    let mut obj = CodecMetaObjective::new(theta, psi, distortion_scale);
    let flat = CodecMetaObjective::flatten(theta, psi);
    let adapted = inner_adapt_flat(&mut obj, task, &flat, alpha, steps)?;
    Ok(obj.unflatten(&adapted)?.1)
}

/// Meta-trains decoder and modulators over every tradeoff of `grid` at each
/// outer iteration.
pub fn maml_meta_train(
    theta: &DecoderParams,
    psi: &ModulatorParams,
    grid: &TaskGrid,
    dataset: &[ImageTensor],
    cfg: &MetaConfig,
) -> Result<(DecoderParams, ModulatorParams, MetaReport)> {
    cfg.validate()?;
    if theta.modulated_channels() != psi.channels() {
        return Err(Error::shape("modulators do not match the decoder"));
    }
    if let Some(e) = grid.encoders.iter().find(|e| e.latent_channels() != theta.latent_channels()) {
        return Err(Error::shape(format!(
            "encoder emits {} latent channels, decoder expects {}",
            e.latent_channels(),
            theta.latent_channels()
        )));
    }
    let (train, holdout) = split_holdout(dataset, cfg.holdout_fraction)?;
    let eval_all = |t: &DecoderParams, p: &ModulatorParams| -> Result<Vec<RdEval>> {
        (0..grid.len()).map(|j| evaluate_conditional(t, p, grid, j, holdout, cfg.distortion_scale)).collect()
    };
    let initial_holdout = eval_all(theta, psi)?;

    let mut obj = CodecMetaObjective::new(theta, psi, cfg.distortion_scale);
    let mut params = CodecMetaObjective::flatten(theta, psi);
    let base_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let losses = meta_train_flat(&mut obj, &mut params, cfg, |it| {
        let s = base_seed.wrapping_add(3 * it as u64);
        let inner = sample_task_batch(grid, train, cfg.batch_size, cfg.crop_size, s)?;
        let outer = sample_task_batch(grid, train, cfg.batch_size, cfg.crop_size, s + 1)?;
        inner
            .iter()
            .zip(&outer)
            .map(|(a, b)| CodecTask::new(grid, a, b, cfg.quantization, s + 2))
            .collect()
    })?;
    let (theta, psi) = obj.unflatten(&params)?;
    let final_holdout = eval_all(&theta, &psi)?;
    Ok((
        theta,
        psi,
        MetaReport {
            losses,
            initial_holdout,
            final_holdout,
        },
    ))
}

/// Meta-trains `model`'s shared decoder and modulators in place.
pub fn meta_train_model(model: &mut CodecModel, dataset: &[ImageTensor], cfg: &MetaConfig) -> Result<MetaReport> {
    let grid = TaskGrid::from_model(model)?;
    let (theta, psi, report) = maml_meta_train(&model.decoder, &model.modulators, &grid, dataset, cfg)?;
    model.decoder = theta;
    model.modulators = psi;
    model.meta = true;
    Ok(report)
}
