use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, pixel_shuffle2, pixel_shuffle2_backward, upsample_nearest2,
    upsample_nearest2_backward, Conv2d, ConvCache, Parameterized,
};
use crate::tensor::{ImageTensor, LatentTensor, Tensor3};

/// Total spatial downsampling of the encoder (four stride-2 stages).
pub const DOWNSAMPLE: usize = 16;
/// Number of decoding blocks, each followed by a modulation site.
pub const NUM_BLOCKS: usize = 4;

const KERNEL: usize = 3;

/// Channel configuration shared by every network in a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecDims {
    pub hidden_channels: usize,
    pub latent_channels: usize,
    pub modulator_hidden: usize,
}

impl Default for CodecDims {
    fn default() -> Self {
        Self {
            hidden_channels: 64,
            latent_channels: 32,
            modulator_hidden: 16,
        }
    }
}

impl CodecDims {
    /// `N^k`: channel count of the feature map leaving decoding block `k`.
    pub fn modulated_channels(&self) -> Vec<usize> {
        let mut v = vec![self.hidden_channels; NUM_BLOCKS - 1];
        v.push(3);
        v
    }
}

/// Four stride-2 convolutions; leaky rectifier after the first three.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub stages: Vec<Conv2d>,
}

pub struct EncoderCache {
    convs: Vec<ConvCache>,
    acts: Vec<Tensor3>,
}

impl EncoderParams {
    pub fn new<R: Rng>(dims: &CodecDims, rng: &mut R) -> Self {
        let h = dims.hidden_channels;
        let stages = vec![
            Conv2d::new(3, h, KERNEL, 2, 1, rng),
            Conv2d::new(h, h, KERNEL, 2, 1, rng),
            Conv2d::new(h, h, KERNEL, 2, 1, rng),
            Conv2d::new(h, dims.latent_channels, KERNEL, 2, 1, rng),
        ];
        Self { stages }
    }

    pub fn latent_channels(&self) -> usize {
        self.stages.last().map_or(0, |c| c.out_channels)
    }

    fn check(&self, x: &ImageTensor) -> Result<()> {
        if !x.height().is_multiple_of(DOWNSAMPLE) || !x.width().is_multiple_of(DOWNSAMPLE) {
            return Err(Error::shape(format!(
                "encoder input {}x{} is not a multiple of {DOWNSAMPLE}",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    /// `f_phi(x)`: latent of shape `(C_lat, H/16, W/16)`.
    pub fn encode_latent(&self, x: &ImageTensor) -> Result<LatentTensor> {
        self.check(x)?;
        let last = self.stages.len() - 1;
        let mut h = x.as_tensor().clone();
        for (i, conv) in self.stages.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                leaky_relu(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &ImageTensor) -> Result<(LatentTensor, EncoderCache)> {
        self.check(x)?;
        let last = self.stages.len() - 1;
        let mut h = x.as_tensor().clone();
        let mut convs = Vec::with_capacity(self.stages.len());
        let mut acts = Vec::with_capacity(last);
        for (i, conv) in self.stages.iter().enumerate() {
            let (mut y, cache) = conv.forward_cached(&h)?;
            convs.push(cache);
            if i < last {
                leaky_relu(&mut y);
                acts.push(y.clone());
            }
            h = y;
        }
        Ok((h, EncoderCache { convs, acts }))
    }

    /// Accumulates parameter gradients for `d loss / d latent` into `grad`.
    pub fn backward(&self, cache: &EncoderCache, grad_latent: &Tensor3, grad: &mut EncoderParams) {
        let mut g = grad_latent.clone();
        for i in (0..self.stages.len()).rev() {
            if i < self.stages.len() - 1 {
                leaky_relu_backward(&cache.acts[i], &mut g);
            }
            let need_input = i > 0;
            match self.stages[i].backward(&cache.convs[i], &g, Some(&mut grad.stages[i]), need_input) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }
}

impl Parameterized for EncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.stages.iter().flat_map(|c| c.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.stages.iter_mut().flat_map(|c| c.tensors_mut()).collect()
    }
}

/// `K` decoding blocks. Blocks `1..K-1` are convolution, leaky rectifier and
/// nearest 2x upsampling; block `K` is a convolution to `4 * 3` channels
/// followed by a 2x pixel shuffle. The output is clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub blocks: Vec<Conv2d>,
}

/// Forward state of one decode, kept for the backward pass.
pub struct DecoderCache {
    convs: Vec<ConvCache>,
    /// Block outputs before modulation; intermediate blocks at pre-upsample
    /// resolution (modulation commutes with nearest upsampling).
    features: Vec<Tensor3>,
    /// Modulated final output before clamping.
    pre_clamp: Tensor3,
    scales: Vec<Vec<f64>>,
}

/// Gradients produced by [`DecoderParams::backward`].
pub struct DecoderGrads {
    pub params: Option<DecoderParams>,
    /// `d loss / d s_k[i]` for every modulation site.
    pub scales: Vec<Vec<f64>>,
    pub latent: Option<Tensor3>,
}

impl DecoderParams {
    pub fn new<R: Rng>(dims: &CodecDims, rng: &mut R) -> Self {
        let h = dims.hidden_channels;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        blocks.push(Conv2d::new(dims.latent_channels, h, KERNEL, 1, 1, rng));
        for _ in 1..NUM_BLOCKS - 1 {
            blocks.push(Conv2d::new(h, h, KERNEL, 1, 1, rng));
        }
        let mut last = Conv2d::new(h, 12, KERNEL, 1, 1, rng);
        // Start near mid-grey so the clamp does not swallow early gradients.
        for w in &mut last.weight {
            *w *= 0.1;
        }
        last.bias.fill(0.5);
        blocks.push(last);
        Self { blocks }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn latent_channels(&self) -> usize {
        self.blocks[0].in_channels
    }

    /// `N^k` for each block.
    pub fn modulated_channels(&self) -> Vec<usize> {
        let k = self.blocks.len();
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| if i + 1 == k { b.out_channels / 4 } else { b.out_channels })
            .collect()
    }

    fn check_scales(&self, scales: Option<&[Vec<f64>]>) -> Result<()> {
        if let Some(s) = scales {
            let want = self.modulated_channels();
            if s.len() != want.len() {
                return Err(Error::shape(format!(
                    "{} scale vectors for {} decoding blocks",
                    s.len(),
                    want.len()
                )));
            }
            for (k, (v, n)) in s.iter().zip(&want).enumerate() {
                if v.len() != *n {
                    return Err(Error::shape(format!(
                        "block {k}: {} scales for {n} channels",
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn run(
        &self,
        z: &Tensor3,
        scales: Option<&[Vec<f64>]>,
        mut cache: Option<&mut DecoderCache>,
    ) -> Result<Tensor3> {
        self.check_scales(scales)?;
        if z.channels != self.latent_channels() {
            return Err(Error::shape(format!(
                "decoder expects {} latent channels, got {}",
                self.latent_channels(),
                z.channels
            )));
        }
        let k = self.blocks.len();
        let mut h = z.clone();
        for (i, conv) in self.blocks.iter().enumerate() {
            let y = match cache.as_deref_mut() {
                Some(c) => {
                    let (y, cc) = conv.forward_cached(&h)?;
                    c.convs.push(cc);
                    y
                }
                None => conv.forward(&h)?,
            };
            if i + 1 < k {
                let mut a = y;
                leaky_relu(&mut a);
                if let Some(c) = cache.as_deref_mut() {
                    c.features.push(a.clone());
                }
                if let Some(s) = scales {
                    modulate_in_place(&mut a, &s[i]);
                }
                h = upsample_nearest2(&a);
            } else {
                let mut out = pixel_shuffle2(&y);
                if let Some(c) = cache.as_deref_mut() {
                    c.features.push(out.clone());
                }
                if let Some(s) = scales {
                    modulate_in_place(&mut out, &s[i]);
                }
                h = out;
            }
        }
        if let Some(c) = cache {
            c.pre_clamp = h.clone();
        }
        for v in &mut h.data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(h)
    }

    /// Plain decode `g_theta(z)`, no modulation.
    pub fn decode(&self, z: &Tensor3) -> Result<ImageTensor> {
        ImageTensor::from_tensor_clamped(self.run(z, None, None)?)
    }

    /// Decode with per-block channel scales applied after each block.
    pub fn decode_with_scales(&self, z: &Tensor3, scales: Option<&[Vec<f64>]>) -> Result<ImageTensor> {
        ImageTensor::from_tensor_clamped(self.run(z, scales, None)?)
    }

    pub fn forward_cached(&self, z: &Tensor3, scales: Option<&[Vec<f64>]>) -> Result<(ImageTensor, DecoderCache)> {
        let mut cache = DecoderCache {
            convs: Vec::new(),
            features: Vec::new(),
            pre_clamp: Tensor3::zeros(0, 0, 0),
            scales: match scales {
                Some(s) => s.to_vec(),
                None => self.modulated_channels().iter().map(|&n| vec![1.0; n]).collect(),
            },
        };
        let out = self.run(z, scales, Some(&mut cache))?;
        Ok((ImageTensor::from_tensor_clamped(out)?, cache))
    }

    /// Backward pass from `d loss / d output` (output after clamping).
    pub fn backward(
        &self,
        cache: &DecoderCache,
        grad_out: &Tensor3,
        param_grads: bool,
        latent_grad: bool,
    ) -> DecoderGrads {
        let k = self.blocks.len();
        let mut params = param_grads.then(|| self.zeros_like());
        let mut dscales: Vec<Vec<f64>> = cache.scales.iter().map(|s| vec![0.0; s.len()]).collect();

        let mut g = grad_out.clone();
        for (gv, &p) in g.data.iter_mut().zip(&cache.pre_clamp.data) {
            if !(0.0..=1.0).contains(&p) {
                *gv = 0.0;
            }
        }
        let mut latent = None;
        for i in (0..k).rev() {
            let feat = &cache.features[i];
            let s = &cache.scales[i];
            // g is d/d(modulated output of block i) at output resolution.
            let mut gf = if i + 1 < k { upsample_nearest2_backward(&g) } else { g };
            let plane = feat.plane_len();
            for c in 0..feat.channels {
                let gp = &mut gf.data[c * plane..(c + 1) * plane];
                let fp = feat.plane(c);
                dscales[i][c] = gp.iter().zip(fp).map(|(a, b)| a * b).sum();
                for v in gp.iter_mut() {
                    *v *= s[c];
                }
            }
            let gy = if i + 1 < k {
                leaky_relu_backward(feat, &mut gf);
                gf
            } else {
                pixel_shuffle2_backward(&gf)
            };
            let need_input = i > 0 || latent_grad;
            let dx = self.blocks[i].backward(
                &cache.convs[i],
                &gy,
                params.as_mut().map(|p| &mut p.blocks[i]),
                need_input,
            );
            match dx {
                Some(dx) if i > 0 => g = dx,
                Some(dx) => {
                    latent = Some(dx);
                    break;
                }
                None => break,
            }
        }
        DecoderGrads {
            params,
            scales: dscales,
            latent,
        }
    }
}

fn modulate_in_place(t: &mut Tensor3, s: &[f64]) {
    let n = t.plane_len();
    for (c, &sc) in s.iter().enumerate() {
        for v in &mut t.data[c * n..(c + 1) * n] {
            *v *= sc;
        }
    }
}

impl Parameterized for DecoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.blocks.iter().flat_map(|c| c.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks.iter_mut().flat_map(|c| c.tensors_mut()).collect()
    }
}
