//! Whole-image encode and decode: tiling, latent coding, per-patch
//! adaptation and container assembly.

use rayon::prelude::*;
use serde::Serialize;

use crate::bitstream::{
    assemble, read_container, tile, write_container, BitBreakdown, Container, Header, Patch, PatchRecord,
    DEFAULT_PATCH_SIZE,
};
use crate::codec::{pad_to_multiple, quantize_round, DOWNSAMPLE};
use crate::entropy_coding::{build_cdf_table, decode_latent, encode_latent, CdfTable, DEFAULT_SYMBOL_MAX, DEFAULT_SYMBOL_MIN};
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::modulation::{conditional_decode, TradeoffVector};
use crate::oml::{oml_adapt_patch, OmlConfig};
use crate::tensor::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeOptions {
    /// Target tradeoff: picks the nearest quality and seeds every layer's λ.
    pub lambda: f64,
    pub oml: OmlConfig,
    pub patch_size: usize,
    /// Adapt patches cut short by the image border as well.
    pub adapt_boundary: bool,
    /// Worker threads over patches; the output does not depend on it.
    pub jobs: usize,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            lambda: 0.0035,
            oml: OmlConfig::default(),
            patch_size: DEFAULT_PATCH_SIZE,
            adapt_boundary: true,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchStats {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    pub boundary: bool,
    pub payload_bytes: usize,
    pub lambdas: Vec<f64>,
    pub initial_distortion: f64,
    pub best_distortion: f64,
    pub evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub bytes: Vec<u8>,
    /// What the decoder will reconstruct from `bytes`.
    pub reconstruction: ImageTensor,
    pub quality_index: usize,
    pub patches: Vec<PatchStats>,
    pub bits: BitBreakdown,
}

/// Tables for every quality level, rebuilt from the entropy models.
pub fn cdf_tables(model: &CodecModel) -> Result<Vec<CdfTable>> {
    model
        .qualities
        .iter()
        .map(|q| build_cdf_table(&q.entropy, DEFAULT_SYMBOL_MIN, DEFAULT_SYMBOL_MAX))
        .collect()
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

struct EncodedPatch {
    record: PatchRecord,
    reconstruction: Patch,
    stats: PatchStats,
}

fn encode_patch(
    model: &CodecModel,
    q: usize,
    table: &CdfTable,
    patch: &Patch,
    opts: &EncodeOptions,
) -> Result<EncodedPatch> {
    let (h, w) = (patch.image.height(), patch.image.width());
    let boundary = h < opts.patch_size || w < opts.patch_size;
    let (padded, _) = pad_to_multiple(&patch.image, DOWNSAMPLE);
    let z = quantize_round(&model.qualities[q].encoder.encode_latent(&padded)?);
    let payload = encode_latent(&z, table)?;
    let mut cfg = opts.oml.clone();
    if boundary && !opts.adapt_boundary {
        cfg.iterations = 0;
    }
    let r = oml_adapt_patch(&patch.image, &z, &model.decoder, &model.modulators, opts.lambda, &cfg)?;
    let lambdas = r.best.values().to_vec();
    Ok(EncodedPatch {
        stats: PatchStats {
            y0: patch.y0,
            x0: patch.x0,
            height: h,
            width: w,
            boundary,
            payload_bytes: payload.len(),
            lambdas: lambdas.clone(),
            initial_distortion: r.initial_distortion,
            best_distortion: r.best_distortion,
            evaluations: r.trace.len(),
        },
        record: PatchRecord::new(&lambdas, payload),
        reconstruction: Patch {
            y0: patch.y0,
            x0: patch.x0,
            image: r.best_reconstruction,
        },
    })
}

pub fn encode_image(model: &CodecModel, x: &ImageTensor, opts: &EncodeOptions) -> Result<EncodeOutput> {
    model.validate()?;
    opts.oml.validate()?;
    if !(opts.lambda > 0.0 && opts.lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {}", opts.lambda)));
    }
    let too_big = |v: usize| v > u16::MAX as usize;
    if too_big(x.width()) || too_big(x.height()) || too_big(opts.patch_size) {
        return Err(Error::invalid("image and patch dimensions must fit in 16 bits"));
    }
    let q = model.quality_for(opts.lambda);
    let table = build_cdf_table(&model.qualities[q].entropy, DEFAULT_SYMBOL_MIN, DEFAULT_SYMBOL_MAX)?;
    let patches = tile(x, opts.patch_size)?;
    let encoded: Vec<EncodedPatch> = with_pool(opts.jobs, || {
        patches
            .par_iter()
            .map(|p| encode_patch(model, q, &table, p, opts))
            .collect::<Result<Vec<_>>>()
    })??;

    let header = Header {
        width: x.width() as u16,
        height: x.height() as u16,
        patch_size: opts.patch_size as u16,
        k: model.decoder.num_blocks() as u8,
        metric: opts.oml.metric,
        quality_index: q as u8,
        model_checksum: model.checksum(),
    };
    let mut records = Vec::with_capacity(encoded.len());
    let mut recon = Vec::with_capacity(encoded.len());
    let mut stats = Vec::with_capacity(encoded.len());
    for e in encoded {
        records.push(e.record);
        recon.push(e.reconstruction);
        stats.push(e.stats);
    }
    let container = Container { header, patches: records };
    let bytes = write_container(&container)?;
    Ok(EncodeOutput {
        bits: BitBreakdown::of(&container),
        bytes,
        reconstruction: assemble(&recon, x.width(), x.height())?,
        quality_index: q,
        patches: stats,
    })
}

/// Parses and checks a container against `model` without decoding it.
pub fn read_for_model(model: &CodecModel, bytes: &[u8]) -> Result<Container> {
    let c = read_container(bytes, Some(model.checksum()))?;
    if c.header.k as usize != model.decoder.num_blocks() {
        return Err(Error::invalid(format!(
            "container carries {} tradeoffs per patch, model has {} blocks",
            c.header.k,
            model.decoder.num_blocks()
        )));
    }
    if c.header.quality_index as usize >= model.qualities.len() {
        return Err(Error::invalid(format!("quality index {} out of range", c.header.quality_index)));
    }
    Ok(c)
}

pub fn decode_image(model: &CodecModel, bytes: &[u8], jobs: usize) -> Result<ImageTensor> {
    let c = read_for_model(model, bytes)?;
    let h = &c.header;
    let q = h.quality_index as usize;
    let table = build_cdf_table(&model.qualities[q].entropy, DEFAULT_SYMBOL_MIN, DEFAULT_SYMBOL_MAX)?;
    let ps = h.patch_size as usize;
    let (rows, cols) = h.grid();
    let (width, height) = (h.width as usize, h.height as usize);
    let patches = with_pool(jobs, || {
        c.patches
            .par_iter()
            .enumerate()
            .map(|(i, rec)| {
                let (y0, x0) = ((i / cols) * ps, (i % cols) * ps);
                let (ph, pw) = (ps.min(height - y0), ps.min(width - x0));
                let shape = (
                    model.dims.latent_channels,
                    ph.div_ceil(DOWNSAMPLE),
                    pw.div_ceil(DOWNSAMPLE),
                );
                let z = decode_latent(&rec.payload, &table, shape)?;
                let lam = TradeoffVector::new(rec.lambdas())?;
                let image = conditional_decode(&z, &model.decoder, &model.modulators, &lam)?.crop(0, 0, ph, pw);
                Ok(Patch { y0, x0, image })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    debug_assert_eq!(patches.len(), rows * cols);
    assemble(&patches, width, height)
}
