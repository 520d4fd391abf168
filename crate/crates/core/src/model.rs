//! A complete codec: shared conditional decoder and modulators, plus one
//! frozen encoder and entropy model per quality level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{BaseModel, CodecDims, DecoderParams, EncoderParams, EntropyModel};
use crate::error::{Error, Result};
use crate::modulation::ModulatorParams;
use crate::nn::Parameterized;

const MODULATOR_SEED: u64 = 0x6d6f_6475;

#[derive(Clone, Debug, PartialEq)]
pub struct Quality {
    pub lambda: f64,
    pub encoder: EncoderParams,
    pub entropy: EntropyModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecModel {
    pub dims: CodecDims,
    pub decoder: DecoderParams,
    pub modulators: ModulatorParams,
    /// Sorted by strictly increasing `lambda`.
    pub qualities: Vec<Quality>,
    pub meta: bool,
}

impl CodecModel {
    /// Single-quality model; its modulators start out as unit scaling.
    pub fn from_base(base: BaseModel, lambda: f64) -> Result<Self> {
        Self::from_bases(vec![(lambda, base)], 0)
    }

    /// Groups per-tradeoff base models; the decoder of `bases[decoder_from]`
    /// becomes the shared decoder.
    pub fn from_bases(mut bases: Vec<(f64, BaseModel)>, decoder_from: usize) -> Result<Self> {
        if bases.is_empty() || decoder_from >= bases.len() {
            return Err(Error::invalid("need at least one base model"));
        }
        let dims = bases[0].1.dims;
        if bases.iter().any(|(_, b)| b.dims != dims) {
            return Err(Error::invalid("base models have different dimensions"));
        }
        let decoder = bases[decoder_from].1.decoder.clone();
        bases.sort_by(|a, b| a.0.total_cmp(&b.0));
        let qualities: Vec<Quality> = bases
            .into_iter()
            .map(|(lambda, b)| Quality {
                lambda,
                encoder: b.encoder,
                entropy: b.entropy,
            })
            .collect();
        // Unit scales, but with a random first layer so the modulators can
        // learn a dependence on the tradeoff.
        let model = Self {
            dims,
            decoder,
            modulators: ModulatorParams::new(&dims.modulated_channels(), dims.modulator_hidden, MODULATOR_SEED),
            qualities,
            meta: false,
        };
        model.validate()?;
        Ok(model)
    }

    /// Zero-weight skeleton with the right shapes, for loading.
    pub fn skeleton(dims: CodecDims, lambdas: &[f64]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut decoder = DecoderParams::new(&dims, &mut rng);
        decoder.fill(0.0);
        let mut encoder = EncoderParams::new(&dims, &mut rng);
        encoder.fill(0.0);
        Self {
            dims,
            decoder,
            modulators: ModulatorParams::identity(&dims.modulated_channels(), dims.modulator_hidden),
            qualities: lambdas
                .iter()
                .map(|&lambda| Quality {
                    lambda,
                    encoder: encoder.clone(),
                    entropy: EntropyModel::new(dims.latent_channels, 1.0),
                })
                .collect(),
            meta: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.qualities.is_empty() {
            return Err(Error::invalid("model has no quality levels"));
        }
        if self.qualities.iter().any(|q| !(q.lambda > 0.0 && q.lambda.is_finite())) {
            return Err(Error::invalid("quality tradeoffs must be positive"));
        }
        if self.qualities.windows(2).any(|w| w[0].lambda >= w[1].lambda) {
            return Err(Error::invalid("quality tradeoffs must be strictly increasing"));
        }
        if self.qualities.len() > u8::MAX as usize + 1 {
            return Err(Error::invalid("at most 256 quality levels"));
        }
        Ok(())
    }

    /// Quality `j` with the shared decoder, as a standalone base model.
    pub fn base(&self, j: usize) -> Result<BaseModel> {
        let q = self
            .qualities
            .get(j)
            .ok_or_else(|| Error::invalid(format!("no quality level {j}")))?;
        Ok(BaseModel {
            dims: self.dims,
            encoder: q.encoder.clone(),
            decoder: self.decoder.clone(),
            entropy: q.entropy.clone(),
        })
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.qualities.iter().map(|q| q.lambda).collect()
    }

    /// Quality whose tradeoff is nearest to `lambda` on a log scale.
    pub fn quality_for(&self, lambda: f64) -> usize {
        let target = lambda.max(f64::MIN_POSITIVE).ln();
        let mut best = 0;
        for (i, q) in self.qualities.iter().enumerate() {
            if (q.lambda.ln() - target).abs() < (self.qualities[best].lambda.ln() - target).abs() {
                best = i;
            }
        }
        best
    }

    /// Parameter buffers in serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.decoder.tensors();
        v.extend(self.modulators.tensors());
        for q in &self.qualities {
            v.extend(q.encoder.tensors());
            v.extend(q.entropy.tensors());
        }
        v
    }

    /// CRC32 over dimensions, tradeoffs, the meta flag and every parameter.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for d in [self.dims.hidden_channels, self.dims.latent_channels, self.dims.modulator_hidden] {
            h.update(&(d as u64).to_le_bytes());
        }
        for q in &self.qualities {
            h.update(&q.lambda.to_le_bytes());
        }
        h.update(&[self.meta as u8]);
        for t in self.tensors() {
            for v in t {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> CodecDims {
        CodecDims {
            hidden_channels: 4,
            latent_channels: 3,
            modulator_hidden: 2,
        }
    }

    #[test]
    fn quality_lookup_and_ordering() {
        let m = CodecModel::from_bases(
            vec![(0.013, BaseModel::init(dims(), 1)), (0.0018, BaseModel::init(dims(), 2)), (0.0035, BaseModel::init(dims(), 3))],
            1,
        )
        .unwrap();
        assert_eq!(m.lambdas(), vec![0.0018, 0.0035, 0.013]);
        assert_eq!(m.decoder, BaseModel::init(dims(), 2).decoder);
        assert_eq!(m.quality_for(0.002), 0);
        assert_eq!(m.quality_for(0.005), 1);
        assert_eq!(m.quality_for(1.0), 2);
        assert!(CodecModel::from_bases(vec![(0.1, BaseModel::init(dims(), 1)), (0.1, BaseModel::init(dims(), 2))], 0).is_err());
    }

    #[test]
    fn checksum_tracks_parameters() {
        let m = CodecModel::from_base(BaseModel::init(dims(), 1), 0.01).unwrap();
        let mut n = m.clone();
        assert_eq!(m.checksum(), n.checksum());
        n.qualities[0].entropy.log_scales[0] += 1e-12;
        assert_ne!(m.checksum(), n.checksum());
        let mut n = m.clone();
        n.meta = true;
        assert_ne!(m.checksum(), n.checksum());
    }
}
