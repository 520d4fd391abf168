//! On-disk model: a directory with `manifest.json` and one raw
//! little-endian f64 file per parameter group.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecDims, DOWNSAMPLE, NUM_BLOCKS};
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::nn::Parameterized;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "omlc-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dims: CodecDims,
    pub num_blocks: usize,
    pub downsample: usize,
    pub meta: bool,
    pub lambdas: Vec<f64>,
    pub checksum: u32,
}

fn write_f64s(path: &Path, tensors: &[&[f64]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 * tensors.iter().map(|t| t.len()).sum::<usize>());
    for t in tensors {
        for v in *t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_into<P: Parameterized>(path: &Path, target: &mut P) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.len() != 8 * target.num_params() {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            8 * target.num_params()
        )));
    }
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    target.load_flat(&flat)
}

pub fn save(model: &CodecModel, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    write_f64s(&dir.join("decoder.bin"), &model.decoder.tensors())?;
    write_f64s(&dir.join("modulators.bin"), &model.modulators.tensors())?;
    for (j, q) in model.qualities.iter().enumerate() {
        write_f64s(&dir.join(format!("encoder_{j}.bin")), &q.encoder.tensors())?;
        write_f64s(&dir.join(format!("entropy_{j}.bin")), &q.entropy.tensors())?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        dims: model.dims,
        num_blocks: NUM_BLOCKS,
        downsample: DOWNSAMPLE,
        meta: model.meta,
        lambdas: model.lambdas(),
        checksum: model.checksum(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if m.format != FORMAT || m.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", m.format, m.version)));
    }
    if m.num_blocks != NUM_BLOCKS || m.downsample != DOWNSAMPLE {
        return Err(Error::Checkpoint("checkpoint built for a different architecture".into()));
    }
    Ok(m)
}

/// Loads and verifies the stored checksum against the loaded parameters.
pub fn load(dir: &Path) -> Result<CodecModel> {
    let m = read_manifest(dir)?;
    let mut model = CodecModel::skeleton(m.dims, &m.lambdas);
    model.meta = m.meta;
    model.validate()?;
    read_into(&dir.join("decoder.bin"), &mut model.decoder)?;
    read_into(&dir.join("modulators.bin"), &mut model.modulators)?;
    for (j, q) in model.qualities.iter_mut().enumerate() {
        read_into(&dir.join(format!("encoder_{j}.bin")), &mut q.encoder)?;
        read_into(&dir.join(format!("entropy_{j}.bin")), &mut q.entropy)?;
    }
    let found = model.checksum();
    if found != m.checksum {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: manifest {:#010x}, parameters {found:#010x}",
            m.checksum
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::BaseModel;

    #[test]
    fn save_load_roundtrip_and_corruption() {
        let dims = CodecDims {
            hidden_channels: 4,
            latent_channels: 3,
            modulator_hidden: 2,
        };
        let mut model = CodecModel::from_bases(vec![(0.002, BaseModel::init(dims, 1)), (0.01, BaseModel::init(dims, 2))], 0).unwrap();
        model.modulators = crate::modulation::ModulatorParams::new(&dims.modulated_channels(), 2, 9);
        model.meta = true;
        let dir = tempfile::tempdir().unwrap();
        save(&model, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.checksum(), model.checksum());

        let p = dir.path().join("entropy_1.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
        fs::write(&p, &bytes[..8]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
