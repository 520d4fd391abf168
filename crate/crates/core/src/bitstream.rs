//! `.omlc` container: fixed header, then one record per patch in row-major
//! order holding the fp16 tradeoff side info and the range-coded payload.
//!
//! ```text
//! "OMC1" | version u8 | width u16 | height u16 | patch_size u16 | K u8
//!        | metric_id u8 | quality_index u8 | model_checksum u32
//! per patch: K x fp16 | payload_len u32 | payload
//! ```
//! Multi-byte fields are big-endian.

use half::f16;

use crate::error::{Error, FormatError, Result};
use crate::metrics::Metric;
use crate::tensor::{ImageTensor, Tensor3};

pub const MAGIC: [u8; 4] = *b"OMC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const DEFAULT_PATCH_SIZE: usize = 512;

/// Nearest binary16 value (ties to even), widened back to f64.
pub fn fp16_round(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

pub fn fp16_bits(x: f64) -> u16 {
    f16::from_f64(x).to_bits()
}

pub fn fp16_from_bits(bits: u16) -> f64 {
    f16::from_bits(bits).to_f64()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u16,
    pub height: u16,
    pub patch_size: u16,
    pub k: u8,
    pub metric: Metric,
    pub quality_index: u8,
    pub model_checksum: u32,
}

impl Header {
    pub fn grid(&self) -> (usize, usize) {
        let p = self.patch_size as usize;
        ((self.height as usize).div_ceil(p), (self.width as usize).div_ceil(p))
    }

    pub fn patch_count(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    fn validate(&self) -> Result<(), FormatError> {
        let bad = |m: &str| Err(FormatError::InvalidField(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("zero image dimension");
        }
        if self.patch_size < 16 || !self.patch_size.is_multiple_of(16) {
            return bad("patch_size must be a positive multiple of 16");
        }
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        Ok(())
    }
}

/// One patch: the transmitted tradeoffs as raw binary16 words, and the payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchRecord {
    pub lambda_bits: Vec<u16>,
    pub payload: Vec<u8>,
}

impl PatchRecord {
    pub fn new(lambdas: &[f64], payload: Vec<u8>) -> Self {
        Self {
            lambda_bits: lambdas.iter().map(|&l| fp16_bits(l)).collect(),
            payload,
        }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.lambda_bits.iter().map(|&b| fp16_from_bits(b)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: Header,
    pub patches: Vec<PatchRecord>,
}

pub fn write_container(c: &Container) -> Result<Vec<u8>> {
    let h = &c.header;
    h.validate()?;
    if c.patches.len() != h.patch_count() {
        return Err(Error::invalid(format!(
            "{} patch records for a {:?} grid",
            c.patches.len(),
            h.grid()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + c.patches.iter().map(|p| 6 + p.payload.len()).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&h.width.to_be_bytes());
    out.extend_from_slice(&h.height.to_be_bytes());
    out.extend_from_slice(&h.patch_size.to_be_bytes());
    out.push(h.k);
    out.push(h.metric.id());
    out.push(h.quality_index);
    out.extend_from_slice(&h.model_checksum.to_be_bytes());
    for (i, p) in c.patches.iter().enumerate() {
        if p.lambda_bits.len() != h.k as usize {
            return Err(Error::invalid(format!("patch {i} has {} tradeoffs, K = {}", p.lambda_bits.len(), h.k)));
        }
        for b in &p.lambda_bits {
            out.extend_from_slice(&b.to_be_bytes());
        }
        let len = u32::try_from(p.payload.len()).map_err(|_| Error::invalid(format!("patch {i} payload too long")))?;
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&p.payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a container. With `expected_checksum`, a header carrying a
/// different model checksum is rejected before any patch is read.
pub fn read_container(bytes: &[u8], expected_checksum: Option<u32>) -> Result<Container, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().unwrap(),
        None => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            if m[..bytes.len()] != MAGIC[..bytes.len()] {
                return Err(FormatError::BadMagic(m));
            }
            return Err(r.take(4).unwrap_err());
        }
    };
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    r.pos = 4;
    let version = r.u8()?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let width = r.u16()?;
    let height = r.u16()?;
    let patch_size = r.u16()?;
    let k = r.u8()?;
    let metric_id = r.u8()?;
    let quality_index = r.u8()?;
    let model_checksum = r.u32()?;
    let metric = Metric::from_id(metric_id).ok_or_else(|| FormatError::InvalidField(format!("metric id {metric_id}")))?;
    let header = Header {
        width,
        height,
        patch_size,
        k,
        metric,
        quality_index,
        model_checksum,
    };
    header.validate()?;
    if let Some(expected) = expected_checksum {
        if expected != model_checksum {
            return Err(FormatError::ChecksumMismatch {
                expected,
                found: model_checksum,
            });
        }
    }
    let mut patches = Vec::with_capacity(header.patch_count());
    for _ in 0..header.patch_count() {
        let lambda_bits = (0..k).map(|_| r.u16()).collect::<Result<Vec<_>, _>>()?;
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        patches.push(PatchRecord { lambda_bits, payload });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Container { header, patches })
}

/// Bit counts of a container split by role; `total == payload + side_info + header`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitBreakdown {
    pub total: u64,
    pub payload: u64,
    pub side_info: u64,
    pub header: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bpp {
    pub total: f64,
    pub payload: f64,
    pub side_info: f64,
    pub header: f64,
}

impl BitBreakdown {
    pub fn of(c: &Container) -> Self {
        let payload: u64 = c.patches.iter().map(|p| 8 * p.payload.len() as u64).sum();
        let side_info: u64 = c.patches.iter().map(|p| 16 * p.lambda_bits.len() as u64).sum();
        let framing = 8 * HEADER_LEN as u64 + 32 * c.patches.len() as u64;
        Self {
            total: payload + side_info + framing,
            payload,
            side_info,
            header: framing,
        }
    }

    pub fn bpp(&self, width: usize, height: usize) -> Bpp {
        let px = (width * height) as f64;
        Bpp {
            total: self.total as f64 / px,
            payload: self.payload as f64 / px,
            side_info: self.side_info as f64 / px,
            header: self.header as f64 / px,
        }
    }
}

/// Bits per pixel of a serialized container over a `width` x `height` image.
pub fn bpp(container: &[u8], width: usize, height: usize) -> Result<Bpp> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("zero image dimension"));
    }
    let c = read_container(container, None)?;
    let bits = BitBreakdown::of(&c);
    debug_assert_eq!(bits.total, 8 * container.len() as u64);
    Ok(bits.bpp(width, height))
}

/// Side-info bits per pixel for `k` fp16 values on one `w` x `h` patch.
pub fn side_info_bpp(k: usize, width: usize, height: usize) -> f64 {
    (16 * k) as f64 / (width * height) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub image: ImageTensor,
}

fn check_patch_size(patch_size: usize) -> Result<()> {
    if patch_size < 16 || !patch_size.is_multiple_of(16) {
        return Err(Error::invalid(format!("patch size {patch_size} must be a positive multiple of 16")));
    }
    Ok(())
}

/// Row-major grid of non-overlapping patches; edge patches keep their true size.
pub fn tile(x: &ImageTensor, patch_size: usize) -> Result<Vec<Patch>> {
    check_patch_size(patch_size)?;
    let mut out = Vec::new();
    for y0 in (0..x.height()).step_by(patch_size) {
        for x0 in (0..x.width()).step_by(patch_size) {
            let h = patch_size.min(x.height() - y0);
            let w = patch_size.min(x.width() - x0);
            out.push(Patch {
                y0,
                x0,
                image: x.crop(y0, x0, h, w),
            });
        }
    }
    Ok(out)
}

pub fn assemble(patches: &[Patch], width: usize, height: usize) -> Result<ImageTensor> {
    let mut t = Tensor3::zeros(3, height, width);
    let mut covered = vec![false; width * height];
    for p in patches {
        let (ph, pw) = (p.image.height(), p.image.width());
        if p.y0 + ph > height || p.x0 + pw > width {
            return Err(Error::invalid(format!("patch at ({}, {}) exceeds the image", p.y0, p.x0)));
        }
        for y in 0..ph {
            for x in 0..pw {
                let i = (p.y0 + y) * width + p.x0 + x;
                if covered[i] {
                    return Err(Error::invalid(format!("patches overlap at ({}, {})", p.y0 + y, p.x0 + x)));
                }
                covered[i] = true;
                for c in 0..3 {
                    *t.at_mut(c, p.y0 + y, p.x0 + x) = p.image.as_tensor().at(c, y, x);
                }
            }
        }
    }
    if let Some(i) = covered.iter().position(|&c| !c) {
        return Err(Error::invalid(format!("pixel ({}, {}) not covered", i / width, i % width)));
    }
    ImageTensor::from_tensor(t)
}
