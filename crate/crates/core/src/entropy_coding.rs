//! Static range coding of quantized latents with 16-bit frequency tables.
//!
//! The coder keeps a 32-bit range and a 33-bit `low` with byte-wise carry
//! propagation. Termination writes the shortest value in the final interval
//! (at most one significant byte) and drops the trailing zero bytes, which
//! the decoder reads back as implicit zeros.

use crate::codec::EntropyModel;
use crate::error::{CodingError, Error, Result};
use crate::tensor::QuantizedLatent;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
pub const DEFAULT_SYMBOL_MIN: i32 = -127;
pub const DEFAULT_SYMBOL_MAX: i32 = 127;

const TOP: u32 = 1 << 24;
/// Zero bytes the encoder may drop from the end of a payload.
const MAX_IMPLICIT_BYTES: usize = 4;

/// Frequencies for one channel: symbols `symbol_min..=symbol_max`, then the
/// escape slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelCdf {
    pub symbol_min: i32,
    pub symbol_max: i32,
    pub freqs: Vec<u32>,
    /// `cum[i]` is the sum of `freqs[..i]`; `cum.last() == TOTAL_FREQ`.
    pub cum: Vec<u32>,
}

impl ChannelCdf {
    /// Builds from raw probabilities (symbols then escape) with a floor of one
    /// count per slot and largest-remainder rounding to exactly `TOTAL_FREQ`.
    pub fn from_probabilities(symbol_min: i32, symbol_max: i32, probs: &[f64]) -> Result<Self> {
        let n = probs.len();
        if symbol_max <= symbol_min || n != (symbol_max - symbol_min) as usize + 2 {
            return Err(Error::invalid(format!(
                "{n} probabilities for symbols {symbol_min}..={symbol_max} plus escape"
            )));
        }
        if n as u32 > TOTAL_FREQ {
            return Err(Error::invalid("alphabet larger than the frequency total"));
        }
        let mass: f64 = probs.iter().map(|p| p.max(0.0)).sum();
        let spare = (TOTAL_FREQ - n as u32) as f64;
        let shares: Vec<f64> = probs
            .iter()
            .map(|p| if mass > 0.0 { p.max(0.0) / mass * spare } else { spare / n as f64 })
            .collect();
        let mut freqs: Vec<u32> = shares.iter().map(|s| 1 + s.floor() as u32).collect();
        let assigned: u32 = freqs.iter().sum();
        let mut leftover = TOTAL_FREQ - assigned;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let fa = shares[a] - shares[a].floor();
            let fb = shares[b] - shares[b].floor();
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            freqs[i] += 1;
            leftover -= 1;
        }
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0);
        for f in &freqs {
            cum.push(cum.last().unwrap() + f);
        }
        debug_assert_eq!(*cum.last().unwrap(), TOTAL_FREQ);
        Ok(Self {
            symbol_min,
            symbol_max,
            freqs,
            cum,
        })
    }

    /// Uniform table over the same alphabet.
    pub fn uniform(symbol_min: i32, symbol_max: i32) -> Result<Self> {
        let n = (symbol_max - symbol_min) as usize + 2;
        Self::from_probabilities(symbol_min, symbol_max, &vec![1.0; n])
    }

    pub fn escape_index(&self) -> usize {
        self.freqs.len() - 1
    }

    /// Slot of `v`, or `None` when it needs the escape path.
    pub fn slot(&self, v: i32) -> Option<usize> {
        (self.symbol_min..=self.symbol_max)
            .contains(&v)
            .then(|| (v - self.symbol_min) as usize)
    }

    /// Ideal code length of `v` under this table, escape literal included.
    pub fn cost_bits(&self, v: i32) -> f64 {
        let idx = self.slot(v).unwrap_or(self.escape_index());
        let bits = -(self.freqs[idx] as f64 / TOTAL_FREQ as f64).log2();
        if self.slot(v).is_some() {
            bits
        } else {
            bits + 16.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub symbol_min: i32,
    pub symbol_max: i32,
    pub channels: Vec<ChannelCdf>,
}

/// Quantizes every channel's discretized logistic into a 16-bit table.
pub fn build_cdf_table(em: &EntropyModel, symbol_min: i32, symbol_max: i32) -> Result<CdfTable> {
    if symbol_min >= symbol_max {
        return Err(Error::invalid(format!("symbol range {symbol_min}..={symbol_max} is empty")));
    }
    let channels = (0..em.channels())
        .map(|c| {
            let mut probs: Vec<f64> = (symbol_min..=symbol_max).map(|v| em.pmf(c, v as f64)).collect();
            probs.push(em.escape_mass(c, symbol_min, symbol_max));
            ChannelCdf::from_probabilities(symbol_min, symbol_max, &probs)
        })
        .collect::<Result<_>>()?;
    Ok(CdfTable {
        symbol_min,
        symbol_max,
        channels,
    })
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        // The interval starts inside [0, 2^32), so the first byte is always 0.
        if self.skip_first {
            self.skip_first = false;
            debug_assert_eq!(byte, 0);
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn encode_interval(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.normalize();
    }

    pub fn encode(&mut self, value: i32, cdf: &ChannelCdf) -> Result<(), CodingError> {
        match cdf.slot(value) {
            Some(i) => self.encode_interval(cdf.cum[i], cdf.freqs[i]),
            None => {
                let lit = i16::try_from(value).map_err(|_| CodingError::LiteralOverflow(value))?;
                let e = cdf.escape_index();
                self.encode_interval(cdf.cum[e], cdf.freqs[e]);
                self.encode_interval(lit as u16 as u32, 1);
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Any value in [low, low + range) identifies the stream; pick the one
        // with the most trailing zero bytes. range >= 2^24 guarantees a
        // multiple of 2^24 inside.
        self.low = (self.low + 0x00FF_FFFF) & !0x00FF_FFFF;
        for _ in 0..5 {
            self.shift_low();
        }
        let mut out = self.out;
        for _ in 0..MAX_IMPLICIT_BYTES {
            if out.last() == Some(&0) {
                out.pop();
            } else {
                break;
            }
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    fn take(&mut self, r: u32, cum: u32, freq: u32) {
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        self.normalize();
    }

    pub fn decode(&mut self, cdf: &ChannelCdf) -> i32 {
        let r = self.range >> PRECISION_BITS;
        let v = (self.code / r).min(TOTAL_FREQ - 1);
        // Largest slot with cum[slot] <= v.
        let slot = cdf.cum.partition_point(|&c| c <= v) - 1;
        self.take(r, cdf.cum[slot], cdf.freqs[slot]);
        if slot == cdf.escape_index() {
            let r = self.range >> PRECISION_BITS;
            let lit = (self.code / r).min(TOTAL_FREQ - 1);
            self.take(r, lit, 1);
            lit as u16 as i16 as i32
        } else {
            cdf.symbol_min + slot as i32
        }
    }

    /// Fails if the decoder consumed more implicit bytes than an encoder can drop.
    pub fn finish(self) -> Result<(), CodingError> {
        let over = self.pos.saturating_sub(self.data.len());
        if over > MAX_IMPLICIT_BYTES {
            return Err(CodingError::TruncatedPayload { read: over });
        }
        Ok(())
    }
}

pub fn range_encode(symbols: &[i32], cdf: &ChannelCdf) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(payload: &[u8], cdf: &ChannelCdf, count: usize) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(payload);
    let out = (0..count).map(|_| dec.decode(cdf)).collect();
    dec.finish()?;
    Ok(out)
}

/// Codes a latent channel by channel, each with its own table.
pub fn encode_latent(z: &QuantizedLatent, table: &CdfTable) -> Result<Vec<u8>> {
    if z.channels != table.channels.len() {
        return Err(CodingError::ChannelMismatch {
            table: table.channels.len(),
            latent: z.channels,
        }
        .into());
    }
    let mut enc = RangeEncoder::new();
    let n = z.plane_len();
    for (c, cdf) in table.channels.iter().enumerate() {
        for &v in &z.values[c * n..(c + 1) * n] {
            enc.encode(v, cdf)?;
        }
    }
    Ok(enc.finish())
}

pub fn decode_latent(payload: &[u8], table: &CdfTable, shape: (usize, usize, usize)) -> Result<QuantizedLatent> {
    let (channels, height, width) = shape;
    if channels != table.channels.len() {
        return Err(CodingError::ChannelMismatch {
            table: table.channels.len(),
            latent: channels,
        }
        .into());
    }
    let mut dec = RangeDecoder::new(payload);
    let mut values = Vec::with_capacity(channels * height * width);
    for cdf in &table.channels {
        for _ in 0..height * width {
            values.push(dec.decode(cdf));
        }
    }
    dec.finish()?;
    QuantizedLatent::from_vec(channels, height, width, values)
}

pub fn measured_bits(payload: &[u8]) -> u64 {
    8 * payload.len() as u64
}

/// Ideal code length of `z` under the quantized tables.
pub fn table_rate_bits(z: &QuantizedLatent, table: &CdfTable) -> f64 {
    let n = z.plane_len();
    table
        .channels
        .iter()
        .enumerate()
        .map(|(c, cdf)| z.values[c * n..(c + 1) * n].iter().map(|&v| cdf.cost_bits(v)).sum::<f64>())
        .sum()
}
