use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::{QuantizedLatent, Tensor3};

/// Rate estimates never use a probability below this, matching the 16-bit
/// frequency resolution of the range coder.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;

/// Factorized prior: one zero-mean discretized logistic per latent channel.
///
/// `pmf(v) = F(v + 1/2) - F(v - 1/2)` with `F(t) = 1 / (1 + exp(-t / s_c))`.
/// Scales are stored as logarithms so that gradient steps keep them positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyModel {
    pub log_scales: Vec<f64>,
}

#[inline]
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sigmoid_prime(t: f64) -> f64 {
    let s = sigmoid(t);
    s * (1.0 - s)
}

impl EntropyModel {
    pub fn new(channels: usize, initial_scale: f64) -> Self {
        assert!(initial_scale > 0.0);
        Self {
            log_scales: vec![initial_scale.ln(); channels],
        }
    }

    pub fn from_scales(scales: &[f64]) -> Result<Self> {
        if let Some(s) = scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("logistic scale {s} must be positive")));
        }
        Ok(Self {
            log_scales: scales.iter().map(|s| s.ln()).collect(),
        })
    }

    pub fn channels(&self) -> usize {
        self.log_scales.len()
    }

    #[inline]
    pub fn scale(&self, channel: usize) -> f64 {
        self.log_scales[channel].exp()
    }

    /// Logistic CDF of channel `c` at `t`.
    pub fn cdf(&self, channel: usize, t: f64) -> f64 {
        sigmoid(t / self.scale(channel))
    }

    /// Discretized pmf. Evaluated on the negative half-line, where both
    /// sigmoids are small, to avoid cancellation in the tails.
    pub fn pmf(&self, channel: usize, v: f64) -> f64 {
        let s = self.scale(channel);
        let m = -v.abs();
        sigmoid((m + 0.5) / s) - sigmoid((m - 0.5) / s)
    }

    /// Probability mass outside `[symbol_min, symbol_max]`.
    pub fn escape_mass(&self, channel: usize, symbol_min: i32, symbol_max: i32) -> f64 {
        let lo = self.cdf(channel, symbol_min as f64 - 0.5);
        let hi = 1.0 - self.cdf(channel, symbol_max as f64 + 0.5);
        lo + hi
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.channels() {
            return Err(Error::shape(format!(
                "entropy model has {} channels, latent has {channels}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Rate of a (possibly noisy, real-valued) latent and its gradients with
    /// respect to the latent values and the log-scales.
    pub fn rate_bits_with_grad(&self, y: &Tensor3) -> Result<(f64, Tensor3, Vec<f64>)> {
        self.check(y.channels)?;
        let ln2 = std::f64::consts::LN_2;
        let mut bits = 0.0;
        let mut dy = Tensor3::zeros(y.channels, y.height, y.width);
        let mut dlog = vec![0.0; y.channels];
        for c in 0..y.channels {
            let s = self.scale(c);
            let src = y.plane(c);
            let dst = dy.plane_mut(c);
            for (v, d) in src.iter().zip(dst.iter_mut()) {
                let m = -v.abs();
                let a = (m + 0.5) / s;
                let b = (m - 0.5) / s;
                let p = sigmoid(a) - sigmoid(b);
                if p > PMF_FLOOR {
                    bits -= p.log2();
                    let dbits_dp = -1.0 / (p * ln2);
                    let dp_dm = (sigmoid_prime(a) - sigmoid_prime(b)) / s;
                    // m = -|v|
                    *d = dbits_dp * dp_dm * -v.signum();
                    if *v == 0.0 {
                        *d = 0.0;
                    }
                    dlog[c] += dbits_dp * (-a * sigmoid_prime(a) + b * sigmoid_prime(b));
                } else {
                    bits += 16.0;
                }
            }
        }
        Ok((bits, dy, dlog))
    }
}

impl Parameterized for EntropyModel {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.log_scales]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.log_scales]
    }
}

/// `-sum log2 pmf(z_i)` with the pmf floored at 2^-16.
pub fn estimate_rate_bits(z: &QuantizedLatent, em: &EntropyModel) -> Result<f64> {
    em.check(z.channels)?;
    let n = z.plane_len();
    let mut bits = 0.0;
    for c in 0..z.channels {
        for &v in &z.values[c * n..(c + 1) * n] {
            bits -= em.pmf(c, v as f64).max(PMF_FLOOR).log2();
        }
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_zero_symbol_unit_scale() {
        // Closed form: F(0.5) - F(-0.5) = tanh(0.25)
        let expected_p = (0.25f64).tanh();
        let em = EntropyModel::new(1, 1.0);
        assert!((em.pmf(0, 0.0) - expected_p).abs() < 1e-15);
        assert!((expected_p - 0.24492).abs() < 1e-5);
        let z = QuantizedLatent::from_vec(1, 1, 1, vec![0]).unwrap();
        let bits = estimate_rate_bits(&z, &em).unwrap();
        assert!((bits + expected_p.log2()).abs() < 1e-12);
        assert!((bits - 2.0296).abs() < 1e-4);
    }

    #[test]
    fn pmf_plus_escape_sums_to_one() {
        for s in [1e-3, 0.3, 1.0, 7.5, 40.0, 300.0] {
            let em = EntropyModel::new(1, s);
            let total: f64 = (-127..=127).map(|v| em.pmf(0, v as f64)).sum::<f64>()
                + em.escape_mass(0, -127, 127);
            assert!((total - 1.0).abs() < 1e-9, "scale {s}: {total}");
        }
    }

    #[test]
    fn rate_is_additive() {
        let em = EntropyModel::from_scales(&[0.7, 2.0]).unwrap();
        let a = QuantizedLatent::from_vec(2, 1, 2, vec![0, 3, -1, 40]).unwrap();
        let b = QuantizedLatent::from_vec(2, 1, 1, vec![5, -2]).unwrap();
        let ab = QuantizedLatent::from_vec(2, 1, 3, vec![0, 3, 5, -1, 40, -2]).unwrap();
        let sum = estimate_rate_bits(&a, &em).unwrap() + estimate_rate_bits(&b, &em).unwrap();
        assert!((estimate_rate_bits(&ab, &em).unwrap() - sum).abs() < 1e-9);
    }

    #[test]
    fn floor_caps_tail_cost() {
        let em = EntropyModel::new(1, 0.1);
        let z = QuantizedLatent::from_vec(1, 1, 1, vec![100]).unwrap();
        assert_eq!(estimate_rate_bits(&z, &em).unwrap(), 16.0);
    }

    #[test]
    fn rate_gradient_matches_finite_differences() {
        let em = EntropyModel::from_scales(&[0.8, 3.0]).unwrap();
        let y = Tensor3::from_vec(2, 1, 3, vec![0.3, -1.7, 2.2, 0.0, 4.1, -0.6]).unwrap();
        let (_, dy, dlog) = em.rate_bits_with_grad(&y).unwrap();
        let f = |em: &EntropyModel, y: &Tensor3| em.rate_bits_with_grad(y).unwrap().0;
        let h = 1e-6;
        for i in [0, 1, 2, 4, 5] {
            let mut p = y.clone();
            p.data[i] += h;
            let mut m = y.clone();
            m.data[i] -= h;
            let fd = (f(&em, &p) - f(&em, &m)) / (2.0 * h);
            assert!((fd - dy.data[i]).abs() < 1e-5, "{i}: {fd} vs {}", dy.data[i]);
        }
        for c in 0..2 {
            let mut p = em.clone();
            p.log_scales[c] += h;
            let mut m = em.clone();
            m.log_scales[c] -= h;
            let fd = (f(&p, &y) - f(&m, &y)) / (2.0 * h);
            assert!((fd - dlog[c]).abs() < 1e-5);
        }
    }
}
