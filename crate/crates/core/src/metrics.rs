//! Quality metrics, the distortion used by online adaptation, and RD reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::mse;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor3};

pub const PSNR_CAP_DB: f64 = 100.0;

/// Standard five-scale weights.
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Distortion target of online adaptation; lower is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Msssim,
}

impl Metric {
    pub fn id(self) -> u8 {
        match self {
            Metric::Mse => 0,
            Metric::Msssim => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Metric::Mse),
            1 => Some(Metric::Msssim),
            _ => None,
        }
    }
}

pub fn psnr(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, x_hat)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP_DB)
}

/// Magnified MS-SSIM, `-10 log10(1 - msssim)`, capped like PSNR.
pub fn msssim_db(msssim: f64) -> f64 {
    if msssim >= 1.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * (1.0 - msssim).log10()).min(PSNR_CAP_DB)
}

pub fn msssim(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    Ok(msssim_impl(x.as_tensor(), x_hat.as_tensor(), false)?.0)
}

/// MS-SSIM and its gradient with respect to `x_hat`.
pub fn msssim_with_grad(x: &ImageTensor, x_hat: &ImageTensor) -> Result<(f64, Tensor3)> {
    let (v, g) = msssim_impl(x.as_tensor(), x_hat.as_tensor(), true)?;
    Ok((v, g.expect("requested")))
}

/// `mse` or `1 - MS-SSIM`.
pub fn distortion(x: &ImageTensor, x_hat: &ImageTensor, metric: Metric) -> Result<f64> {
    match metric {
        Metric::Mse => mse(x, x_hat),
        Metric::Msssim => Ok(1.0 - msssim(x, x_hat)?),
    }
}

/// Distortion and its gradient with respect to `x_hat`.
pub fn distortion_with_grad(x: &ImageTensor, x_hat: &ImageTensor, metric: Metric) -> Result<(f64, Tensor3)> {
    match metric {
        Metric::Mse => {
            let d = mse(x, x_hat)?;
            let (a, b) = (x.as_tensor(), x_hat.as_tensor());
            let n = a.data.len() as f64;
            let mut g = b.clone();
            for (gv, av) in g.data.iter_mut().zip(&a.data) {
                *gv = 2.0 * (*gv - av) / n;
            }
            Ok((d, g))
        }
        Metric::Msssim => {
            let (v, mut g) = msssim_with_grad(x, x_hat)?;
            g.data.iter_mut().for_each(|v| *v = -*v);
            Ok((1.0 - v, g))
        }
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Number of scales at which an 11-tap valid window still fits.
pub fn msssim_scales(height: usize, width: usize) -> usize {
    let mut m = 0;
    let (mut h, mut w) = (height, width);
    while m < MSSSIM_WEIGHTS.len() && h.min(w) >= WINDOW {
        m += 1;
        h /= 2;
        w /= 2;
    }
    m
}

/// Separable valid Gaussian filter: `(h, w) -> (h - 10, w - 10)`.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (k, gk) in g.iter().enumerate() {
            let src_row = &tmp[(y + k) * ow..(y + k + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += gk * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(grad: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        let src = &grad[y * ow..(y + 1) * ow];
        for (k, gk) in g.iter().enumerate() {
            let dst = &mut tmp[(y + k) * ow..(y + k + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += gk * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, gk) in g.iter().enumerate() {
                out[y * w + x + k] += gk * v;
            }
        }
    }
    out
}

fn downsample2(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
        }
    }
    out
}

fn downsample2_adjoint(grad: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for y in 0..oh {
        for x in 0..ow {
            let g = 0.25 * grad[y * ow + x];
            let i = 2 * y * w + 2 * x;
            acc[i] += g;
            acc[i + 1] += g;
            acc[i + w] += g;
            acc[i + w + 1] += g;
        }
    }
}

struct ScaleStats {
    h: usize,
    w: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

/// Per-channel MS-SSIM with the coarsest scale contributing `mean(l * cs)`
/// and finer scales `mean(cs)`; channels are averaged.
fn msssim_impl(a: &Tensor3, b: &Tensor3, want_grad: bool) -> Result<(f64, Option<Tensor3>)> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.height.min(a.width) < 16 {
        return Err(Error::invalid(format!(
            "MS-SSIM needs at least 16x16 pixels, got {}x{}",
            a.height, a.width
        )));
    }
    let g = gaussian_window();
    let m = msssim_scales(a.height, a.width);
    let wsum: f64 = MSSSIM_WEIGHTS[..m].iter().sum();
    let weights: Vec<f64> = MSSSIM_WEIGHTS[..m].iter().map(|w| w / wsum).collect();
    let channels = a.channels;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor3::zeros(channels, a.height, a.width));

    for c in 0..channels {
        let mut stats: Vec<ScaleStats> = Vec::with_capacity(m);
        let (mut h, mut w) = (a.height, a.width);
        let mut xs = a.plane(c).to_vec();
        let mut ys = b.plane(c).to_vec();
        for j in 0..m {
            if j > 0 {
                xs = downsample2(&xs, h, w);
                ys = downsample2(&ys, h, w);
                h /= 2;
                w /= 2;
            }
            let sq = |v: &[f64], u: &[f64]| v.iter().zip(u).map(|(p, q)| p * q).collect::<Vec<_>>();
            let mu_x = filter_valid(&xs, h, w, &g);
            let mu_y = filter_valid(&ys, h, w, &g);
            let exx = filter_valid(&sq(&xs, &xs), h, w, &g);
            let eyy = filter_valid(&sq(&ys, &ys), h, w, &g);
            let exy = filter_valid(&sq(&xs, &ys), h, w, &g);
            let n = mu_x.len();
            let mut var_x = vec![0.0; n];
            let mut var_y = vec![0.0; n];
            let mut cov = vec![0.0; n];
            for i in 0..n {
                var_x[i] = exx[i] - mu_x[i] * mu_x[i];
                var_y[i] = eyy[i] - mu_y[i] * mu_y[i];
                cov[i] = exy[i] - mu_x[i] * mu_y[i];
            }
            stats.push(ScaleStats {
                h,
                w,
                x: xs.clone(),
                y: ys.clone(),
                mu_x,
                mu_y,
                var_x,
                var_y,
                cov,
            });
        }

        let values: Vec<f64> = stats
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let n = s.mu_x.len();
                let mut acc = 0.0;
                for i in 0..n {
                    let cs = (2.0 * s.cov[i] + C2) / (s.var_x[i] + s.var_y[i] + C2);
                    if j + 1 == m {
                        let l = (2.0 * s.mu_x[i] * s.mu_y[i] + C1)
                            / (s.mu_x[i] * s.mu_x[i] + s.mu_y[i] * s.mu_y[i] + C1);
                        acc += l * cs;
                    } else {
                        acc += cs;
                    }
                }
                acc / n as f64
            })
            .collect();
        let value: f64 = values
            .iter()
            .zip(&weights)
            .map(|(v, w)| v.max(0.0).powf(*w))
            .product();
        total += value;

        let Some(grad) = grad.as_mut() else { continue };
        if values.iter().any(|v| *v <= 0.0) {
            continue;
        }
        let mut carry: Option<Vec<f64>> = None;
        for j in (0..m).rev() {
            let s = &stats[j];
            let n = s.mu_x.len();
            let dv = value * weights[j] / values[j] / channels as f64 / n as f64;
            let mut g_mu = vec![0.0; n];
            let mut g_eyy = vec![0.0; n];
            let mut g_exy = vec![0.0; n];
            for i in 0..n {
                let num = 2.0 * s.cov[i] + C2;
                let den = s.var_x[i] + s.var_y[i] + C2;
                let cs = num / den;
                let (mx, my) = (s.mu_x[i], s.mu_y[i]);
                let (gcs, gl) = if j + 1 == m {
                    let p = 2.0 * mx * my + C1;
                    let q = mx * mx + my * my + C1;
                    (dv * p / q, dv * cs)
                } else {
                    (dv, 0.0)
                };
                let d_cov = gcs * 2.0 / den;
                let d_var_y = -gcs * num / (den * den);
                g_exy[i] = d_cov;
                g_eyy[i] = d_var_y;
                g_mu[i] = d_cov * -mx + d_var_y * -2.0 * my;
                if gl != 0.0 {
                    let p = 2.0 * mx * my + C1;
                    let q = mx * mx + my * my + C1;
                    g_mu[i] += gl * (2.0 * mx / q - p * 2.0 * my / (q * q));
                }
            }
            let a_mu = filter_valid_adjoint(&g_mu, s.h, s.w, &g);
            let a_eyy = filter_valid_adjoint(&g_eyy, s.h, s.w, &g);
            let a_exy = filter_valid_adjoint(&g_exy, s.h, s.w, &g);
            let mut dy: Vec<f64> = (0..s.h * s.w)
                .map(|i| a_mu[i] + 2.0 * s.y[i] * a_eyy[i] + s.x[i] * a_exy[i])
                .collect();
            if let Some(coarser) = carry.take() {
                downsample2_adjoint(&coarser, s.h, s.w, &mut dy);
            }
            carry = Some(dy);
        }
        grad.plane_mut(c).copy_from_slice(&carry.expect("at least one scale"));
    }
    Ok((total / channels as f64, grad))
}

/// One operating point of an RD curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    pub msssim_db: f64,
    pub oml_iters: usize,
    pub encode_time: f64,
}

pub const RD_COLUMNS: [&str; 7] = ["lambda", "bpp", "psnr", "msssim", "msssim_db", "oml_iters", "encode_time"];

/// Formats with six significant digits, `%g` style.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-5..6).contains(&exp) {
        format!("{}e{}", trim(mant.to_string()), exp)
    } else {
        trim(format!("{:.*}", (5 - exp).max(0) as usize, x))
    }
}

/// Writes one row per point, sorted by bpp ascending.
pub fn rd_report(points: &[RdPoint], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::invalid("RD report needs at least one point"));
    }
    for p in points {
        if !(p.bpp > 0.0) || !(0.0..=1.0).contains(&p.msssim) {
            return Err(Error::invalid(format!("invalid RD point {p:?}")));
        }
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RD_COLUMNS)?;
    for p in &sorted {
        w.write_record([
            format_sig6(p.lambda),
            format_sig6(p.bpp),
            format_sig6(p.psnr),
            format_sig6(p.msssim),
            format_sig6(p.msssim_db),
            p.oml_iters.to_string(),
            format_sig6(p.encode_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rd_report(path: &Path) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(RD_COLUMNS) {
        return Err(Error::invalid(format!("unexpected RD columns {headers:?}")));
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
