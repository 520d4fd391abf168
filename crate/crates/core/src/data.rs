//! Crop sampling and a procedural texture corpus for desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::pad_to;
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor3};

/// Uniformly placed `size x size` crop; images smaller than the crop are
/// edge-padded first.
pub fn random_crop<R: Rng>(image: &ImageTensor, size: usize, rng: &mut R) -> ImageTensor {
    let padded = pad_to(image, size, size);
    let y0 = rng.random_range(0..=padded.height() - size);
    let x0 = rng.random_range(0..=padded.width() - size);
    padded.crop(y0, x0, size, size)
}

/// Splits off the last `fraction` of the images (at least one) as a held-out
/// set. A single image serves as both splits.
pub fn split_holdout(dataset: &[ImageTensor], fraction: f64) -> Result<(&[ImageTensor], &[ImageTensor])> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.len() == 1 {
        return Ok((dataset, dataset));
    }
    let n_hold = ((dataset.len() as f64 * fraction).round() as usize).clamp(1, dataset.len() - 1);
    let cut = dataset.len() - n_hold;
    Ok((&dataset[..cut], &dataset[cut..]))
}

/// Smooth colour gradients overlaid with oriented gratings and flat shapes.
pub fn texture_corpus(count: usize, height: usize, width: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| texture(&mut rng, height, width)).collect()
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn texture<R: Rng>(rng: &mut R, height: usize, width: usize) -> ImageTensor {
    let mut t = Tensor3::zeros(3, height, width);
    let (c0, c1) = (random_color(rng), random_color(rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let extent = (height.max(width)) as f64;

    struct Grating {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let gratings: Vec<Grating> = (0..rng.random_range(1..=3))
        .map(|_| {
            let f = rng.random_range(0.01..0.08) * std::f64::consts::TAU;
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let base = rng.random_range(0.05..0.2);
            Grating {
                fx: f * a.cos(),
                fy: f * a.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [
                    base * rng.random_range(0.5..1.0),
                    base * rng.random_range(0.5..1.0),
                    base * rng.random_range(0.5..1.0),
                ],
            }
        })
        .collect();

    for y in 0..height {
        for x in 0..width {
            let u = ((x as f64 * dx + y as f64 * dy) / extent + 1.0) * 0.5;
            let u = u.clamp(0.0, 1.0);
            for c in 0..3 {
                let mut v = c0[c] * (1.0 - u) + c1[c] * u;
                for g in &gratings {
                    v += g.amp[c] * (g.fx * x as f64 + g.fy * y as f64 + g.phase).sin();
                }
                *t.at_mut(c, y, x) = v;
            }
        }
    }

    for _ in 0..rng.random_range(0..4) {
        let color = random_color(rng);
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let r = rng.random_range(0.08..0.3) * extent;
        let disc = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    ry * ry + rx * rx < r * r
                } else {
                    ry.abs() < r && rx.abs() < 0.6 * r
                };
                if inside {
                    for (c, col) in color.iter().enumerate() {
                        *t.at_mut(c, y, x) = *col;
                    }
                }
            }
        }
    }

    for v in &mut t.data {
        *v += rng.random_range(-0.01..0.01);
    }
    ImageTensor::from_tensor_clamped(t).expect("clamped texture")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_seeded_and_in_range() {
        let a = texture_corpus(3, 40, 24, 11);
        let b = texture_corpus(3, 40, 24, 11);
        assert_eq!(a, b);
        assert_eq!((a[0].height(), a[0].width()), (40, 24));
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn crop_pads_small_images() {
        let img = ImageTensor::filled(5, 7, [0.1, 0.2, 0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_crop(&img, 16, &mut rng);
        assert_eq!((c.height(), c.width()), (16, 16));
    }

    #[test]
    fn holdout_split() {
        let d = texture_corpus(10, 8, 8, 1);
        let (tr, ho) = split_holdout(&d, 0.2).unwrap();
        assert_eq!((tr.len(), ho.len()), (8, 2));
        assert!(split_holdout(&[], 0.2).is_err());
        let (tr, ho) = split_holdout(&d[..1], 0.2).unwrap();
        assert_eq!((tr.len(), ho.len()), (1, 1));
    }
}
