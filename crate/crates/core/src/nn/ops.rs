use crate::tensor::Tensor3;

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &mut Tensor3) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through [`leaky_relu`] given the layer's *output*; the sign of the
/// output equals the sign of the input.
pub fn leaky_relu_backward(out: &Tensor3, grad: &mut Tensor3) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub fn upsample_nearest2(x: &Tensor3) -> Tensor3 {
    let (c, h, w) = x.shape();
    let mut out = Tensor3::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x.at(ch, y, xx);
                let base = (ch * 2 * h + 2 * y) * 2 * w + 2 * xx;
                out.data[base] = v;
                out.data[base + 1] = v;
                out.data[base + 2 * w] = v;
                out.data[base + 2 * w + 1] = v;
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (c, h2, w2) = grad_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let base = (ch * h2 + 2 * y) * w2 + 2 * xx;
                let g = &grad_out.data;
                *out.at_mut(ch, y, xx) = g[base] + g[base + 1] + g[base + w2] + g[base + w2 + 1];
            }
        }
    }
    out
}

/// Depth-to-space: `(4c, h, w) -> (c, 2h, 2w)`; input channel `4c + 2dy + dx`
/// lands at offset `(dy, dx)` of each output 2x2 cell.
pub fn pixel_shuffle2(x: &Tensor3) -> Tensor3 {
    let (c4, h, w) = x.shape();
    assert!(c4 % 4 == 0, "pixel shuffle needs a multiple of 4 channels");
    let c = c4 / 4;
    let mut out = Tensor3::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for sub in 0..4 {
            let (dy, dx) = (sub / 2, sub % 2);
            let src = x.plane(4 * ch + sub);
            for y in 0..h {
                for xx in 0..w {
                    *out.at_mut(ch, 2 * y + dy, 2 * xx + dx) = src[y * w + xx];
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle2_backward(grad_out: &Tensor3) -> Tensor3 {
    let (c, h2, w2) = grad_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor3::zeros(4 * c, h, w);
    for ch in 0..c {
        for sub in 0..4 {
            let (dy, dx) = (sub / 2, sub % 2);
            let dst = out.plane_mut(4 * ch + sub);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = grad_out.at(ch, 2 * y + dy, 2 * xx + dx);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::from_vec(c, h, w, (0..c * h * w).map(|i| i as f64 * 0.37 - 3.0).collect())
            .unwrap()
    }

    fn dot(a: &Tensor3, b: &Tensor3) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    // <A x, y> = <x, A^T y> for the two linear resampling maps.
    #[test]
    fn resampling_backward_is_adjoint() {
        let x = ramp(8, 3, 5);
        let up = upsample_nearest2(&x);
        let y = ramp(8, 6, 10);
        assert!((dot(&up, &y) - dot(&x, &upsample_nearest2_backward(&y))).abs() < 1e-9);

        let ps = pixel_shuffle2(&x);
        let y2 = ramp(2, 6, 10);
        assert!((dot(&ps, &y2) - dot(&x, &pixel_shuffle2_backward(&y2))).abs() < 1e-9);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Tensor3::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle2(&x);
        assert_eq!(y.shape(), (1, 2, 2));
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
