//! Elementwise and row-wise building blocks with their backward passes.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Image, Matrix};

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu / dx.
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `y_i = gain_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rms_norm<T: Real>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() {
        return Err(Error::Shape(format!("input {} vs gain {}", x.len(), gain.len())));
    }
    let inv = inv_rms(x, eps);
    Ok(x.iter().zip(gain).map(|(&v, &g)| g * v * inv).collect())
}

pub(crate) fn inv_rms<T: Real>(x: &[T], eps: T) -> T {
    let ms = x.iter().map(|&v| v * v).sum::<T>() / T::from_usize(x.len()).unwrap();
    T::one() / (ms + eps).sqrt()
}

/// Row-wise RMS norm. Returns the output and each row's `1/rms`.
pub(crate) fn rms_rows<T: Real>(x: &Matrix<T>, gain: &[T], eps: T) -> (Matrix<T>, Vec<T>) {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut invs = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let inv = inv_rms(row, eps);
        for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = g * v * inv;
        }
        invs.push(inv);
    }
    (out, invs)
}

/// Backward of [`rms_rows`]: accumulates the gain gradient and returns
/// the input gradient.
pub(crate) fn rms_rows_backward<T: Real>(
    x: &Matrix<T>,
    gain: &[T],
    invs: &[T],
    dy: &Matrix<T>,
    dgain: &mut [T],
) -> Matrix<T> {
    let d = T::from_usize(x.cols).unwrap();
    let mut dx = Matrix::zeros(x.rows, x.cols);
    for (r, &inv) in invs.iter().enumerate().take(x.rows) {
        let (xr, dyr) = (x.row(r), dy.row(r));
        let mut dot = T::zero();
        for i in 0..x.cols {
            dgain[i] += dyr[i] * xr[i] * inv;
            dot += dyr[i] * gain[i] * xr[i];
        }
        let k = inv * inv * inv * dot / d;
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * dyr[i] * gain[i] - k * xr[i];
        }
    }
    dx
}

/// Row-wise layer norm without affine parameters. Returns the normalized
/// rows and each row's `1/std`.
pub(crate) fn layer_norm_rows<T: Real>(x: &Matrix<T>, eps: T) -> (Matrix<T>, Vec<T>) {
    let d = T::from_usize(x.cols).unwrap();
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut invs = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        invs.push(inv);
    }
    (out, invs)
}

pub(crate) fn layer_norm_rows_backward<T: Real>(normed: &Matrix<T>, invs: &[T], dy: &Matrix<T>) -> Matrix<T> {
    let d = T::from_usize(normed.cols).unwrap();
    let mut dx = Matrix::zeros(normed.rows, normed.cols);
    for (r, &inv) in invs.iter().enumerate().take(normed.rows) {
        let (n, g) = (normed.row(r), dy.row(r));
        let mean_g = g.iter().copied().sum::<T>() / d;
        let mean_gn = g.iter().zip(n).map(|(&a, &b)| a * b).sum::<T>() / d;
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (g[i] - mean_g - n[i] * mean_gn);
        }
    }
    dx
}

/// In-place numerically stable softmax over each row.
pub(crate) fn softmax_rows_in_place<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Splits an image into non-overlapping `p × p` patches.
///
/// Token `n = gy·(W/p) + gx`; within a token the feature index is
/// `(py·p + px)·C + c`.
pub fn patchify<T: Real>(img: &Image<T>, p: usize) -> Result<Matrix<T>> {
    let (c, h, w) = img.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let mut out = Matrix::zeros(gh * gw, dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        row[(py * p + px) * c + ch] = img.get(ch, gy * p + py, gx * p + px);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Matrix<T>, channels: usize, h: usize, w: usize, p: usize) -> Result<Image<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.rows != gh * gw || tokens.cols != p * p * channels {
        return Err(Error::Shape(format!(
            "{}x{} tokens do not tile a {channels}x{h}x{w} image",
            tokens.rows, tokens.cols
        )));
    }
    let mut img = Image::zeros(channels, h, w);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = tokens.row(gy * gw + gx);
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..channels {
                        img.set(ch, gy * p + py, gx * p + px, row[(py * p + px) * channels + ch]);
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_norm_examples() {
        let ones = vec![1.0f64; 8];
        let y = rms_norm(&ones, &ones, 1e-12).unwrap();
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-10));
        let z = rms_norm(&[0.0f64; 5], &[1.0; 5], 1e-5).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 5.2).collect();
        let y = rms_norm(&x, &[1.0; 64], 1e-5).unwrap();
        let ms = y.iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!((ms - 1.0).abs() < 1e-5, "{ms}");
        assert!(rms_norm(&x, &[1.0; 3], 1e-5).is_err());
    }

    #[test]
    fn patchify_shapes() {
        let img = Image::from_vec(3, 16, 16, (0..768).map(|i| i as f32).collect()).unwrap();
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.shape(), (64, 12));
        assert_eq!(unpatchify(&t, 3, 16, 16, 2).unwrap(), img);
        let px = patchify(&img, 1).unwrap();
        assert_eq!(px.shape(), (256, 3));
        assert_eq!(px.row(17), &[img.get(0, 1, 1), img.get(1, 1, 1), img.get(2, 1, 1)]);
        assert!(patchify(&img, 3).is_err());
        assert!(unpatchify(&t, 3, 16, 16, 4).is_err());
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-7 + 1e-6 * fd.abs(), "i={i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn rms_and_layer_norm_backward_match_finite_differences() {
        let x = Matrix::from_vec(2, 5, vec![0.3, -1.2, 0.8, 2.0, -0.1, 1.0, 0.5, -0.5, 0.25, 3.0]).unwrap();
        let gain = vec![1.0, 0.5, -2.0, 1.5, 0.7];
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.77).sin()).collect();
        let dy = Matrix::from_vec(2, 5, w.clone()).unwrap();

        let loss_rms = |v: &[f64]| {
            let m = Matrix::from_vec(2, 5, v.to_vec()).unwrap();
            rms_rows(&m, &gain, 1e-5).0.data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, inv) = rms_rows(&x, &gain, 1e-5);
        let mut dg = vec![0.0; 5];
        let dx = rms_rows_backward(&x, &gain, &inv, &dy, &mut dg);
        fd_check(loss_rms, &x.data, &dx.data);

        let loss_ln = |v: &[f64]| {
            let m = Matrix::from_vec(2, 5, v.to_vec()).unwrap();
            layer_norm_rows(&m, 1e-6).0.data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (n, inv) = layer_norm_rows(&x, 1e-6);
        let dx = layer_norm_rows_backward(&n, &inv, &dy);
        fd_check(loss_ln, &x.data, &dx.data);
    }

    #[test]
    fn silu_grad_matches_finite_difference() {
        for &x in &[-4.0f64, -0.3, 0.0, 0.7, 5.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
