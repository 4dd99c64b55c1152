//! Absmean ternary quantization with a learnable per-matrix scale.
//!
//! A full-precision weight matrix `W` is mapped to trit codes
//!
//! ```text
//! codes = RoundClip(W / (γ + ε), −1, 1),   γ = mean(|W|)
//! ```
//!
//! and the effective weight is `W̃ = α · codes`. Rounding is
//! half-away-from-zero. The backward pass is the straight-through
//! estimator: the gradient with respect to `W̃` is handed to the master
//! weights unchanged, while `α` receives its exact gradient
//! `Σ ∂L/∂W̃ ⊙ codes`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::{gemm, Real, View, ViewMut};
use crate::tensor::Matrix;

/// Quantizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantConfig {
    /// Added to γ so an all-zero matrix quantizes to all-zero codes.
    pub epsilon: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6 }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!("epsilon must be positive, got {}", self.epsilon)))
        }
    }
}

/// Trit codes plus the scale `α`: the quantized image of a weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TernaryTensor<T> {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    alpha: T,
}

impl<T: Real> TernaryTensor<T> {
    /// Builds a tensor from explicit codes, validating every invariant.
    pub fn new(rows: usize, cols: usize, codes: Vec<i8>, alpha: T) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::Shape(format!("{} codes for a {rows}x{cols} tensor", codes.len())));
        }
        if let Some(bad) = codes.iter().find(|c| !(-1..=1).contains(*c)) {
            return Err(Error::Domain(format!("code {bad} is not a trit")));
        }
        check_alpha(alpha)?;
        Ok(Self { rows, cols, codes, alpha })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn code(&self, r: usize, c: usize) -> i8 {
        self.codes[r * self.cols + c]
    }

    /// Materializes `W̃ = α · codes`.
    pub fn effective(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, self.cols);
        self.fill_rows(0, self.rows, &mut out.data);
        out
    }

    /// Fraction of zero codes.
    pub fn sparsity(&self) -> f64 {
        if self.codes.is_empty() {
            return 0.0;
        }
        self.codes.iter().filter(|&&c| c == 0).count() as f64 / self.codes.len() as f64
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must be positive and finite, got {alpha}")))
    }
}

/// Mean absolute value of all entries.
pub fn absmean_gamma<T: Real>(w: &Matrix<T>) -> Result<T> {
    Ok(T::from_f64_lossy(absmean_f64(w)?))
}

// Accumulated in f64 so the statistic does not drift with matrix size.
fn absmean_f64<T: Real>(w: &Matrix<T>) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Domain("absmean of an empty matrix".into()));
    }
    let sum: f64 = w.data.iter().map(|x| x.abs().to_f64_lossy()).sum();
    if !sum.is_finite() {
        return Err(Error::Domain("absmean of a matrix with non-finite entries".into()));
    }
    Ok(sum / w.len() as f64)
}

/// `Clamp(round(x), a, b)` with ties rounded away from zero.
pub fn round_clip(x: f64, a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    x.round().clamp(a, b)
}

// round_clip(v, -1, 1) without the libm call: ties away from zero put the
// boundary at |v| = 0.5 exactly.
#[inline]
fn trit(v: f64) -> i8 {
    if v >= 0.5 {
        1
    } else if v <= -0.5 {
        -1
    } else {
        0
    }
}

/// Quantizes `w` to trit codes and attaches `alpha`. `w` is left untouched.
pub fn ternarize<T: Real>(w: &Matrix<T>, alpha: T, cfg: &QuantConfig) -> Result<TernaryTensor<T>> {
    cfg.validate()?;
    check_alpha(alpha)?;
    let denom = absmean_f64(w)? + cfg.epsilon;
    let codes = w.data.iter().map(|&x| trit(x.to_f64_lossy() / denom)).collect();
    Ok(TernaryTensor { rows: w.rows, cols: w.cols, codes, alpha })
}

/// Straight-through backward for `W̃ = α · codes`.
///
/// Returns `(∂L/∂W, ∂L/∂α)`: the weight gradient is `grad_wtilde` itself,
/// and the scale gradient is exact because `W̃` is linear in `α`.
pub fn ste_backward<T: Real>(grad_wtilde: &Matrix<T>, t: &TernaryTensor<T>) -> Result<(Matrix<T>, T)> {
    if grad_wtilde.shape() != (t.rows, t.cols) {
        return Err(Error::Shape(format!("gradient {:?} vs codes {:?}", grad_wtilde.shape(), (t.rows, t.cols))));
    }
    Ok((grad_wtilde.clone(), alpha_grad(&grad_wtilde.data, &t.codes)))
}

/// `Σ g_ij · codes_ij`.
pub(crate) fn alpha_grad<T: Real>(grad: &[T], codes: &[i8]) -> T {
    let mut acc = T::zero();
    for (&g, &c) in grad.iter().zip(codes) {
        match c {
            1 => acc += g,
            -1 => acc -= g,
            _ => {}
        }
    }
    acc
}

/// Draws an initial `α` uniformly from `[0.5σ, 1.5σ]`, where `σ` is the
/// standard deviation of the layer's full-precision initialization.
pub fn init_alpha<R: Rng + ?Sized>(weight_std: f64, rng: &mut R) -> f64 {
    assert!(weight_std > 0.0, "initial alpha needs a positive reference scale");
    rng.random_range(0.5 * weight_std..=1.5 * weight_std)
}

/// Anything that can produce contiguous rows of `α · codes`.
///
/// Both the in-memory [`TernaryTensor`] and the 2-bit packed form implement
/// this, so they share one tiled matrix-multiply path and therefore produce
/// bit-identical results.
pub trait TritRows<T> {
    fn out_features(&self) -> usize;
    fn in_features(&self) -> usize;
    /// Writes rows `r0..r1` of `α · codes` into `out` (row-major).
    fn fill_rows(&self, r0: usize, r1: usize, out: &mut [T]);
}

impl<T: Real> TritRows<T> for TernaryTensor<T> {
    fn out_features(&self) -> usize {
        self.rows
    }

    fn in_features(&self) -> usize {
        self.cols
    }

    fn fill_rows(&self, r0: usize, r1: usize, out: &mut [T]) {
        let codes = &self.codes[r0 * self.cols..r1 * self.cols];
        let (pos, neg) = (self.alpha, -self.alpha);
        for (o, &c) in out.iter_mut().zip(codes) {
            *o = match c {
                1 => pos,
                -1 => neg,
                _ => T::zero(),
            };
        }
    }
}

/// Weight rows dequantized per tile in [`ternary_linear`].
pub const WEIGHT_TILE_ROWS: usize = 64;

/// `x · W̃ᵀ + bias`, dequantizing at most [`WEIGHT_TILE_ROWS`] weight rows
/// at a time.
pub fn ternary_linear<T: Real, W: TritRows<T> + ?Sized>(x: &Matrix<T>, w: &W, bias: Option<&[T]>) -> Result<Matrix<T>> {
    let (m, n) = (w.out_features(), w.in_features());
    if x.cols != n {
        return Err(Error::Shape(format!("input has {} features, weights expect {n}", x.cols)));
    }
    if let Some(b) = bias {
        if b.len() != m {
            return Err(Error::Shape(format!("bias has {} entries, expected {m}", b.len())));
        }
    }
    let mut out = Matrix::zeros(x.rows, m);
    let mut tile = vec![T::zero(); WEIGHT_TILE_ROWS.min(m.max(1)) * n];
    let mut r0 = 0;
    while r0 < m {
        let r1 = (r0 + WEIGHT_TILE_ROWS).min(m);
        let rows = r1 - r0;
        let buf = &mut tile[..rows * n];
        w.fill_rows(r0, r1, buf);
        let dst = ViewMut::new(&mut out.data[r0..], x.rows, rows, m, 1);
        gemm(T::one(), x.view(), View::dense(buf, rows, n).t(), T::zero(), dst);
        r0 = r1;
    }
    if let Some(b) = bias {
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn gamma_examples() {
        // oracle: Σ|w| / count
        let w = m(&[&[1.0, -1.0], &[0.5, -0.5]]);
        let oracle = w.data.iter().map(|x: &f64| x.abs()).sum::<f64>() / 4.0;
        assert_eq!(oracle, 0.75);
        assert_eq!(absmean_gamma(&w).unwrap(), 0.75);
        assert_eq!(absmean_gamma(&Matrix::<f64>::zeros(3, 3)).unwrap(), 0.0);
        assert_eq!(absmean_gamma(&m(&[&[2.0]])).unwrap(), 2.0);
    }

    #[test]
    fn gamma_rejects_empty_and_nan() {
        assert!(matches!(absmean_gamma(&Matrix::<f32>::zeros(0, 4)), Err(Error::Domain(_))));
        let mut w = Matrix::<f32>::zeros(2, 2);
        w.data[1] = f32::NAN;
        assert!(matches!(absmean_gamma(&w), Err(Error::Domain(_))));
    }

    #[test]
    fn round_clip_examples() {
        assert_eq!(round_clip(1.33, -1.0, 1.0), 1.0);
        assert_eq!(round_clip(-0.4, -1.0, 1.0), 0.0);
        assert_eq!(round_clip(-2.63, -1.0, 1.0), -1.0);
        assert_eq!(round_clip(0.5, -1.0, 1.0), 1.0);
        assert_eq!(round_clip(-0.5, -1.0, 1.0), -1.0);
    }

    #[test]
    fn ternarize_worked_example() {
        let w = m(&[&[0.9, -0.1], &[0.05, -2.0]]);
        assert!((absmean_gamma(&w).unwrap() - 0.7625).abs() < 1e-15);
        let t = ternarize(&w, 2.0, &QuantConfig::default()).unwrap();
        assert_eq!(t.codes(), &[1, 0, 0, -1]);
        assert_eq!(t.effective().data, vec![2.0, 0.0, 0.0, -2.0]);
        // master weights untouched
        assert_eq!(w.data, vec![0.9, -0.1, 0.05, -2.0]);
    }

    #[test]
    fn ternarize_zero_and_constant() {
        let z = ternarize(&Matrix::<f64>::zeros(3, 3), 5.0, &QuantConfig::default()).unwrap();
        assert!(z.codes().iter().all(|&c| c == 0));
        for c in [0.1, 1.0, 10.0] {
            let t = ternarize(&Matrix::<f64>::filled(4, 3, c), 0.3, &QuantConfig::default()).unwrap();
            assert!(t.codes().iter().all(|&x| x == 1), "c = {c}");
        }
    }

    #[test]
    fn ternarize_rejects_bad_inputs() {
        let w = Matrix::<f32>::filled(2, 2, 1.0);
        assert!(ternarize(&w, 0.0, &QuantConfig::default()).is_err());
        assert!(ternarize(&w, f32::INFINITY, &QuantConfig::default()).is_err());
        assert!(ternarize(&w, 1.0, &QuantConfig { epsilon: 0.0 }).is_err());
        let mut bad = w.clone();
        bad.data[3] = f32::NAN;
        assert!(ternarize(&bad, 1.0, &QuantConfig::default()).is_err());
    }

    #[test]
    fn ste_backward_examples() {
        let t = TernaryTensor::new(2, 2, vec![1, 0, 0, -1], 2.0).unwrap();
        let g = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (gw, ga) = ste_backward(&g, &t).unwrap();
        assert_eq!(gw, g);
        assert_eq!(ga, -3.0);

        let (gw, ga) = ste_backward(&Matrix::zeros(2, 2), &t).unwrap();
        assert!(gw.data.iter().all(|&x| x == 0.0));
        assert_eq!(ga, 0.0);

        let zeros = TernaryTensor::new(2, 2, vec![0; 4], 1.0).unwrap();
        assert_eq!(ste_backward(&g, &zeros).unwrap().1, 0.0);
        assert!(ste_backward(&Matrix::zeros(2, 3), &t).is_err());
    }

    #[test]
    fn tensor_constructor_validates() {
        assert!(TernaryTensor::<f32>::new(1, 2, vec![2, 0], 1.0).is_err());
        assert!(TernaryTensor::<f32>::new(1, 2, vec![1], 1.0).is_err());
        assert!(TernaryTensor::<f32>::new(1, 1, vec![1], -1.0).is_err());
    }

    #[test]
    fn tiled_linear_matches_dense_for_many_tiles() {
        let rows = 2 * WEIGHT_TILE_ROWS + 7;
        let codes: Vec<i8> = (0..rows * 5).map(|i| (i % 3) as i8 - 1).collect();
        let t = TernaryTensor::new(rows, 5, codes, 0.25f64).unwrap();
        let x = Matrix::from_vec(3, 5, (0..15).map(|i| i as f64 * 0.1 - 0.7).collect()).unwrap();
        let bias: Vec<f64> = (0..rows).map(|i| i as f64).collect();
        let y = ternary_linear(&x, &t, Some(&bias)).unwrap();
        let w = t.effective();
        for b in 0..3 {
            for (j, &bj) in bias.iter().enumerate() {
                let want: f64 = (0..5).map(|k| x.get(b, k) * w.get(j, k)).sum::<f64>() + bj;
                assert!((y.get(b, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_alpha_range() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let a = init_alpha(0.2, &mut rng);
            assert!((0.1..=0.3).contains(&a));
        }
    }

    #[test]
    fn trit_agrees_with_round_clip_at_ties() {
        let half_below = 0.5f64.next_down();
        for v in [0.0, -0.0, 0.5, -0.5, half_below, -half_below, 1.5, -2.5, 1e300, -1e-300, 0.5f64.next_up()] {
            assert_eq!(f64::from(trit(v)), round_clip(v, -1.0, 1.0), "v = {v:e}");
        }
    }

    proptest! {
        #[test]
        fn trit_agrees_with_round_clip(v in -4.0f64..4.0) {
            prop_assert_eq!(f64::from(trit(v)), round_clip(v, -1.0, 1.0));
        }

        #[test]
        fn codes_are_sign_preserving_trits(
            vals in proptest::collection::vec(-5.0f64..5.0, 1..64),
            alpha in 0.01f64..3.0,
        ) {
            let n = vals.len();
            let w = Matrix::from_vec(1, n, vals).unwrap();
            let t = ternarize(&w, alpha, &QuantConfig::default()).unwrap();
            for (c, x) in t.codes().iter().zip(&w.data) {
                prop_assert!((-1..=1).contains(c));
                if *c != 0 {
                    prop_assert_eq!(f64::from(*c).signum(), x.signum());
                }
            }
            prop_assert_eq!(t.alpha(), alpha);
        }
    }
}
