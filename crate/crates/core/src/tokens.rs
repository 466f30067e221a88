//! Token matrices, general-position predicates and the grid quantizer.
//!
//! A [`TokenMatrix`] is a `d x n` real array whose columns are the tokens.
//! Storage is column-major (one token is a contiguous slice).

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::{normal, LabRng};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    values: DMatrix<f64>,
}

impl TokenMatrix {
    /// Wraps a matrix, rejecting empty shapes and non-finite entries.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(shape(format!(
                "token matrix must be at least 1x1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("token matrix entry {pos} is not finite")));
        }
        Ok(Self { values })
    }

    pub fn zeros(d: usize, n: usize) -> Self {
        assert!(d >= 1 && n >= 1, "token matrix must be at least 1x1");
        Self { values: DMatrix::zeros(d, n) }
    }

    pub fn from_row_major(d: usize, n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != d * n {
            return Err(shape(format!("expected {} values for {d}x{n}, got {}", d * n, data.len())));
        }
        Self::new(DMatrix::from_row_slice(d, n, data))
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.len();
        let d = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != d) {
            return Err(shape("columns have differing lengths"));
        }
        let flat: Vec<f64> = columns.iter().flatten().copied().collect();
        Self::new(DMatrix::from_column_slice(d, n, &flat))
    }

    /// i.i.d. standard-normal entries.
    pub fn random_normal(d: usize, n: usize, rng: &mut LabRng) -> Self {
        Self::zeros(d, n).map(|_| normal(rng))
    }

    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, i: usize) -> DVectorView<'_, f64> {
        self.values.column(i)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.values.transpose().as_slice().to_vec()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self { values: self.values.map(&mut f) }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_distance(&self, other: &TokenMatrix) -> f64 {
        (&self.values - &other.values).norm()
    }

    /// Smallest Euclidean distance between two distinct columns
    /// (`+inf` when `n == 1`).
    pub fn min_token_gap(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.n() {
            for j in (i + 1)..self.n() {
                best = best.min((self.column(i) - self.column(j)).norm());
            }
        }
        best
    }

    pub fn set_column(&mut self, i: usize, col: &DVector<f64>) {
        self.values.set_column(i, col);
    }
}

#[derive(Serialize, Deserialize)]
struct TokenMatrixRepr {
    d: usize,
    n: usize,
    values: Vec<f64>,
}

impl Serialize for TokenMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TokenMatrixRepr { d: self.d(), n: self.n(), values: self.to_row_major() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenMatrix {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = TokenMatrixRepr::deserialize(de)?;
        TokenMatrix::from_row_major(repr.d, repr.n, &repr.values).map_err(serde::de::Error::custom)
    }
}

/// Scale-relative distinctness tolerance: `1e-8 * (1 + max |entry|)`.
pub fn default_general_position_tol(x: &TokenMatrix) -> f64 {
    1e-8 * (1.0 + x.max_abs())
}

/// True iff every pair of distinct tokens is more than `tol` apart.
pub fn is_general_position(x: &TokenMatrix, tol: f64) -> bool {
    x.min_token_gap() > tol
}

/// Parameters of the staircase map `h_{alpha, delta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    delta: f64,
    alpha: f64,
}

impl QuantizerSpec {
    pub fn new(delta: f64, alpha: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid(format!("grid side delta must be positive, got {delta}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("shrink factor alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { delta, alpha })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Grid cell index of `x` (floor-based, so negative inputs index negative cells).
    pub fn cell(&self, x: f64) -> i64 {
        (x / self.delta).floor() as i64
    }

    /// Lipschitz constant of the quantizer, `1 / (1 - alpha)`.
    pub fn lipschitz(&self) -> f64 {
        1.0 / (1.0 - self.alpha)
    }
}

/// Constant at `i*delta` on `[i*delta, i*delta + alpha*delta]`, then linear up
/// to `(i+1)*delta`.
pub fn quantize_scalar(q: &QuantizerSpec, x: f64) -> f64 {
    let (delta, alpha) = (q.delta, q.alpha);
    let i = (x / delta).floor();
    let base = i * delta;
    let offset = x - base;
    if offset <= alpha * delta {
        base
    } else {
        // `min` guards the floor rounding up to the next grid point.
        (base + (offset - alpha * delta) / (1.0 - alpha)).min(base + delta)
    }
}

pub fn quantize_matrix(q: &QuantizerSpec, x: &TokenMatrix) -> TokenMatrix {
    x.map(|v| quantize_scalar(q, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn q(delta: f64, alpha: f64) -> QuantizerSpec {
        QuantizerSpec::new(delta, alpha).unwrap()
    }

    #[test]
    fn duplicate_tokens_are_not_general_position() {
        let x = TokenMatrix::from_columns(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(!is_general_position(&x, 0.0));
    }

    #[test]
    fn separated_tokens_are_general_position() {
        let x = TokenMatrix::from_columns(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(is_general_position(&x, 0.5));
        assert!(!is_general_position(&x, 1.0));
    }

    #[test]
    fn gaussian_samples_are_general_position() {
        let mut rng = stream(11, "general-position", 0);
        for _ in 0..100 {
            let x = TokenMatrix::random_normal(2, 4, &mut rng);
            // Oracle: explicit pairwise loop, independent of min_token_gap.
            let mut ok = true;
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let dx = x.as_matrix()[(0, i)] - x.as_matrix()[(0, j)];
                    let dy = x.as_matrix()[(1, i)] - x.as_matrix()[(1, j)];
                    ok &= (dx * dx + dy * dy).sqrt() > 1e-8;
                }
            }
            assert!(ok);
            assert!(is_general_position(&x, 1e-8));
        }
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(TokenMatrix::from_row_major(1, 2, &[0.0, f64::NAN]).is_err());
        assert!(TokenMatrix::from_row_major(0, 2, &[]).is_err());
        assert!(TokenMatrix::from_row_major(2, 2, &[0.0; 3]).is_err());
    }

    #[test]
    fn quantizer_spec_validation() {
        assert!(QuantizerSpec::new(0.0, 0.5).is_err());
        assert!(QuantizerSpec::new(1.0, 1.0).is_err());
        assert!(QuantizerSpec::new(1.0, 0.0).is_err());
    }

    #[test]
    fn quantize_scalar_branches() {
        let h = q(1.0, 0.5);
        assert_eq!(quantize_scalar(&h, 0.25), 0.0);
        assert!((quantize_scalar(&h, 0.75) - 0.5).abs() < 1e-15);
        assert_eq!(quantize_scalar(&h, 1.0), 1.0);
        assert_eq!(quantize_scalar(&h, -0.75), -1.0);
        assert!((quantize_scalar(&h, -0.25) - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn quantize_matrix_entrywise() {
        let h = q(1.0, 0.5);
        let zero = TokenMatrix::zeros(2, 3);
        assert_eq!(quantize_matrix(&h, &zero), zero);
        let x = TokenMatrix::from_row_major(2, 2, &[0.25, 0.75, 0.0, 0.0]).unwrap();
        let y = quantize_matrix(&h, &x);
        assert_eq!(y.to_row_major(), vec![0.0, 0.5, 0.0, 0.0]);
        let grid = TokenMatrix::from_row_major(2, 2, &[-3.0, 2.0, 7.0, 0.0]).unwrap();
        assert_eq!(quantize_matrix(&h, &grid), grid);
    }

    #[test]
    fn serialization_is_row_major_with_header() {
        let x = TokenMatrix::from_row_major(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let json = serde_json::to_string(&x).unwrap();
        assert_eq!(json, r#"{"d":2,"n":3,"values":[1.0,2.0,3.0,4.0,5.0,6.0]}"#);
        let back: TokenMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, x);
    }

    proptest! {
        #[test]
        fn quantizer_monotone_and_lipschitz(a in -50.0f64..50.0, b in -50.0f64..50.0, alpha in 0.05f64..0.95, delta in 0.1f64..3.0) {
            let h = q(delta, alpha);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize_scalar(&h, lo) <= quantize_scalar(&h, hi));
            let gap = (quantize_scalar(&h, a) - quantize_scalar(&h, b)).abs();
            prop_assert!(gap <= (a - b).abs() * h.lipschitz() * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn quantizer_constant_on_shrunk_cells(cell in -20i64..20, u in 0.0f64..1.0, v in 0.0f64..1.0) {
            let h = q(0.25, 0.9);
            let base = cell as f64 * 0.25;
            let x = base + u * 0.9 * 0.25;
            let y = base + v * 0.9 * 0.25;
            prop_assert_eq!(quantize_scalar(&h, x), quantize_scalar(&h, y));
        }

        #[test]
        fn general_position_is_permutation_invariant(seed in 0u64..500, shift in 0usize..4) {
            let mut rng = stream(seed, "gp-perm", 0);
            let mut x = TokenMatrix::random_normal(2, 4, &mut rng);
            if seed % 3 == 0 {
                let c = x.column(0).into_owned();
                x.set_column(2, &c);
            }
            let cols: Vec<Vec<f64>> = (0..4).map(|i| x.column((i + shift) % 4).iter().copied().collect()).collect();
            let y = TokenMatrix::from_columns(&cols).unwrap();
            prop_assert_eq!(is_general_position(&x, 1e-8), is_general_position(&y, 1e-8));
        }
    }
}
