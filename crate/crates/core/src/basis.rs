//! Orthonormal bases used to change coordinates of field-valued outputs.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance of the orthonormality check.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Identity,
    /// Orthonormal DCT-II.
    Dct,
    /// Real Fourier basis on a periodic grid: constant, then cosine/sine
    /// pairs of increasing wavenumber, then the alternating mode for even n.
    Periodic,
    Custom,
}

/// An `n x n` orthonormal matrix `W`; columns are basis vectors.
///
/// Coordinates are obtained with [`forward`](Self::forward) (`Wᵀ x`) and
/// mapped back with [`inverse`](Self::inverse) (`W y`).
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    kind: BasisKind,
    matrix: DMatrix<f64>,
    wavenumbers: Vec<f64>,
}

impl OrthonormalBasis {
    pub fn identity(n: usize) -> Self {
        Self {
            kind: BasisKind::Identity,
            matrix: DMatrix::identity(n, n),
            wavenumbers: vec![0.0; n],
        }
    }

    /// `W[j, k] = s_k cos(π (j + ½) k / n)` with `s_0 = √(1/n)`, `s_k = √(2/n)`.
    pub fn dct(n: usize) -> Self {
        let nf = n as f64;
        let matrix = DMatrix::from_fn(n, n, |j, k| {
            let s = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            s * (PI * (j as f64 + 0.5) * k as f64 / nf).cos()
        });
        Self {
            kind: BasisKind::Dct,
            matrix,
            wavenumbers: (0..n).map(|k| k as f64).collect(),
        }
    }

    pub fn periodic(n: usize) -> Self {
        let nf = n as f64;
        let mut matrix = DMatrix::zeros(n, n);
        let mut wavenumbers = Vec::with_capacity(n);
        let mut col = 0;
        let mut push = |f: &dyn Fn(f64) -> f64, k: f64, matrix: &mut DMatrix<f64>| {
            for j in 0..n {
                matrix[(j, col)] = f(j as f64);
            }
            wavenumbers.push(k);
            col += 1;
        };
        if n > 0 {
            push(&|_| (1.0 / nf).sqrt(), 0.0, &mut matrix);
        }
        for k in 1..n.div_ceil(2) {
            let w = 2.0 * PI * k as f64 / nf;
            push(&|j| (2.0 / nf).sqrt() * (w * j).cos(), k as f64, &mut matrix);
            push(&|j| (2.0 / nf).sqrt() * (w * j).sin(), k as f64, &mut matrix);
        }
        if n > 0 && n.is_multiple_of(2) {
            push(
                &|j| if (j as usize).is_multiple_of(2) { 1.0 } else { -1.0 } / nf.sqrt(),
                (n / 2) as f64,
                &mut matrix,
            );
        }
        Self {
            kind: BasisKind::Periodic,
            matrix,
            wavenumbers,
        }
    }

    pub fn of_kind(kind: BasisKind, n: usize) -> Result<Self> {
        match kind {
            BasisKind::Identity => Ok(Self::identity(n)),
            BasisKind::Dct => Ok(Self::dct(n)),
            BasisKind::Periodic => Ok(Self::periodic(n)),
            BasisKind::Custom => Err(Error::InvalidArgument(
                "custom bases are built from a matrix".into(),
            )),
        }
    }

    /// Accepts a user matrix after checking orthonormality on random vectors.
    pub fn custom(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                what: "basis columns",
                expected: matrix.nrows(),
                actual: matrix.ncols(),
            });
        }
        let n = matrix.nrows();
        let b = Self {
            kind: BasisKind::Custom,
            matrix,
            wavenumbers: vec![0.0; n],
        };
        b.check_orthonormal(0x5eed)?;
        Ok(b)
    }

    /// Checks `WᵀW v = v` and `WWᵀ v = v` on a few random vectors.
    pub fn check_orthonormal(&self, seed: u64) -> Result<()> {
        let n = self.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..4 {
            let v: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let norm = v.norm().max(f64::MIN_POSITIVE);
            let a = self.matrix.tr_mul(&(&self.matrix * &v)) - &v;
            let b = &self.matrix * self.matrix.tr_mul(&v) - &v;
            worst = worst.max(a.norm() / norm).max(b.norm() / norm);
        }
        if worst <= ORTHONORMAL_TOLERANCE {
            Ok(())
        } else {
            Err(Error::NotOrthonormal { residual: worst })
        }
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Wavenumber of each basis vector (zero for identity and custom bases).
    pub fn wavenumbers(&self) -> &[f64] {
        &self.wavenumbers
    }

    /// `Wᵀ x`. The identity basis returns `x` unchanged.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        if self.kind == BasisKind::Identity {
            return x.to_vec();
        }
        self.matrix.tr_mul(&DVector::from_column_slice(x)).as_slice().to_vec()
    }

    /// `W y`. The identity basis returns `y` unchanged.
    pub fn inverse(&self, y: &[f64]) -> Vec<f64> {
        if self.kind == BasisKind::Identity {
            return y.to_vec();
        }
        (&self.matrix * DVector::from_column_slice(y)).as_slice().to_vec()
    }

    /// `Wᵀ C W` for a covariance `C` in physical coordinates.
    pub fn forward_covariance(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        if self.kind == BasisKind::Identity {
            return c.clone();
        }
        self.matrix.tr_mul(c) * &self.matrix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_orthonormal() {
        for n in [1, 2, 5, 16] {
            OrthonormalBasis::dct(n).check_orthonormal(1).unwrap();
            OrthonormalBasis::periodic(n).check_orthonormal(2).unwrap();
            OrthonormalBasis::identity(n).check_orthonormal(3).unwrap();
        }
    }

    #[test]
    fn dct_first_column_is_constant() {
        let b = OrthonormalBasis::dct(4);
        for j in 0..4 {
            assert!((b.matrix()[(j, 0)] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_orthonormal() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(
            OrthonormalBasis::custom(m),
            Err(Error::NotOrthonormal { .. })
        ));
    }

    #[test]
    fn round_trip() {
        let b = OrthonormalBasis::dct(6);
        let x = [1.0, -2.0, 0.5, 3.0, 0.0, 1.5];
        let back = b.inverse(&b.forward(&x));
        for (a, c) in back.iter().zip(&x) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}
