//! Monte Carlo moment estimators and covariances of covariance estimators.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::ensemble::GroupSamples;
use crate::error::{check_len, Error, Result};
use crate::linalg::{pairwise_sum, symmetrize};
use crate::structure::CouplingStructure;

/// Arithmetic mean.
pub fn mc_mean(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InsufficientSamples {
            what: "mean",
            required: 1,
            actual: 0,
        });
    }
    Ok(pairwise_sum(x) / x.len() as f64)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = pairwise_sum(x) / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Unbiased covariance `(1/(m-1)) Σ x̃ᵢ ỹᵢ`.
pub fn mc_cov(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len("covariance arguments", x.len(), y.len())?;
    if x.len() < 2 {
        return Err(Error::InsufficientSamples {
            what: "covariance",
            required: 2,
            actual: x.len(),
        });
    }
    let (xc, yc) = (centered(x), centered(y));
    let prod: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
    Ok(pairwise_sum(&prod) / (x.len() - 1) as f64)
}

/// Sample fourth centered moment `(1/m) Σ x̃₁ x̃₂ x̃₃ x̃₄` (biased).
pub fn mc_fourth(x1: &[f64], x2: &[f64], x3: &[f64], x4: &[f64]) -> Result<f64> {
    let m = x1.len();
    for x in [x2, x3, x4] {
        check_len("fourth-moment arguments", m, x.len())?;
    }
    if m == 0 {
        return Err(Error::InsufficientSamples {
            what: "fourth moment",
            required: 1,
            actual: 0,
        });
    }
    let c: Vec<Vec<f64>> = [x1, x2, x3, x4].iter().map(|x| centered(x)).collect();
    let prod: Vec<f64> = (0..m).map(|i| c[0][i] * c[1][i] * c[2][i] * c[3][i]).collect();
    Ok(pairwise_sum(&prod) / m as f64)
}

/// Unbiased sample covariance matrix of the columns `xs[ℓ]`.
pub fn sample_covariance(xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let p = xs.len();
    let mut c = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let v = mc_cov(&xs[a], &xs[b])?;
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    Ok(c)
}

/// Unbiased covariance of the stacked level vectors of a group, of size
/// `Σ n_ℓ`.
pub fn stacked_sample_covariance(samples: &GroupSamples) -> Result<DMatrix<f64>> {
    let m = samples.members();
    if m < 2 {
        return Err(Error::InsufficientSamples {
            what: "covariance",
            required: 2,
            actual: m,
        });
    }
    let dim: usize = samples.sizes().iter().sum();
    let mut mean = vec![0.0; dim];
    for i in 0..m {
        for (a, v) in mean.iter_mut().zip(samples.member(i)) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let mut c = DMatrix::<f64>::zeros(dim, dim);
    let mut x = vec![0.0; dim];
    for i in 0..m {
        for ((d, v), mu) in x.iter_mut().zip(samples.member(i)).zip(&mean) {
            *d = v - mu;
        }
        for a in 0..dim {
            let xa = x[a];
            for b in a..dim {
                c[(a, b)] += xa * x[b];
            }
        }
    }
    let scale = 1.0 / (m - 1) as f64;
    for a in 0..dim {
        for b in a..dim {
            let v = c[(a, b)] * scale;
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    Ok(c)
}

/// Second and fourth moments of the pairs `(X_ℓ, Y_ℓ)` over the levels of
/// a group, as needed for the covariance of the covariance estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMoments {
    /// Covariance of the stacked vector `(X_1..X_p, Y_1..Y_p)`.
    pub cov: DMatrix<f64>,
    /// `fourth[(ℓ, ℓ')] = 𝕄⁴[X_ℓ, X_ℓ', Y_ℓ, Y_ℓ']`.
    pub fourth: DMatrix<f64>,
}

impl PairMoments {
    pub fn new(cov: DMatrix<f64>, fourth: DMatrix<f64>) -> Result<Self> {
        let p = fourth.nrows();
        check_len("fourth-moment matrix columns", p, fourth.ncols())?;
        check_len("pair covariance rows", 2 * p, cov.nrows())?;
        check_len("pair covariance columns", 2 * p, cov.ncols())?;
        Ok(Self { cov, fourth })
    }

    /// Variance case `X = Y`: `cov` is `p x p` and
    /// `fourth[(ℓ, ℓ')] = 𝕄⁴[X_ℓ, X_ℓ', X_ℓ, X_ℓ']`.
    pub fn variance(cov: DMatrix<f64>, fourth: DMatrix<f64>) -> Result<Self> {
        let p = cov.nrows();
        let mut full = DMatrix::zeros(2 * p, 2 * p);
        for (r, c) in [(0, 0), (0, p), (p, 0), (p, p)] {
            full.view_mut((r, c), (p, p)).copy_from(&cov);
        }
        Self::new(full, fourth)
    }

    /// Sample moments from coupled columns `xs[ℓ]`, `ys[ℓ]`.
    pub fn from_samples(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Self> {
        let p = xs.len();
        check_len("Y levels", p, ys.len())?;
        let all: Vec<Vec<f64>> = xs.iter().chain(ys).cloned().collect();
        let cov = sample_covariance(&all)?;
        let mut fourth = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..p {
                fourth[(a, b)] = mc_fourth(&xs[a], &xs[b], &ys[a], &ys[b])?;
            }
        }
        Self::new(cov, fourth)
    }

    pub fn levels(&self) -> usize {
        self.fourth.nrows()
    }
}

/// The covariance of covariance estimators as a function of the sample
/// size: `ℂ(m) = first / m + second / (m (m - 1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovCovModel {
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
}

impl CovCovModel {
    pub fn size(&self) -> usize {
        self.first.nrows()
    }

    pub fn at(&self, m: f64) -> Result<DMatrix<f64>> {
        if !(m >= 2.0) {
            return Err(Error::InsufficientSamples {
                what: "covariance of covariance",
                required: 2,
                actual: m.max(0.0) as usize,
            });
        }
        Ok(self.eval(m))
    }

    pub(crate) fn eval(&self, m: f64) -> DMatrix<f64> {
        &self.first / m + &self.second / (m * (m - 1.0))
    }

    /// `dℂ/dm`.
    pub fn derivative(&self, m: f64) -> DMatrix<f64> {
        -(&self.first / (m * m)) - &self.second * ((2.0 * m - 1.0) / (m * m * (m - 1.0).powi(2)))
    }

    /// Sub-model on positions `idx`.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])]);
        Self {
            first: pick(&self.first),
            second: pick(&self.second),
        }
    }

    /// Per-group models, cutting a model over all `L` levels.
    pub fn per_group(&self, structure: &CouplingStructure) -> Vec<CovCovModel> {
        structure.groups().iter().map(|g| self.select(g)).collect()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            first: &self.first * factor,
            second: &self.second * factor,
        }
    }
}

/// A covariance-of-covariance matrix together with the sample size it was
/// evaluated at.
#[derive(Debug, Clone, PartialEq)]
pub struct CovCovMatrix {
    pub matrix: DMatrix<f64>,
    pub samples: u64,
}

/// `ℂ(m)` decomposed as [`CovCovModel`] from pair moments:
///
/// ```text
/// first_ℓℓ'  = 𝕄⁴[X_ℓ,X_ℓ',Y_ℓ,Y_ℓ'] − C(X_ℓ,Y_ℓ) C(X_ℓ',Y_ℓ')
/// second_ℓℓ' = C(X_ℓ,Y_ℓ') C(Y_ℓ,X_ℓ') + C(X_ℓ,X_ℓ') C(Y_ℓ,Y_ℓ')
/// ```
pub fn covcov_model(moments: &PairMoments) -> CovCovModel {
    let p = moments.levels();
    let c = &moments.cov;
    let (x, y) = (|l: usize| l, |l: usize| p + l);
    let mut first = DMatrix::zeros(p, p);
    let mut second = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            first[(a, b)] = moments.fourth[(a, b)] - c[(x(a), y(a))] * c[(x(b), y(b))];
            second[(a, b)] =
                c[(x(a), y(b))] * c[(y(a), x(b))] + c[(x(a), x(b))] * c[(y(a), y(b))];
        }
    }
    symmetrize(&mut first);
    symmetrize(&mut second);
    CovCovModel { first, second }
}

/// Covariance of the covariance estimators of the levels of a group at
/// sample size `m`.
pub fn covcov_scalar(moments: &PairMoments, m: u64) -> Result<CovCovMatrix> {
    Ok(CovCovMatrix {
        matrix: covcov_model(moments).at(m as f64)?,
        samples: m,
    })
}

/// Element chunk processed at once by the space-average Gram computation.
const GRAM_CHUNK: usize = 256;

/// Centered perturbations of every (level, member) as contiguous rows of
/// length `n`, indexed `pos * members + s`.
fn centered_rows(samples: &GroupSamples) -> Result<(Vec<f64>, usize)> {
    let ne = samples.members();
    let sizes = samples.sizes();
    let n = sizes.first().copied().unwrap_or(0);
    if sizes.iter().any(|&s| s != n) {
        return Err(Error::InvalidArgument(
            "averaged covariance statistics need equal element counts on all levels".into(),
        ));
    }
    let p = sizes.len();
    let mut rows = vec![0.0; p * ne * n];
    for pos in 0..p {
        let mut mean = vec![0.0; n];
        for s in 0..ne {
            for (a, v) in mean.iter_mut().zip(samples.value(s, pos)) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= ne as f64);
        for s in 0..ne {
            let row = &mut rows[(pos * ne + s) * n..(pos * ne + s + 1) * n];
            for ((r, v), mu) in row.iter_mut().zip(samples.value(s, pos)).zip(&mean) {
                *r = v - mu;
            }
        }
    }
    Ok((rows, n))
}

fn check_members(samples: &GroupSamples) -> Result<()> {
    if samples.members() < 4 {
        return Err(Error::InsufficientSamples {
            what: "averaged covariance of covariance",
            required: 4,
            actual: samples.members(),
        });
    }
    Ok(())
}

/// Space-average products `γ(ℓ,s,ℓ',s') = Σᵢ X̃ˢ_{ℓ,i} X̃ˢ'_{ℓ',i}` as a dense
/// symmetric Gram matrix indexed by `pos * members + s`.
///
/// Only the upper triangle is accumulated and then mirrored, so the
/// symmetry `γ(ℓ,s,ℓ',s') = γ(ℓ',s',ℓ,s)` holds exactly. Elements are
/// processed in fixed chunks whose partial sums are added in chunk order,
/// which makes the result independent of the number of threads.
pub fn space_average_gram(samples: &GroupSamples) -> Result<DMatrix<f64>> {
    check_members(samples)?;
    let (rows, n) = centered_rows(samples)?;
    let v = samples.sizes().len() * samples.members();
    let tri = v * (v + 1) / 2;
    let chunks: Vec<usize> = (0..n.div_ceil(GRAM_CHUNK)).collect();
    let partials: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&c| {
            let lo = c * GRAM_CHUNK;
            let hi = (lo + GRAM_CHUNK).min(n);
            let mut out = Vec::with_capacity(tri);
            for a in 0..v {
                let ra = &rows[a * n + lo..a * n + hi];
                for b in a..v {
                    let rb = &rows[b * n + lo..b * n + hi];
                    out.push(ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>());
                }
            }
            out
        })
        .collect();
    let mut acc = vec![0.0; tri];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    let mut g = DMatrix::zeros(v, v);
    let mut idx = 0;
    for a in 0..v {
        for b in a..v {
            g[(a, b)] = acc[idx];
            g[(b, a)] = acc[idx];
            idx += 1;
        }
    }
    Ok(g)
}

/// Sum over all entry pairs `(i, j)` of the covariance-of-covariance
/// matrices of the levels held by `samples`, computed from space averages
/// in `O(nₑ² p² n)`.
///
/// Uses the biased sample fourth moment (`1/nₑ`) and unbiased sample
/// covariances (`1/(nₑ-1)`); at finite `nₑ` the result is biased.
pub fn averaged_covcov_model(samples: &GroupSamples) -> Result<CovCovModel> {
    let g = space_average_gram(samples)?;
    let ne = samples.members();
    let p = samples.sizes().len();
    let gamma = |a: usize, s: usize, b: usize, t: usize| g[(a * ne + s, b * ne + t)];
    let ne_f = ne as f64;
    let d2 = (ne_f - 1.0) * (ne_f - 1.0);
    let mut first = DMatrix::zeros(p, p);
    let mut second = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let mut diag_sq = 0.0;
            let mut diag = 0.0;
            let mut all_sq = 0.0;
            let mut cross = 0.0;
            for s in 0..ne {
                let d = gamma(a, s, b, s);
                diag_sq += d * d;
                diag += d;
                for t in 0..ne {
                    let x = gamma(a, s, b, t);
                    all_sq += x * x;
                    cross += x * gamma(a, t, b, s);
                }
            }
            let f = diag_sq / ne_f - all_sq / d2;
            let sc = (cross + diag * diag) / d2;
            first[(a, b)] = f;
            first[(b, a)] = f;
            second[(a, b)] = sc;
            second[(b, a)] = sc;
        }
    }
    Ok(CovCovModel { first, second })
}

/// Direct `O(n² p² nₑ)` evaluation of the same sums as
/// [`averaged_covcov_model`], entry pair by entry pair.
pub fn averaged_covcov_naive(samples: &GroupSamples) -> Result<CovCovModel> {
    check_members(samples)?;
    let (rows, n) = centered_rows(samples)?;
    let ne = samples.members();
    let p = samples.sizes().len();
    let x = |pos: usize, s: usize, i: usize| rows[(pos * ne + s) * n + i];
    let ne_f = ne as f64;
    let cov = |a: usize, i: usize, b: usize, j: usize| {
        (0..ne).map(|s| x(a, s, i) * x(b, s, j)).sum::<f64>() / (ne_f - 1.0)
    };
    let mut first = DMatrix::zeros(p, p);
    let mut second = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            let (mut f, mut sc) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let m4 = (0..ne)
                        .map(|s| x(a, s, i) * x(b, s, i) * x(a, s, j) * x(b, s, j))
                        .sum::<f64>()
                        / ne_f;
                    f += m4 - cov(a, i, a, j) * cov(b, i, b, j);
                    sc += cov(a, i, b, j) * cov(a, j, b, i) + cov(a, i, b, i) * cov(a, j, b, j);
                }
            }
            first[(a, b)] = f;
            second[(a, b)] = sc;
        }
    }
    Ok(CovCovModel { first, second })
}

/// Averaged covariance-of-covariance matrices of every group at its sample
/// size, from a calibration ensemble coupling all levels.
pub fn covcov_matrix_averaged(
    calibration: &GroupSamples,
    structure: &CouplingStructure,
) -> Result<Vec<CovCovMatrix>> {
    let model = averaged_covcov_model(calibration)?;
    let m = structure.require_samples()?;
    structure
        .groups()
        .iter()
        .zip(m)
        .map(|(g, &mk)| {
            let idx = g
                .iter()
                .map(|l| {
                    calibration.position(*l).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "calibration ensemble lacks level {}",
                            l + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CovCovMatrix {
                matrix: model.select(&idx).at(mk as f64)?,
                samples: mk,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn simple_estimators() {
        assert_eq!(mc_mean(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mc_mean(&[2.5; 7]).unwrap(), 2.5);
        assert!(mc_mean(&[]).is_err());
        assert_eq!(mc_cov(&[-1.0, 1.0], &[-1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(mc_cov(&[3.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 0.0);
        assert!(mc_cov(&[1.0], &[1.0]).is_err());
        let pm = [-1.0, 1.0];
        assert_eq!(mc_fourth(&pm, &pm, &pm, &pm).unwrap(), 1.0);
        assert_eq!(mc_fourth(&[2.0; 3], &[1.0; 3], &[5.0; 3], &[0.5; 3]).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_variance_of_variance() {
        let s2 = 2.5_f64;
        let pm = PairMoments::variance(
            DMatrix::from_element(1, 1, s2),
            DMatrix::from_element(1, 1, 3.0 * s2 * s2),
        )
        .unwrap();
        let m = 11;
        let c = covcov_scalar(&pm, m).unwrap();
        assert_relative_eq!(c.matrix[(0, 0)], 2.0 * s2 * s2 / (m as f64 - 1.0), max_relative = 1e-12);
        assert!(covcov_scalar(&pm, 1).is_err());
    }

    #[test]
    fn identical_levels_give_rank_one() {
        let pm = PairMoments::variance(
            DMatrix::from_element(2, 2, 1.0),
            DMatrix::from_element(2, 2, 3.0),
        )
        .unwrap();
        let c = covcov_scalar(&pm, 6).unwrap().matrix;
        assert_relative_eq!(c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn constant_members_give_zero() {
        let mut g = GroupSamples::zeros(vec![0, 1], vec![3, 3], 5);
        for i in 0..5 {
            g.member_mut(i).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        }
        let m = averaged_covcov_model(&g).unwrap();
        assert_eq!(m.first.amax(), 0.0);
        assert_eq!(m.second.amax(), 0.0);
    }

    #[test]
    fn too_few_members() {
        let g = GroupSamples::zeros(vec![0], vec![2], 3);
        assert!(averaged_covcov_model(&g).is_err());
    }
}
