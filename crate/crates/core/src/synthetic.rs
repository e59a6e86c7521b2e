//! Gaussian model hierarchies with exact moments, ensemble sampling and a
//! replication harness.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisKind, OrthonormalBasis};
use crate::ensemble::{Ensemble, EnsembleMetadata, GroupSamples};
use crate::error::{check_len, Error, Result};
use crate::moments::{CovCovModel, PairMoments};
use crate::mosap::MlmcBoundInputs;
use crate::rng::{derive_seed, Domain, StreamKey, GENERATOR};
use crate::structure::CouplingStructure;

/// A hierarchy of simulators that can draw coupled samples.
///
/// Levels of one member that share a [`StreamKey`] must see the same shared
/// input whichever subset of levels is requested.
pub trait CoupledModel: Sync {
    fn levels(&self) -> usize;

    fn level_sizes(&self) -> Vec<usize>;

    /// Writes one coupled draw of `levels` (concatenated) into `out`.
    fn draw(&self, levels: &[usize], key: &StreamKey, out: &mut [f64]);

    /// Exact first and second moments.
    fn gaussian_moments(&self) -> GaussianMoments;
}

fn normals(key: &StreamKey, channel: u64, n: usize) -> Vec<f64> {
    let rng = key.channel(channel);
    StandardNormal.sample_iter(rng).take(n).collect()
}

/// `Z_ℓ = μ_ℓ + σ_ℓ (ρ_ℓ G₀ + √(1−ρ_ℓ²) G_ℓ)` with independent standard
/// normal `G`, drawn independently for each of `elements` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianHierarchySpec {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
    #[serde(default = "one")]
    pub elements: usize,
}

fn one() -> usize {
    1
}

impl GaussianHierarchySpec {
    pub fn validate(&self) -> Result<()> {
        let l = self.mean.len();
        if l == 0 {
            return Err(Error::InvalidArgument("hierarchy needs at least one level".into()));
        }
        check_len("sigma", l, self.sigma.len())?;
        check_len("rho", l, self.rho.len())?;
        if self.sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        if self.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidArgument("rho must lie in [0, 1]".into()));
        }
        if self.elements == 0 {
            return Err(Error::InvalidArgument("elements must be at least 1".into()));
        }
        Ok(())
    }

    /// Exact `L x L` covariance of one element.
    pub fn level_covariance(&self) -> DMatrix<f64> {
        let l = self.mean.len();
        DMatrix::from_fn(l, l, |a, b| {
            if a == b {
                self.sigma[a] * self.sigma[a]
            } else {
                self.sigma[a] * self.sigma[b] * self.rho[a] * self.rho[b]
            }
        })
    }
}

impl CoupledModel for GaussianHierarchySpec {
    fn levels(&self) -> usize {
        self.mean.len()
    }

    fn level_sizes(&self) -> Vec<usize> {
        vec![self.elements; self.mean.len()]
    }

    fn draw(&self, levels: &[usize], key: &StreamKey, out: &mut [f64]) {
        let n = self.elements;
        let shared = normals(key, 0, n);
        for (pos, &l) in levels.iter().enumerate() {
            let own = normals(key, l as u64 + 1, n);
            let (r, s, mu) = (self.rho[l], self.sigma[l], self.mean[l]);
            let q = (1.0 - r * r).max(0.0).sqrt();
            for ((o, g0), gl) in out[pos * n..(pos + 1) * n].iter_mut().zip(&shared).zip(&own) {
                *o = mu + s * (r * g0 + q * gl);
            }
        }
    }

    fn gaussian_moments(&self) -> GaussianMoments {
        let l = self.levels();
        let n = self.elements;
        let c = self.level_covariance();
        let cov = DMatrix::from_fn(l * n, l * n, |a, b| {
            if a % n == b % n {
                c[(a / n, b / n)]
            } else {
                0.0
            }
        });
        let mean = DVector::from_fn(l * n, |a, _| self.mean[a / n]);
        GaussianMoments::new(vec![n; l], mean, cov)
    }
}

/// Per-level settings of a [`FieldHierarchySpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldLevelSpec {
    #[serde(default)]
    pub mean: f64,
    /// Correlation with the reference field at the largest scales, in [0, 1].
    pub coupling: f64,
    /// Wavenumber beyond which the coupling decays; `None` keeps it constant.
    #[serde(default)]
    pub cutoff: Option<f64>,
    /// Amplitude of the level's own noise.
    #[serde(default = "unit")]
    pub noise: f64,
}

fn unit() -> f64 {
    1.0
}

/// A 1D Gaussian random field on `n` points and its cheaper approximations.
///
/// In the spectral basis `W`, coefficient `s` of level `ℓ` is
/// `√E(κ_s) (ρ_ℓ(κ_s) ξ₀,s + a_ℓ √(1−ρ_ℓ(κ_s)²) ξ_ℓ,s)` where
/// `E(κ) = variance (1 + (κ/scale)²)^(−decay)`,
/// `ρ_ℓ(κ) = coupling_ℓ / (1 + (κ/cutoff_ℓ)²)` and `a_ℓ` is the level noise.
/// Covariances are diagonal in `W`. With the periodic basis the field is
/// stationary on the circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHierarchySpec {
    pub n: usize,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    #[serde(default = "unit")]
    pub variance: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    pub levels: Vec<FieldLevelSpec>,
}

fn default_basis() -> BasisKind {
    BasisKind::Periodic
}

fn default_scale() -> f64 {
    4.0
}

fn default_decay() -> f64 {
    1.0
}

impl FieldHierarchySpec {
    pub fn build(&self) -> Result<FieldHierarchy> {
        if self.n == 0 || self.levels.is_empty() {
            return Err(Error::InvalidArgument(
                "field hierarchy needs n >= 1 and at least one level".into(),
            ));
        }
        if !matches!(self.basis, BasisKind::Dct | BasisKind::Periodic) {
            return Err(Error::InvalidArgument(
                "field hierarchy basis must be dct or periodic".into(),
            ));
        }
        if !(self.variance > 0.0 && self.scale > 0.0 && self.decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "field variance and scale must be positive, decay non-negative".into(),
            ));
        }
        for lv in &self.levels {
            if !(0.0..=1.0).contains(&lv.coupling)
                || lv.cutoff.is_some_and(|c| !(c > 0.0))
                || !(lv.noise >= 0.0)
            {
                return Err(Error::InvalidArgument(
                    "level coupling must lie in [0, 1], cutoff and noise be positive".into(),
                ));
            }
        }
        let basis = OrthonormalBasis::of_kind(self.basis, self.n)?;
        let energy: Vec<f64> = basis
            .wavenumbers()
            .iter()
            .map(|k| self.variance * (1.0 + (k / self.scale).powi(2)).powf(-self.decay))
            .collect();
        let mut shared = Vec::new();
        let mut own = Vec::new();
        for lv in &self.levels {
            let rho: Vec<f64> = basis
                .wavenumbers()
                .iter()
                .map(|k| match lv.cutoff {
                    Some(c) => lv.coupling / (1.0 + (k / c).powi(2)),
                    None => lv.coupling,
                })
                .collect();
            shared.push(energy.iter().zip(&rho).map(|(e, r)| e.sqrt() * r).collect());
            own.push(
                energy
                    .iter()
                    .zip(&rho)
                    .map(|(e, r)| e.sqrt() * lv.noise * (1.0 - r * r).max(0.0).sqrt())
                    .collect(),
            );
        }
        Ok(FieldHierarchy {
            mean: self.levels.iter().map(|l| l.mean).collect(),
            basis,
            shared,
            own,
        })
    }
}

/// A built [`FieldHierarchySpec`], ready for sampling.
#[derive(Debug, Clone)]
pub struct FieldHierarchy {
    mean: Vec<f64>,
    basis: OrthonormalBasis,
    shared: Vec<Vec<f64>>,
    own: Vec<Vec<f64>>,
}

impl FieldHierarchy {
    pub fn basis(&self) -> &OrthonormalBasis {
        &self.basis
    }

    /// Spectral covariance of levels `a` and `b` (diagonal entries).
    pub fn spectral_covariance(&self, a: usize, b: usize) -> Vec<f64> {
        (0..self.basis.dim())
            .map(|s| {
                let mut v = self.shared[a][s] * self.shared[b][s];
                if a == b {
                    v += self.own[a][s] * self.own[a][s];
                }
                v
            })
            .collect()
    }
}

impl CoupledModel for FieldHierarchy {
    fn levels(&self) -> usize {
        self.mean.len()
    }

    fn level_sizes(&self) -> Vec<usize> {
        vec![self.basis.dim(); self.mean.len()]
    }

    fn draw(&self, levels: &[usize], key: &StreamKey, out: &mut [f64]) {
        let n = self.basis.dim();
        let xi0 = normals(key, 0, n);
        for (pos, &l) in levels.iter().enumerate() {
            let xi = normals(key, l as u64 + 1, n);
            let coef: Vec<f64> = (0..n)
                .map(|s| self.shared[l][s] * xi0[s] + self.own[l][s] * xi[s])
                .collect();
            let field = self.basis.inverse(&coef);
            for (o, v) in out[pos * n..(pos + 1) * n].iter_mut().zip(field) {
                *o = self.mean[l] + v;
            }
        }
    }

    fn gaussian_moments(&self) -> GaussianMoments {
        let l = self.levels();
        let n = self.basis.dim();
        let w = self.basis.matrix();
        let mut cov = DMatrix::zeros(l * n, l * n);
        for a in 0..l {
            for b in a..l {
                let d = DVector::from_vec(self.spectral_covariance(a, b));
                let block = w * DMatrix::from_diagonal(&d) * w.transpose();
                cov.view_mut((a * n, b * n), (n, n)).copy_from(&block);
                cov.view_mut((b * n, a * n), (n, n)).copy_from(&block.transpose());
            }
        }
        let mut c = cov;
        crate::linalg::symmetrize(&mut c);
        let mean = DVector::from_fn(l * n, |i, _| self.mean[i / n]);
        GaussianMoments::new(vec![n; l], mean, c)
    }
}

/// Model specification as read from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelSpec {
    Hierarchy(GaussianHierarchySpec),
    Field(FieldHierarchySpec),
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model> {
        match self {
            ModelSpec::Hierarchy(h) => {
                h.validate()?;
                Ok(Model::Hierarchy(h.clone()))
            }
            ModelSpec::Field(f) => Ok(Model::Field(f.build()?)),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Hierarchy(GaussianHierarchySpec),
    Field(FieldHierarchy),
}

impl CoupledModel for Model {
    fn levels(&self) -> usize {
        match self {
            Model::Hierarchy(m) => m.levels(),
            Model::Field(m) => m.levels(),
        }
    }

    fn level_sizes(&self) -> Vec<usize> {
        match self {
            Model::Hierarchy(m) => m.level_sizes(),
            Model::Field(m) => m.level_sizes(),
        }
    }

    fn draw(&self, levels: &[usize], key: &StreamKey, out: &mut [f64]) {
        match self {
            Model::Hierarchy(m) => m.draw(levels, key, out),
            Model::Field(m) => m.draw(levels, key, out),
        }
    }

    fn gaussian_moments(&self) -> GaussianMoments {
        match self {
            Model::Hierarchy(m) => m.gaussian_moments(),
            Model::Field(m) => m.gaussian_moments(),
        }
    }
}

/// Exact mean and covariance of the stacked level vectors
/// `(Z_1, ..., Z_L)` of a Gaussian hierarchy, with every derived moment.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    level_sizes: Vec<usize>,
    offsets: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(level_sizes: Vec<usize>, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let mut offsets = Vec::with_capacity(level_sizes.len());
        let mut acc = 0;
        for &n in &level_sizes {
            offsets.push(acc);
            acc += n;
        }
        Self {
            level_sizes,
            offsets,
            mean,
            cov,
        }
    }

    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    /// Index of entry `i` of level `l` in the stacked vector.
    pub fn index(&self, l: usize, i: usize) -> usize {
        self.offsets[l] + i
    }

    /// Common element count; fails when levels differ in size.
    pub fn elements(&self) -> Result<usize> {
        let n = self.level_sizes[0];
        if self.level_sizes.iter().all(|&s| s == n) {
            Ok(n)
        } else {
            Err(Error::InvalidArgument("levels have different element counts".into()))
        }
    }

    pub fn level_mean(&self, l: usize) -> DVector<f64> {
        self.mean.rows(self.offsets[l], self.level_sizes[l]).into_owned()
    }

    /// Cross-covariance block `C(Z_a, Z_b)`.
    pub fn block(&self, a: usize, b: usize) -> DMatrix<f64> {
        self.cov
            .view((self.offsets[a], self.offsets[b]), (self.level_sizes[a], self.level_sizes[b]))
            .into_owned()
    }

    /// Covariance of the stacked vectors of `levels`.
    pub fn group_covariance(&self, levels: &[usize]) -> DMatrix<f64> {
        let idx: Vec<usize> = levels
            .iter()
            .flat_map(|&l| (0..self.level_sizes[l]).map(move |i| (l, i)))
            .map(|(l, i)| self.index(l, i))
            .collect();
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.cov[(idx[a], idx[b])])
    }

    /// `p x p` covariance of element `i` across `levels`.
    pub fn element_covariance(&self, levels: &[usize], i: usize) -> DMatrix<f64> {
        let p = levels.len();
        DMatrix::from_fn(p, p, |a, b| {
            self.cov[(self.index(levels[a], i), self.index(levels[b], i))]
        })
    }

    /// Per-sample group covariances of element `i` for every group.
    pub fn element_group_covariances(&self, structure: &CouplingStructure, i: usize) -> Vec<DMatrix<f64>> {
        structure
            .groups()
            .iter()
            .map(|g| self.element_covariance(g, i))
            .collect()
    }

    /// Moments of the transformed levels `Wᵀ Z_ℓ`.
    pub fn transformed(&self, basis: &OrthonormalBasis) -> Result<Self> {
        let n = self.elements()?;
        check_len("basis dimension", n, basis.dim())?;
        let l = self.levels();
        let mut big = DMatrix::zeros(l * n, l * n);
        for a in 0..l {
            big.view_mut((a * n, a * n), (n, n)).copy_from(basis.matrix());
        }
        let cov = if basis.kind() == BasisKind::Identity {
            self.cov.clone()
        } else {
            let mut c = big.tr_mul(&self.cov) * &big;
            crate::linalg::symmetrize(&mut c);
            c
        };
        let mean = if basis.kind() == BasisKind::Identity {
            self.mean.clone()
        } else {
            big.tr_mul(&self.mean)
        };
        Ok(Self::new(self.level_sizes.clone(), mean, cov))
    }

    /// Centered fourth moment by Isserlis' identity, on stacked indices.
    pub fn fourth(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        let s = &self.cov;
        s[(a, b)] * s[(c, d)] + s[(a, c)] * s[(b, d)] + s[(a, d)] * s[(b, c)]
    }

    /// Pair moments for estimating `C(Z_{L,i}, Z_{L,j})` from the levels
    /// `levels`: `X_ℓ = Z_{ℓ,i}`, `Y_ℓ = Z_{ℓ,j}`.
    pub fn pair_moments(&self, levels: &[usize], i: usize, j: usize) -> PairMoments {
        let p = levels.len();
        let idx: Vec<usize> = levels
            .iter()
            .map(|&l| self.index(l, i))
            .chain(levels.iter().map(|&l| self.index(l, j)))
            .collect();
        let cov = DMatrix::from_fn(2 * p, 2 * p, |a, b| self.cov[(idx[a], idx[b])]);
        let fourth = DMatrix::from_fn(p, p, |a, b| {
            self.fourth(idx[a], idx[b], idx[p + a], idx[p + b])
        });
        PairMoments { cov, fourth }
    }

    /// Gaussian pointwise fourth moments `3 Var²` of the level differences
    /// and sums of the MLMC pattern over all levels.
    pub fn mlmc_bound_inputs(&self) -> Result<MlmcBoundInputs> {
        let n = self.elements()?;
        let var = |l: usize, other: Option<(usize, f64)>, i: usize| {
            let a = self.index(l, i);
            match other {
                None => self.cov[(a, a)],
                Some((o, sign)) => {
                    let b = self.index(o, i);
                    self.cov[(a, a)] + self.cov[(b, b)] + 2.0 * sign * self.cov[(a, b)]
                }
            }
        };
        let mut delta_fourth = Vec::with_capacity(self.levels());
        let mut sum_fourth = Vec::with_capacity(self.levels());
        for l in 0..self.levels() {
            let (d, s) = if l == 0 {
                (None, None)
            } else {
                (Some((l - 1, -1.0)), Some((l - 1, 1.0)))
            };
            delta_fourth.push((0..n).map(|i| 3.0 * var(l, d, i).powi(2)).collect());
            sum_fourth.push((0..n).map(|i| 3.0 * var(l, s, i).powi(2)).collect());
        }
        Ok(MlmcBoundInputs {
            delta_fourth,
            sum_fourth,
        })
    }

    /// Exact sum over entry pairs of the covariance-of-covariance matrices
    /// over all levels: `((Tr X)² + Tr(X X)) / (m − 1)` with
    /// `X = C(Z_ℓ, Z_ℓ')`, returned in [`CovCovModel`] form.
    pub fn averaged_covcov(&self) -> Result<CovCovModel> {
        self.elements()?;
        let l = self.levels();
        let mut t = DMatrix::zeros(l, l);
        for a in 0..l {
            for b in 0..l {
                let x = self.block(a, b);
                let tr = x.trace();
                t[(a, b)] = tr * tr + (&x * &x).trace();
            }
        }
        crate::linalg::symmetrize(&mut t);
        Ok(CovCovModel {
            first: t.clone(),
            second: t,
        })
    }
}

/// Draws `members` coupled samples of `levels`.
pub fn sample_group<M: CoupledModel + ?Sized>(
    model: &M,
    levels: &[usize],
    members: usize,
    seed: u64,
    domain: Domain,
    group: usize,
) -> GroupSamples {
    let sizes: Vec<usize> = {
        let all = model.level_sizes();
        levels.iter().map(|&l| all[l]).collect()
    };
    let mut g = GroupSamples::zeros(levels.to_vec(), sizes, members);
    let work: usize = g.sizes().iter().sum::<usize>() * members;
    let fill = |(i, chunk): (usize, &mut [f64])| {
        model.draw(levels, &StreamKey::new(seed, domain, group, i), chunk);
    };
    if work > 1 << 14 {
        g.members_mut().enumerate().par_bridge().for_each(fill);
    } else {
        g.members_mut().enumerate().for_each(fill);
    }
    g
}

/// Draws an ensemble for every group of `structure` (which must carry
/// sample sizes). Groups use independent streams.
pub fn sample_ensemble<M: CoupledModel + ?Sized>(
    model: &M,
    structure: &CouplingStructure,
    seed: u64,
) -> Result<Ensemble> {
    sample_ensemble_in(model, structure, seed, Domain::Samples)
}

pub fn sample_ensemble_in<M: CoupledModel + ?Sized>(
    model: &M,
    structure: &CouplingStructure,
    seed: u64,
    domain: Domain,
) -> Result<Ensemble> {
    structure.ensure_valid()?;
    check_len("model levels", structure.levels(), model.levels())?;
    let m = structure.require_samples()?;
    let groups = structure
        .groups()
        .iter()
        .zip(m)
        .enumerate()
        .map(|(k, (g, &mk))| sample_group(model, g, mk as usize, seed, domain, k))
        .collect();
    Ok(Ensemble {
        level_sizes: model.level_sizes(),
        groups,
        metadata: EnsembleMetadata {
            seed: Some(seed),
            generator: Some(GENERATOR.to_string()),
            independent_groups: true,
        },
    })
}

/// An ensemble of `members` draws coupling all levels, from streams
/// disjoint from [`sample_ensemble`]'s.
pub fn calibration_ensemble<M: CoupledModel + ?Sized>(model: &M, members: usize, seed: u64) -> GroupSamples {
    let levels: Vec<usize> = (0..model.levels()).collect();
    sample_group(model, &levels, members, seed, Domain::Calibration, 0)
}

/// Estimator outputs over independent replications.
#[derive(Debug, Clone, PartialEq)]
pub struct Replications {
    pub values: Vec<Vec<f64>>,
}

impl Replications {
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |v| v[j])
    }

    pub fn mean(&self) -> Vec<f64> {
        let r = self.count() as f64;
        (0..self.dim()).map(|j| self.column(j).sum::<f64>() / r).collect()
    }

    /// Unbiased per-component variance.
    pub fn variance(&self) -> Vec<f64> {
        let r = self.count() as f64;
        self.mean()
            .iter()
            .enumerate()
            .map(|(j, mu)| self.column(j).map(|x| (x - mu).powi(2)).sum::<f64>() / (r - 1.0))
            .collect()
    }

    /// Standard error of each component mean.
    pub fn mean_se(&self) -> Vec<f64> {
        let r = self.count() as f64;
        self.variance().iter().map(|v| (v / r).sqrt()).collect()
    }

    /// Standard error of each component variance, from the sample fourth
    /// central moment.
    pub fn variance_se(&self) -> Vec<f64> {
        let r = self.count() as f64;
        let var = self.variance();
        self.mean()
            .iter()
            .enumerate()
            .map(|(j, mu)| {
                let m4 = self.column(j).map(|x| (x - mu).powi(4)).sum::<f64>() / r;
                ((m4 - var[j] * var[j]).max(0.0) / r).sqrt()
            })
            .collect()
    }

    /// Sum of component variances.
    pub fn total_variance(&self) -> f64 {
        self.variance().iter().sum()
    }

    /// Squared error `‖x_r − target‖²` of every replication.
    pub fn squared_errors(&self, target: &[f64]) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum())
            .collect()
    }

    /// Mean squared error and its standard error.
    pub fn mse(&self, target: &[f64]) -> (f64, f64) {
        let e = self.squared_errors(target);
        let r = e.len() as f64;
        let mean = e.iter().sum::<f64>() / r;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r - 1.0);
        (mean, (var / r).sqrt())
    }
}

/// Applies `estimator` to `replications` independent ensembles. The
/// ensemble of replication `r` uses seed `derive_seed(seed, r)`.
pub fn replicate_estimator<M, F>(
    model: &M,
    structure: &CouplingStructure,
    replications: usize,
    seed: u64,
    estimator: F,
) -> Result<Replications>
where
    M: CoupledModel + ?Sized,
    F: Fn(&Ensemble) -> Result<Vec<f64>> + Sync,
{
    if replications < 2 {
        return Err(Error::InsufficientSamples {
            what: "replication study",
            required: 2,
            actual: replications,
        });
    }
    let values = (0..replications)
        .into_par_iter()
        .map(|r| {
            let e = sample_ensemble(model, structure, derive_seed(seed, r as u64))?;
            estimator(&e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Replications { values })
}
