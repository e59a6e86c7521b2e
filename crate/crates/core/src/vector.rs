//! Multilevel BLUE for vector-valued means: scalar weights shared by all
//! elements, per-element (field) weights, per-coefficient weights in an
//! orthonormal basis (W-field), and full matrix weights.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::basis::{BasisKind, OrthonormalBasis};
use crate::blue::{self, invert_group, solve_with_estimator_covariances, SolveOptions, WeightSet};
use crate::container::Container;
use crate::error::{check_len, Error, Result};
use crate::linalg;
use crate::structure::CouplingStructure;

/// Default cap on `N = Σ n_ℓ` for the dense matrix-weight solver.
pub const DEFAULT_MATRIX_CAP: usize = 4096;

const INTERPOLATION_HINT: &str = "; coarse levels must be used as is, not interpolated to a finer grid";

/// Per-sample group covariances of each element: `covs[i][k]` is the
/// `p^(k) x p^(k)` covariance of element `i` across the levels of group `k`.
pub type ElementCovariances = Vec<Vec<DMatrix<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    Scalar,
    Field,
    Wfield,
    Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorWeights {
    /// One weight per (group, level), shared by all elements.
    Scalar(WeightSet),
    /// One weight set per element.
    Field(Vec<WeightSet>),
    /// One weight set per coefficient of `basis`.
    Wfield {
        basis: OrthonormalBasis,
        field: Vec<WeightSet>,
    },
    /// `blocks[k][pos]` maps level `S^(k)[pos]` (size `n_ℓ`) to the output.
    Matrix {
        blocks: Vec<Vec<DMatrix<f64>>>,
        alpha: DMatrix<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorWeightSet {
    pub weights: VectorWeights,
    /// Total variance `Σᵢ Var(μ̂ᵢ)` of the estimator.
    pub variance: f64,
    /// Elements whose weights fell back to the scalar weights.
    pub fallback_elements: Vec<usize>,
}

impl VectorWeightSet {
    pub fn flavor(&self) -> Flavor {
        match self.weights {
            VectorWeights::Scalar(_) => Flavor::Scalar,
            VectorWeights::Field(_) => Flavor::Field,
            VectorWeights::Wfield { .. } => Flavor::Wfield,
            VectorWeights::Matrix { .. } => Flavor::Matrix,
        }
    }

    /// Largest no-bias violation over elements, coefficients or matrix
    /// entries.
    pub fn bias_defect(&self, structure: &CouplingStructure) -> f64 {
        match &self.weights {
            VectorWeights::Scalar(w) => w.bias_defect(structure),
            VectorWeights::Field(f) | VectorWeights::Wfield { field: f, .. } => f
                .iter()
                .map(|w| w.bias_defect(structure))
                .fold(0.0, f64::max),
            VectorWeights::Matrix { blocks, alpha } => {
                let sizes = block_level_sizes(structure, blocks);
                let offsets = offsets(&sizes);
                let mut acc = DMatrix::zeros(alpha.nrows(), alpha.ncols());
                for (k, g) in structure.groups().iter().enumerate() {
                    for (pos, &l) in g.iter().enumerate() {
                        let mut v = acc.view_mut((0, offsets[l]), (alpha.nrows(), sizes[l]));
                        v += &blocks[k][pos];
                    }
                }
                (acc - alpha).amax()
            }
        }
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &n in sizes {
        out.push(acc);
        acc += n;
    }
    out
}

fn block_level_sizes(structure: &CouplingStructure, blocks: &[Vec<DMatrix<f64>>]) -> Vec<usize> {
    let mut sizes = vec![0; structure.levels()];
    for (k, g) in structure.groups().iter().enumerate() {
        for (pos, &l) in g.iter().enumerate() {
            sizes[l] = blocks[k][pos].ncols();
        }
    }
    sizes
}

fn estimator_covs(structure: &CouplingStructure, per_sample: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    blue::GroupMomentSet::per_sample(per_sample.to_vec()).estimator_covariances(structure)
}

fn check_elements(structure: &CouplingStructure, covs: &ElementCovariances) -> Result<()> {
    if covs.is_empty() {
        return Err(Error::InvalidArgument("at least one element is required".into()));
    }
    for c in covs {
        check_len("element group covariances", structure.num_groups(), c.len())?;
    }
    Ok(())
}

/// `C̄^(k) = Σᵢ C^(k,i)`.
pub fn averaged_covariances(covs: &ElementCovariances) -> Vec<DMatrix<f64>> {
    let mut acc: Vec<DMatrix<f64>> = covs[0].clone();
    for c in &covs[1..] {
        for (a, b) in acc.iter_mut().zip(c) {
            *a += b;
        }
    }
    acc
}

/// Scalar weights shared by all elements, optimal for the total variance.
pub fn scalar_weights_nd(
    structure: &CouplingStructure,
    covs: &ElementCovariances,
    alpha: &[f64],
) -> Result<VectorWeightSet> {
    check_elements(structure, covs)?;
    let avg = estimator_covs(structure, &averaged_covariances(covs))?;
    let (w, variance) = solve_with_estimator_covariances(structure, &avg, alpha, &SolveOptions::default())?;
    Ok(VectorWeightSet {
        weights: VectorWeights::Scalar(w),
        variance,
        fallback_elements: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOptions {
    pub solve: SolveOptions,
    /// Use the scalar weights for elements whose own problem is singular,
    /// instead of failing.
    pub fallback_to_scalar: bool,
}

impl Default for FieldOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions::default(),
            fallback_to_scalar: true,
        }
    }
}

fn field_solve(
    structure: &CouplingStructure,
    covs: &ElementCovariances,
    alpha: &[f64],
    opts: &FieldOptions,
) -> Result<(Vec<WeightSet>, f64, Vec<usize>)> {
    check_elements(structure, covs)?;
    let results: Vec<Result<(WeightSet, f64)>> = covs
        .par_iter()
        .map(|c| {
            let est = estimator_covs(structure, c)?;
            solve_with_estimator_covariances(structure, &est, alpha, &opts.solve)
        })
        .collect();
    let mut scalar: Option<WeightSet> = None;
    let mut weights = Vec::with_capacity(covs.len());
    let mut variance = 0.0;
    let mut fallback = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok((w, v)) => {
                weights.push(w);
                variance += v;
            }
            Err(e @ (Error::SingularGroupCovariance { .. } | Error::SingularPhi)) => {
                if !opts.fallback_to_scalar {
                    return Err(Error::SingularElement {
                        element: i,
                        source: Box::new(e),
                    });
                }
                log::warn!("element {i}: {e}; using scalar weights for this element");
                if scalar.is_none() {
                    match scalar_weights_nd(structure, covs, alpha)?.weights {
                        VectorWeights::Scalar(w) => scalar = Some(w),
                        _ => unreachable!(),
                    }
                }
                let w = scalar.clone().expect("computed above");
                variance += w.variance(&estimator_covs(structure, &covs[i])?);
                weights.push(w);
                fallback.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((weights, variance, fallback))
}

/// Independent scalar MLBLUE weights for every element.
pub fn field_weights_nd(
    structure: &CouplingStructure,
    covs: &ElementCovariances,
    alpha: &[f64],
) -> Result<VectorWeightSet> {
    field_weights_nd_with(structure, covs, alpha, &FieldOptions::default())
}

pub fn field_weights_nd_with(
    structure: &CouplingStructure,
    covs: &ElementCovariances,
    alpha: &[f64],
    opts: &FieldOptions,
) -> Result<VectorWeightSet> {
    let (w, variance, fallback_elements) = field_solve(structure, covs, alpha, opts)?;
    Ok(VectorWeightSet {
        weights: VectorWeights::Field(w),
        variance,
        fallback_elements,
    })
}

/// Field weights on the coefficients of `basis`. `coefficient_covs[s][k]`
/// is the covariance of coefficient `s` (of `Wᵀ Z_ℓ`) across the levels of
/// group `k`. By orthonormality the reported variance is also the total
/// variance in physical coordinates.
pub fn wfield_weights(
    structure: &CouplingStructure,
    coefficient_covs: &ElementCovariances,
    alpha: &[f64],
    basis: &OrthonormalBasis,
) -> Result<VectorWeightSet> {
    check_len("basis dimension", coefficient_covs.len(), basis.dim())?;
    basis.check_orthonormal(0)?;
    let (field, variance, fallback_elements) =
        field_solve(structure, coefficient_covs, alpha, &FieldOptions::default())?;
    Ok(VectorWeightSet {
        weights: VectorWeights::Wfield {
            basis: basis.clone(),
            field,
        },
        variance,
        fallback_elements,
    })
}

/// Splits stacked group covariances (levels of equal size `n`) into
/// per-element covariances.
pub fn element_covariances(
    structure: &CouplingStructure,
    stacked: &[DMatrix<f64>],
    n: usize,
) -> Result<ElementCovariances> {
    check_len("stacked covariances", structure.num_groups(), stacked.len())?;
    for (k, c) in stacked.iter().enumerate() {
        check_len("stacked covariance size", structure.group_size(k) * n, c.nrows())?;
    }
    Ok((0..n)
        .map(|i| {
            stacked
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let p = structure.group_size(k);
                    DMatrix::from_fn(p, p, |a, b| c[(a * n + i, b * n + i)])
                })
                .collect()
        })
        .collect())
}

/// `diag(W, ..., W)ᵀ C diag(W, ..., W)` for every stacked group covariance.
/// The identity basis returns the inputs unchanged.
pub fn transform_stacked(
    structure: &CouplingStructure,
    stacked: &[DMatrix<f64>],
    basis: &OrthonormalBasis,
) -> Result<Vec<DMatrix<f64>>> {
    let n = basis.dim();
    stacked
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let p = structure.group_size(k);
            check_len("stacked covariance size", p * n, c.nrows())?;
            if basis.kind() == BasisKind::Identity {
                return Ok(c.clone());
            }
            let mut big = DMatrix::zeros(p * n, p * n);
            for a in 0..p {
                big.view_mut((a * n, a * n), (n, n)).copy_from(basis.matrix());
            }
            let mut t = big.tr_mul(c) * &big;
            linalg::symmetrize(&mut t);
            Ok(t)
        })
        .collect()
}

/// `𝛂 = αᵀ ⊗ I_n` for levels of equal size `n`.
pub fn kron_alpha(alpha: &[f64], n: usize) -> DMatrix<f64> {
    let l = alpha.len();
    DMatrix::from_fn(n, l * n, |i, j| if j % n == i { alpha[j / n] } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixOptions {
    pub solve: SolveOptions,
    pub max_dimension: usize,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self {
            solve: SolveOptions::default(),
            max_dimension: DEFAULT_MATRIX_CAP,
        }
    }
}

/// Matrix-weight solution with the matrices needed for diagnostics.
struct MatrixSolve {
    blocks: Vec<Vec<DMatrix<f64>>>,
    variance: f64,
}

fn matrix_solve(
    structure: &CouplingStructure,
    level_sizes: &[usize],
    stacked: &[DMatrix<f64>],
    alpha: &DMatrix<f64>,
    samples: &[u64],
    opts: &MatrixOptions,
) -> Result<MatrixSolve> {
    let total: usize = level_sizes.iter().sum();
    if total > opts.max_dimension {
        return Err(Error::TooLarge {
            size: total,
            cap: opts.max_dimension,
        });
    }
    check_len("alpha columns", total, alpha.ncols())?;
    let off = offsets(level_sizes);
    let index = |k: usize| -> Vec<usize> {
        structure
            .group(k)
            .iter()
            .flat_map(|&l| off[l]..off[l] + level_sizes[l])
            .collect()
    };
    let mut phi = DMatrix::zeros(total, total);
    let mut inverses = Vec::with_capacity(stacked.len());
    for (k, c) in stacked.iter().enumerate() {
        let idx = index(k);
        check_len("group covariance size", idx.len(), c.nrows())?;
        if samples[k] == 0 {
            return Err(Error::ZeroSamples(k));
        }
        let inv = invert_group(k, c, &opts.solve, INTERPOLATION_HINT)? * samples[k] as f64;
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                phi[(ia, ib)] += inv[(a, b)];
            }
        }
        inverses.push(inv);
    }
    linalg::symmetrize(&mut phi);
    let chol = linalg::cholesky(&phi).ok_or(Error::SingularPhi)?;
    // Λ = 𝛂 φ⁻¹, computed as (φ⁻¹ 𝛂ᵀ)ᵀ.
    let lambda = chol.solve(&alpha.transpose()).transpose();
    let variance = (&lambda * alpha.transpose()).trace();

    // Levels held by a single group have their block fixed by the no-bias
    // condition; pin them to 𝛂 exactly.
    let mut owners = vec![0usize; structure.levels()];
    for g in structure.groups() {
        for &l in g {
            owners[l] += 1;
        }
    }
    let blocks = inverses
        .iter()
        .enumerate()
        .map(|(k, inv)| {
            let idx = index(k);
            let lam_k = DMatrix::from_fn(alpha.nrows(), idx.len(), |r, c| lambda[(r, idx[c])]);
            let beta = lam_k * inv;
            let mut col = 0;
            structure
                .group(k)
                .iter()
                .map(|&l| {
                    let n = level_sizes[l];
                    let b = if owners[l] == 1 {
                        alpha.columns(off[l], n).into_owned()
                    } else {
                        beta.columns(col, n).into_owned()
                    };
                    col += n;
                    b
                })
                .collect()
        })
        .collect();
    Ok(MatrixSolve { blocks, variance })
}

/// Full matrix weights `𝛃^(k) = m^(k) 𝛂 φ⁻¹ 𝐏^(k) (𝐂^(k))⁻¹` with
/// `φ = Σ_k m^(k) 𝐏^(k) (𝐂^(k))⁻¹ 𝐑^(k)`; `stacked[k]` is the per-sample
/// covariance of the stacked level vectors of group `k`, and `alpha` the
/// `n_out x N` target map.
pub fn matrix_weights(
    structure: &CouplingStructure,
    level_sizes: &[usize],
    stacked: &[DMatrix<f64>],
    alpha: &DMatrix<f64>,
) -> Result<VectorWeightSet> {
    matrix_weights_with(structure, level_sizes, stacked, alpha, &MatrixOptions::default())
}

pub fn matrix_weights_with(
    structure: &CouplingStructure,
    level_sizes: &[usize],
    stacked: &[DMatrix<f64>],
    alpha: &DMatrix<f64>,
    opts: &MatrixOptions,
) -> Result<VectorWeightSet> {
    structure.ensure_valid()?;
    check_len("level sizes", structure.levels(), level_sizes.len())?;
    check_len("group covariances", structure.num_groups(), stacked.len())?;
    let samples = structure.require_samples()?;
    let s = matrix_solve(structure, level_sizes, stacked, alpha, samples, opts)?;
    Ok(VectorWeightSet {
        weights: VectorWeights::Matrix {
            blocks: s.blocks,
            alpha: alpha.clone(),
        },
        variance: s.variance,
        fallback_elements: Vec::new(),
    })
}

/// Residual of the stationarity system `𝛃^(k) ℂ^(k) = Λ 𝐏^(k)`,
/// `Λ = 𝛂 φ⁻¹`, relative to `‖Λ‖`.
pub fn matrix_stationarity_residual(
    structure: &CouplingStructure,
    level_sizes: &[usize],
    stacked: &[DMatrix<f64>],
    weights: &VectorWeightSet,
) -> Result<f64> {
    let VectorWeights::Matrix { blocks, alpha } = &weights.weights else {
        return Err(Error::InvalidArgument("expected matrix weights".into()));
    };
    let samples = structure.require_samples()?;
    let off = offsets(level_sizes);
    let total: usize = level_sizes.iter().sum();
    let mut phi = DMatrix::zeros(total, total);
    let mut idxs = Vec::new();
    for (k, c) in stacked.iter().enumerate() {
        let idx: Vec<usize> = structure
            .group(k)
            .iter()
            .flat_map(|&l| off[l]..off[l] + level_sizes[l])
            .collect();
        let inv = c.clone().try_inverse().ok_or(Error::SingularGroupCovariance {
            group: k,
            condition: f64::INFINITY,
            hint: INTERPOLATION_HINT,
        })? * samples[k] as f64;
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                phi[(ia, ib)] += inv[(a, b)];
            }
        }
        idxs.push(idx);
    }
    let lambda = phi
        .lu()
        .solve(&alpha.transpose())
        .ok_or(Error::SingularPhi)?
        .transpose();
    let scale = lambda.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for (k, c) in stacked.iter().enumerate() {
        let beta = DMatrix::from_fn(alpha.nrows(), idxs[k].len(), |r, col| {
            let mut acc = 0;
            for (pos, &l) in structure.group(k).iter().enumerate() {
                if col < acc + level_sizes[l] {
                    return blocks[k][pos][(r, col - acc)];
                }
                acc += level_sizes[l];
            }
            unreachable!()
        });
        let lhs = beta * (c / samples[k] as f64);
        let rhs = DMatrix::from_fn(alpha.nrows(), idxs[k].len(), |r, col| lambda[(r, idxs[k][col])]);
        worst = worst.max((lhs - rhs).amax() / scale);
    }
    Ok(worst)
}

/// Evaluates the optimal matrix-weight variance at each candidate sample
/// allocation and returns `(samples, variance, cost)` per candidate.
pub fn matrix_allocation_candidates(
    structure: &CouplingStructure,
    level_sizes: &[usize],
    stacked: &[DMatrix<f64>],
    alpha: &DMatrix<f64>,
    candidates: &[Vec<u64>],
) -> Result<Vec<(Vec<u64>, f64, f64)>> {
    candidates
        .par_iter()
        .map(|m| {
            check_len("candidate sample sizes", structure.num_groups(), m.len())?;
            let s = matrix_solve(structure, level_sizes, stacked, alpha, m, &MatrixOptions::default())?;
            let cost = m
                .iter()
                .zip(structure.costs())
                .map(|(&x, c)| x as f64 * c)
                .sum();
            Ok((m.clone(), s.variance, cost))
        })
        .collect()
}

/// Applies the estimator to per-group Monte Carlo means
/// `means[k][pos][element]`.
pub fn apply_vector_estimator(weights: &VectorWeightSet, means: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    let combine_field = |field: &[WeightSet], means: &[Vec<Vec<f64>>]| -> Result<Vec<f64>> {
        let n = field.len();
        let mut out = vec![0.0; n];
        check_len("group means", field[0].betas.len(), means.len())?;
        for (k, g) in means.iter().enumerate() {
            check_len("level means", field[0].betas[k].len(), g.len())?;
            for (pos, v) in g.iter().enumerate() {
                check_len("element count", n, v.len())?;
                for (i, o) in out.iter_mut().enumerate() {
                    *o += field[i].betas[k][pos] * v[i];
                }
            }
        }
        Ok(out)
    };
    match &weights.weights {
        VectorWeights::Scalar(w) => {
            check_len("group means", w.betas.len(), means.len())?;
            let n = means
                .iter()
                .flat_map(|g| g.first())
                .map(Vec::len)
                .next()
                .unwrap_or(0);
            let mut out = vec![0.0; n];
            for (b, g) in w.betas.iter().zip(means) {
                check_len("level means", b.len(), g.len())?;
                for (beta, v) in b.iter().zip(g) {
                    check_len("element count", n, v.len())?;
                    for (o, x) in out.iter_mut().zip(v) {
                        *o += beta * x;
                    }
                }
            }
            Ok(out)
        }
        VectorWeights::Field(field) => combine_field(field, means),
        VectorWeights::Wfield { basis, field } => {
            let transformed: Vec<Vec<Vec<f64>>> = means
                .iter()
                .map(|g| g.iter().map(|v| basis.forward(v)).collect())
                .collect();
            Ok(basis.inverse(&combine_field(field, &transformed)?))
        }
        VectorWeights::Matrix { blocks, alpha } => {
            check_len("group means", blocks.len(), means.len())?;
            let mut out = DVector::zeros(alpha.nrows());
            for (bk, g) in blocks.iter().zip(means) {
                check_len("level means", bk.len(), g.len())?;
                for (b, v) in bk.iter().zip(g) {
                    check_len("element count", b.ncols(), v.len())?;
                    out += b * DVector::from_column_slice(v);
                }
            }
            Ok(out.as_slice().to_vec())
        }
    }
}

fn weights_matrix(field: &[WeightSet]) -> Vec<f64> {
    field.iter().flat_map(|w| w.betas.iter().flatten().copied()).collect()
}

impl VectorWeightSet {
    /// Encodes the weights in the binary container; the flavor is recorded
    /// in the header.
    pub fn to_container(&self, structure: &CouplingStructure) -> Result<Container> {
        let groups: Vec<Vec<usize>> = structure
            .groups()
            .iter()
            .map(|g| g.iter().map(|l| l + 1).collect())
            .collect();
        let p = structure.total_size();
        let (alpha, biased) = match &self.weights {
            VectorWeights::Scalar(w) => (json!(w.alpha), w.biased),
            VectorWeights::Field(f) | VectorWeights::Wfield { field: f, .. } => (json!(f[0].alpha), f[0].biased),
            VectorWeights::Matrix { .. } => (serde_json::Value::Null, false),
        };
        let mut c = Container::new(
            "vector-weights",
            json!({
                "flavor": self.flavor(),
                "L": structure.levels(),
                "groups": groups,
                "alpha": alpha,
                "biased": biased,
                "variance": self.variance,
                "fallback_elements": self.fallback_elements,
            }),
        );
        if let VectorWeights::Wfield { basis, .. } = &self.weights {
            c.header.metadata["basis_kind"] = json!(basis.kind());
        }
        match &self.weights {
            VectorWeights::Scalar(w) => {
                c.push("beta", vec![p], w.betas.iter().flatten().copied().collect())?;
            }
            VectorWeights::Field(f) => {
                c.push("beta", vec![f.len(), p], weights_matrix(f))?;
            }
            VectorWeights::Wfield { basis, field } => {
                let n = basis.dim();
                let w = basis.matrix();
                c.push("basis", vec![n, n], (0..n * n).map(|i| w[(i / n, i % n)]).collect())?;
                c.push("beta", vec![field.len(), p], weights_matrix(field))?;
            }
            VectorWeights::Matrix { blocks, alpha } => {
                let (r, cols) = alpha.shape();
                c.push("alpha", vec![r, cols], (0..r * cols).map(|i| alpha[(i / cols, i % cols)]).collect())?;
                for (k, bk) in blocks.iter().enumerate() {
                    for (pos, b) in bk.iter().enumerate() {
                        let (r, cols) = b.shape();
                        c.push(
                            format!("group{}-level{}", k + 1, structure.group(k)[pos] + 1),
                            vec![r, cols],
                            (0..r * cols).map(|i| b[(i / cols, i % cols)]).collect(),
                        )?;
                    }
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<(CouplingStructure, Self)> {
        if c.header.kind != "vector-weights" {
            return Err(Error::Format(format!("expected vector weights, found {}", c.header.kind)));
        }
        #[derive(Deserialize)]
        struct Meta {
            flavor: Flavor,
            #[serde(rename = "L")]
            levels: usize,
            groups: Vec<Vec<usize>>,
            alpha: Option<Vec<f64>>,
            biased: bool,
            variance: f64,
            fallback_elements: Vec<usize>,
            #[serde(default)]
            basis_kind: Option<BasisKind>,
        }
        let meta: Meta = serde_json::from_value(c.header.metadata.clone())?;
        let structure = crate::structure::StructureDoc {
            levels: meta.levels,
            groups: meta.groups,
            m: None,
            costs: None,
        }
        .into_structure()?;
        let get = |name: &str| {
            c.get(name)
                .ok_or_else(|| Error::Format(format!("missing array {name}")))
        };
        let split = |flat: &[f64], alpha: &[f64]| -> WeightSet {
            let mut it = flat.iter().copied();
            WeightSet {
                betas: structure
                    .groups()
                    .iter()
                    .map(|g| it.by_ref().take(g.len()).collect())
                    .collect(),
                alpha: alpha.to_vec(),
                biased: meta.biased,
            }
        };
        let p = structure.total_size();
        let alpha = meta.alpha.clone().unwrap_or_default();
        let field_from = |data: &[f64]| -> Vec<WeightSet> { data.chunks(p).map(|ch| split(ch, &alpha)).collect() };
        let weights = match meta.flavor {
            Flavor::Scalar => VectorWeights::Scalar(split(get("beta")?.1, &alpha)),
            Flavor::Field => VectorWeights::Field(field_from(get("beta")?.1)),
            Flavor::Wfield => {
                let (spec, data) = get("basis")?;
                let n = spec.shape[0];
                let stored = DMatrix::from_row_slice(n, n, data);
                let basis = match meta.basis_kind {
                    Some(kind) if kind != BasisKind::Custom => {
                        let b = OrthonormalBasis::of_kind(kind, n)?;
                        if b.matrix() != &stored {
                            return Err(Error::Format(format!("stored basis does not match {kind:?}")));
                        }
                        b
                    }
                    _ => OrthonormalBasis::custom(stored)?,
                };
                VectorWeights::Wfield {
                    basis,
                    field: field_from(get("beta")?.1),
                }
            }
            Flavor::Matrix => {
                let (spec, data) = get("alpha")?;
                let alpha = DMatrix::from_row_slice(spec.shape[0], spec.shape[1], data);
                let mut blocks = Vec::new();
                for (k, g) in structure.groups().iter().enumerate() {
                    let mut bk = Vec::new();
                    for &l in g {
                        let (spec, data) = get(&format!("group{}-level{}", k + 1, l + 1))?;
                        bk.push(DMatrix::from_row_slice(spec.shape[0], spec.shape[1], data));
                    }
                    blocks.push(bk);
                }
                VectorWeights::Matrix { blocks, alpha }
            }
        };
        Ok((
            structure,
            VectorWeightSet {
                weights,
                variance: meta.variance,
                fallback_elements: meta.fallback_elements,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blue::finest_level_target;

    fn spd(p: usize, seed: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |i, j| ((i * 7 + j * 3) as f64 * seed).sin());
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    #[test]
    fn one_element_reduces_to_scalar() {
        let s = CouplingStructure::mlmc(3).with_samples(vec![20, 10, 5]);
        let covs: ElementCovariances = vec![(0..3).map(|k| spd(s.group_size(k), 0.3 + k as f64)).collect()];
        let a = finest_level_target(3);
        let sc = scalar_weights_nd(&s, &covs, &a).unwrap();
        let fi = field_weights_nd(&s, &covs, &a).unwrap();
        let direct = blue::optimal_scalar_weights(&s, &blue::GroupMomentSet::per_sample(covs[0].clone()), &a).unwrap();
        let VectorWeights::Scalar(w) = &sc.weights else { panic!() };
        assert_eq!(w.betas, direct.betas);
        let VectorWeights::Field(f) = &fi.weights else { panic!() };
        assert_eq!(f[0].betas, direct.betas);
    }

    #[test]
    fn singular_element_falls_back() {
        let s = CouplingStructure::single_group(2).with_samples(vec![4]);
        let good = vec![spd(2, 0.7)];
        let bad = vec![DMatrix::from_element(2, 2, 1.0)];
        let covs = vec![good, bad];
        let a = finest_level_target(2);
        let w = field_weights_nd(&s, &covs, &a).unwrap();
        assert_eq!(w.fallback_elements, vec![1]);
        let strict = FieldOptions {
            fallback_to_scalar: false,
            ..FieldOptions::default()
        };
        assert!(matches!(
            field_weights_nd_with(&s, &covs, &a, &strict),
            Err(Error::SingularElement { element: 1, .. })
        ));
    }

    #[test]
    fn matrix_cap_is_enforced() {
        let s = CouplingStructure::single_group(1).with_samples(vec![3]);
        let opts = MatrixOptions {
            max_dimension: 2,
            ..MatrixOptions::default()
        };
        let r = matrix_weights_with(&s, &[3], &[spd(3, 0.1)], &kron_alpha(&[1.0], 3), &opts);
        assert!(matches!(r, Err(Error::TooLarge { size: 3, cap: 2 })));
    }
}
