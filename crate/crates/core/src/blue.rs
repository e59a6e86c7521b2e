//! The scalar multilevel BLUE: optimal group weights, their variance, and a
//! dense saddle-point solve used as an independent cross-check.
//!
//! Everything here is generic over the estimator covariance matrices of the
//! groups, so the same code serves mean estimation (per-sample covariances
//! divided by `m`) and covariance estimation (covariance-of-covariance
//! matrices, see [`crate::moments`]).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg;
use crate::structure::CouplingStructure;

/// Relative symmetry tolerance accepted for group matrices.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Default cap on the condition number of a group matrix.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentKind {
    /// Covariances of one coupled sample; divided by `m^(k)` before use.
    PerSample,
    /// Covariances of the group estimators, sample size already included.
    Estimator,
}

/// One symmetric matrix per coupling group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMomentSet {
    pub kind: MomentKind,
    pub matrices: Vec<DMatrix<f64>>,
}

impl GroupMomentSet {
    pub fn per_sample(matrices: Vec<DMatrix<f64>>) -> Self {
        Self {
            kind: MomentKind::PerSample,
            matrices,
        }
    }

    pub fn estimator(matrices: Vec<DMatrix<f64>>) -> Self {
        Self {
            kind: MomentKind::Estimator,
            matrices,
        }
    }

    /// Per-sample covariances of every group, cut out of one `L x L` level
    /// covariance.
    pub fn from_level_covariance(structure: &CouplingStructure, cov: &DMatrix<f64>) -> Self {
        Self::per_sample(
            (0..structure.num_groups())
                .map(|k| structure.restrict_matrix(k, cov))
                .collect(),
        )
    }

    /// Checks shapes and symmetry against `structure`.
    pub fn check(&self, structure: &CouplingStructure) -> Result<()> {
        check_len("group moment matrices", structure.num_groups(), self.matrices.len())?;
        for (k, m) in self.matrices.iter().enumerate() {
            let p = structure.group_size(k);
            check_len("group matrix rows", p, m.nrows())?;
            check_len("group matrix columns", p, m.ncols())?;
            if linalg::symmetry_defect(m) > SYMMETRY_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "matrix of group {} is not symmetric",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    /// Estimator covariances `ℂ^(k)`, dividing per-sample matrices by the
    /// sample sizes of `structure`.
    pub fn estimator_covariances(&self, structure: &CouplingStructure) -> Result<Vec<DMatrix<f64>>> {
        self.check(structure)?;
        match self.kind {
            MomentKind::Estimator => Ok(self.matrices.clone()),
            MomentKind::PerSample => {
                let m = structure.require_samples()?;
                self.matrices
                    .iter()
                    .zip(m)
                    .enumerate()
                    .map(|(k, (c, &mk))| {
                        if mk == 0 {
                            Err(Error::ZeroSamples(k))
                        } else {
                            Ok(c / mk as f64)
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Scalar weights `β^(k)` for every group, together with the target `α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub betas: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// True when the weights were estimated from the samples they combine.
    #[serde(default)]
    pub biased: bool,
}

impl WeightSet {
    /// `Σ_k P^(k) β^(k)`.
    pub fn level_sums(&self, structure: &CouplingStructure) -> Vec<f64> {
        let mut acc = vec![0.0; structure.levels()];
        for (g, b) in structure.groups().iter().zip(&self.betas) {
            for (&l, &v) in g.iter().zip(b) {
                acc[l] += v;
            }
        }
        acc
    }

    /// `‖Σ_k P^(k) β^(k) − α‖∞`.
    pub fn bias_defect(&self, structure: &CouplingStructure) -> f64 {
        self.level_sums(structure)
            .iter()
            .zip(&self.alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `Σ_k β^(k)ᵀ ℂ^(k) β^(k)` for given estimator covariances.
    pub fn variance(&self, estimator_covs: &[DMatrix<f64>]) -> f64 {
        self.betas
            .iter()
            .zip(estimator_covs)
            .map(|(b, c)| linalg::quad_form(&DVector::from_column_slice(b), c))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub condition_cap: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            condition_cap: DEFAULT_CONDITION_CAP,
        }
    }
}

/// Inverted group covariances and the aggregated precision `φ`.
///
/// Groups flagged inactive are skipped; `φ` is then restricted to the
/// levels covered by active groups.
pub(crate) struct Precision {
    pub inverses: Vec<Option<DMatrix<f64>>>,
    pub phi: DMatrix<f64>,
}

pub(crate) fn invert_group(
    k: usize,
    c: &DMatrix<f64>,
    opts: &SolveOptions,
    hint: &'static str,
) -> Result<DMatrix<f64>> {
    let condition = linalg::condition_number(c);
    let singular = || Error::SingularGroupCovariance {
        group: k,
        condition,
        hint,
    };
    if !(condition <= opts.condition_cap) {
        return Err(singular());
    }
    linalg::spd_inverse(c).ok_or_else(singular)
}

pub(crate) fn precision(
    structure: &CouplingStructure,
    covs: &[DMatrix<f64>],
    active: Option<&[bool]>,
    opts: &SolveOptions,
) -> Result<Precision> {
    let l = structure.levels();
    let mut phi = DMatrix::zeros(l, l);
    let mut inverses = Vec::with_capacity(covs.len());
    for (k, c) in covs.iter().enumerate() {
        if active.is_some_and(|a| !a[k]) {
            inverses.push(None);
            continue;
        }
        let inv = invert_group(k, c, opts, "")?;
        structure.scatter_add(k, &inv, &mut phi);
        inverses.push(Some(inv));
    }
    linalg::symmetrize(&mut phi);
    Ok(Precision { inverses, phi })
}

/// `φ⁻¹ α`, failing when `φ` is singular.
pub(crate) fn phi_solve(phi: &DMatrix<f64>, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    linalg::spd_solve(phi, alpha).ok_or(Error::SingularPhi)
}

fn weights_from_precision(
    structure: &CouplingStructure,
    prec: &Precision,
    u: &DVector<f64>,
    alpha: &[f64],
) -> WeightSet {
    let betas = prec
        .inverses
        .iter()
        .enumerate()
        .map(|(k, inv)| match inv {
            Some(inv) => (inv * structure.gather(k, u)).as_slice().to_vec(),
            None => vec![0.0; structure.group_size(k)],
        })
        .collect();
    WeightSet {
        betas,
        alpha: alpha.to_vec(),
        biased: false,
    }
}

/// Optimal weights and variance for already assembled estimator covariances.
///
/// This is the generic entry point shared by mean and covariance estimation.
pub fn solve_with_estimator_covariances(
    structure: &CouplingStructure,
    covs: &[DMatrix<f64>],
    alpha: &[f64],
    opts: &SolveOptions,
) -> Result<(WeightSet, f64)> {
    structure.ensure_valid()?;
    check_len("alpha", structure.levels(), alpha.len())?;
    check_len("group covariances", structure.num_groups(), covs.len())?;
    let prec = precision(structure, covs, None, opts)?;
    let a = DVector::from_column_slice(alpha);
    let u = phi_solve(&prec.phi, &a)?;
    let variance = a.dot(&u);
    Ok((weights_from_precision(structure, &prec, &u, alpha), variance))
}

/// Optimal weights `β^(k) = (ℂ^(k))⁻¹ R^(k) φ⁻¹ α`.
pub fn optimal_scalar_weights(
    structure: &CouplingStructure,
    moments: &GroupMomentSet,
    alpha: &[f64],
) -> Result<WeightSet> {
    optimal_scalar_weights_with(structure, moments, alpha, &SolveOptions::default())
}

pub fn optimal_scalar_weights_with(
    structure: &CouplingStructure,
    moments: &GroupMomentSet,
    alpha: &[f64],
    opts: &SolveOptions,
) -> Result<WeightSet> {
    let covs = moments.estimator_covariances(structure)?;
    Ok(solve_with_estimator_covariances(structure, &covs, alpha, opts)?.0)
}

/// Minimal variance `αᵀ φ⁻¹ α`.
pub fn mlblue_variance(
    structure: &CouplingStructure,
    moments: &GroupMomentSet,
    alpha: &[f64],
) -> Result<f64> {
    let covs = moments.estimator_covariances(structure)?;
    Ok(solve_with_estimator_covariances(structure, &covs, alpha, &SolveOptions::default())?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub weights: WeightSet,
    /// Lagrange multipliers of the no-bias constraint, one per level.
    pub multipliers: Vec<f64>,
}

/// Solves the full `(p + L) x (p + L)` saddle-point system
///
/// ```text
/// [ Σ  -Pᵀ ] [β]   [0]
/// [ P   0  ] [λ] = [α]
/// ```
///
/// with a pivoted LU factorization, without inverting any group matrix.
pub fn kkt_solve(
    structure: &CouplingStructure,
    moments: &GroupMomentSet,
    alpha: &[f64],
) -> Result<KktSolution> {
    structure.ensure_valid()?;
    check_len("alpha", structure.levels(), alpha.len())?;
    let covs = moments.estimator_covariances(structure)?;
    let l = structure.levels();
    let p = structure.total_size();
    let mut a = DMatrix::zeros(p + l, p + l);
    let mut rhs = DVector::zeros(p + l);
    let mut offset = 0;
    for (k, c) in covs.iter().enumerate() {
        let g = structure.group(k);
        a.view_mut((offset, offset), (g.len(), g.len())).copy_from(c);
        for (i, &lvl) in g.iter().enumerate() {
            a[(offset + i, p + lvl)] = -1.0;
            a[(p + lvl, offset + i)] = 1.0;
        }
        offset += g.len();
    }
    for (i, &v) in alpha.iter().enumerate() {
        rhs[p + i] = v;
    }
    let lu = a.full_piv_lu();
    let x = lu.solve(&rhs).ok_or(Error::SingularSystem)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let mut betas = Vec::with_capacity(structure.num_groups());
    let mut offset = 0;
    for g in structure.groups() {
        betas.push(x.as_slice()[offset..offset + g.len()].to_vec());
        offset += g.len();
    }
    Ok(KktSolution {
        weights: WeightSet {
            betas,
            alpha: alpha.to_vec(),
            biased: false,
        },
        multipliers: x.as_slice()[p..].to_vec(),
    })
}

/// `Σ_k β^(k) · v^(k)`.
pub fn apply_scalar_estimator(weights: &WeightSet, group_values: &[Vec<f64>]) -> Result<f64> {
    check_len("group values", weights.betas.len(), group_values.len())?;
    let mut terms = Vec::new();
    for (b, v) in weights.betas.iter().zip(group_values) {
        check_len("group value vector", b.len(), v.len())?;
        terms.extend(b.iter().zip(v).map(|(x, y)| x * y));
    }
    Ok(linalg::pairwise_sum(&terms))
}

/// Telescoping MLMC weights on the MLMC pattern.
///
/// For a general `α`, group `{ℓ-1, ℓ}` gets `(-a_ℓ, a_ℓ)` with
/// `a_ℓ = Σ_{j≥ℓ} α_j`; for `α = e_L` this is the familiar `±1` pattern.
pub fn mlmc_weights(structure: &CouplingStructure, alpha: &[f64]) -> Result<WeightSet> {
    if !structure.is_mlmc() {
        return Err(Error::InvalidArgument(
            "MLMC weights need groups {1}, {1,2}, ..., {L-1,L}".into(),
        ));
    }
    check_len("alpha", structure.levels(), alpha.len())?;
    let mut tail = alpha.to_vec();
    for l in (0..tail.len().saturating_sub(1)).rev() {
        tail[l] += tail[l + 1];
    }
    let betas = (0..structure.levels())
        .map(|l| {
            if l == 0 {
                vec![tail[0]]
            } else {
                vec![-tail[l], tail[l]]
            }
        })
        .collect();
    Ok(WeightSet {
        betas,
        alpha: alpha.to_vec(),
        biased: false,
    })
}

/// `e_L`, the usual target selecting the finest level.
pub fn finest_level_target(levels: usize) -> Vec<f64> {
    let mut a = vec![0.0; levels];
    if let Some(last) = a.last_mut() {
        *last = 1.0;
    }
    a
}
