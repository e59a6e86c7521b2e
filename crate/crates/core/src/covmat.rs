//! Multilevel estimation of covariance matrices: scalar weights shared by
//! all entries, independent weights per entry, and optimal multilevel
//! localization over classes of index pairs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blue::{invert_group, solve_with_estimator_covariances, SolveOptions, WeightSet};
use crate::ensemble::{Ensemble, GroupSamples};
use crate::error::{check_len, Error, Result};
use crate::linalg;
use crate::moments::{covcov_model, CovCovMatrix, PairMoments};
use crate::structure::CouplingStructure;

/// Default cap on `n` for entrywise weights (`n²` independent solves).
pub const DEFAULT_ENTRYWISE_CAP: usize = 64;

/// Classes whose normal matrix is worse conditioned than this reuse the
/// solution of the nearest well-conditioned class.
pub const LOCALIZATION_CONDITION_CAP: f64 = 1e10;

/// Default size of the independent all-levels calibration ensemble.
pub const DEFAULT_CALIBRATION_MEMBERS: usize = 8;

/// Clipping range applied to localization weights when enabled.
pub const CLIP_RANGE: (f64, f64) = (0.0, 1.5);

/// An estimated `n x n` covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrixEstimate {
    pub matrix: DMatrix<f64>,
    /// Localized estimators are biased.
    pub biased: bool,
    pub groups: Vec<Vec<usize>>,
    pub samples: Vec<u64>,
}

/// Unbiased sample covariance matrix of every level held by `samples`.
pub fn level_sample_covariances(samples: &GroupSamples) -> Result<Vec<DMatrix<f64>>> {
    let m = samples.members();
    if m < 2 {
        return Err(Error::InsufficientSamples {
            what: "covariance matrix",
            required: 2,
            actual: m,
        });
    }
    Ok((0..samples.levels().len())
        .map(|pos| {
            let x = centered_level(samples, pos);
            let mut c = x.tr_mul(&x) / (m - 1) as f64;
            linalg::symmetrize(&mut c);
            c
        })
        .collect())
}

/// Centered `members x n` perturbation matrix of one level.
fn centered_level(samples: &GroupSamples, pos: usize) -> DMatrix<f64> {
    let m = samples.members();
    let n = samples.sizes()[pos];
    let mut x = DMatrix::from_fn(m, n, |s, i| samples.value(s, pos)[i]);
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / m as f64;
        col.add_scalar_mut(-mean);
    }
    x
}

/// `level_sample_covariances` for every group of an ensemble.
pub fn ensemble_sample_covariances(ensemble: &Ensemble) -> Result<Vec<Vec<DMatrix<f64>>>> {
    ensemble.groups.iter().map(level_sample_covariances).collect()
}

fn check_estimates(structure: &CouplingStructure, covs: &[Vec<DMatrix<f64>>]) -> Result<usize> {
    check_len("group covariance estimates", structure.num_groups(), covs.len())?;
    let n = covs
        .first()
        .and_then(|g| g.first())
        .map(|c| c.nrows())
        .unwrap_or(0);
    for (k, g) in covs.iter().enumerate() {
        check_len("level covariance estimates", structure.group_size(k), g.len())?;
        for c in g {
            check_len("covariance rows", n, c.nrows())?;
            check_len("covariance columns", n, c.ncols())?;
        }
    }
    Ok(n)
}

fn finish(structure: &CouplingStructure, mut matrix: DMatrix<f64>, biased: bool) -> CovMatrixEstimate {
    linalg::symmetrize(&mut matrix);
    CovMatrixEstimate {
        matrix,
        biased,
        groups: structure.groups().to_vec(),
        samples: structure.samples().to_vec(),
    }
}

/// Scalar-weight solution with the positions removed by the redundancy
/// guard.
#[derive(Debug, Clone, PartialEq)]
pub struct CovmatScalarSolution {
    pub weights: WeightSet,
    /// `Σ_k β^(k)ᵀ (Σᵢⱼ ℂ^(k,ij)) β^(k)`.
    pub variance: f64,
    /// `(group, level)` pairs dropped because the level was redundant in
    /// the group; they get weight zero.
    pub dropped: Vec<(usize, usize)>,
}

/// Scalar weights for `Σ_ℓ α_ℓ C(X_ℓ, X_ℓ)` from the entry-summed
/// covariances of the covariance estimators of each group.
///
/// A group whose summed matrix is singular (for instance two identical
/// levels) has its redundant levels dropped greedily, keeping the earliest
/// levels; the solve then proceeds on the reduced groups.
pub fn covmat_scalar_weights(
    structure: &CouplingStructure,
    summed: &[CovCovMatrix],
    alpha: &[f64],
) -> Result<CovmatScalarSolution> {
    structure.ensure_valid()?;
    check_len("alpha", structure.levels(), alpha.len())?;
    check_len("group covariances", structure.num_groups(), summed.len())?;
    let opts = SolveOptions::default();
    let covs: Vec<DMatrix<f64>> = summed.iter().map(|c| c.matrix.clone()).collect();
    let singular: Vec<bool> = covs
        .iter()
        .map(|c| !(linalg::condition_number(c) <= opts.condition_cap))
        .collect();
    if !singular.iter().any(|&s| s) {
        let (weights, variance) = solve_with_estimator_covariances(structure, &covs, alpha, &opts)?;
        return Ok(CovmatScalarSolution {
            weights,
            variance,
            dropped: Vec::new(),
        });
    }

    let mut kept: Vec<Vec<usize>> = Vec::with_capacity(covs.len());
    let mut dropped = Vec::new();
    for (k, c) in covs.iter().enumerate() {
        let mut keep: Vec<usize> = Vec::new();
        for pos in 0..c.nrows() {
            let mut trial = keep.clone();
            trial.push(pos);
            let sub = DMatrix::from_fn(trial.len(), trial.len(), |a, b| c[(trial[a], trial[b])]);
            if linalg::condition_number(&sub) <= opts.condition_cap {
                keep = trial;
            } else {
                dropped.push((k, structure.group(k)[pos]));
            }
        }
        kept.push(keep);
    }
    log::warn!(
        "redundant levels dropped from their groups: {}",
        dropped
            .iter()
            .map(|(k, l)| format!("level {} in group {}", l + 1, k + 1))
            .collect::<Vec<_>>()
            .join(", ")
    );

    let l = structure.levels();
    let mut phi = DMatrix::zeros(l, l);
    let mut inverses = Vec::with_capacity(covs.len());
    for (k, c) in covs.iter().enumerate() {
        let idx = &kept[k];
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |a, b| c[(idx[a], idx[b])]);
        let inv = invert_group(k, &sub, &opts, "")?;
        for (a, &pa) in idx.iter().enumerate() {
            for (b, &pb) in idx.iter().enumerate() {
                phi[(structure.group(k)[pa], structure.group(k)[pb])] += inv[(a, b)];
            }
        }
        inverses.push(inv);
    }
    linalg::symmetrize(&mut phi);
    let a = DVector::from_column_slice(alpha);
    let u = linalg::spd_solve(&phi, &a).ok_or(Error::SingularPhi)?;
    let betas = inverses
        .iter()
        .enumerate()
        .map(|(k, inv)| {
            let idx = &kept[k];
            let g = structure.group(k);
            let local = inv * DVector::from_fn(idx.len(), |a, _| u[g[idx[a]]]);
            let mut beta = vec![0.0; g.len()];
            for (a, &pa) in idx.iter().enumerate() {
                beta[pa] = local[a];
            }
            beta
        })
        .collect();
    let weights = WeightSet {
        betas,
        alpha: alpha.to_vec(),
        biased: false,
    };
    let variance = weights.variance(&covs);
    Ok(CovmatScalarSolution {
        weights,
        variance,
        dropped,
    })
}

/// `Σ_k Σ_ℓ β_ℓ^(k) B̃_ℓ^(k)`.
pub fn apply_covmat_scalar(
    structure: &CouplingStructure,
    weights: &WeightSet,
    estimates: &[Vec<DMatrix<f64>>],
) -> Result<CovMatrixEstimate> {
    let n = check_estimates(structure, estimates)?;
    let mut acc = DMatrix::zeros(n, n);
    for (b, g) in weights.betas.iter().zip(estimates) {
        for (beta, c) in b.iter().zip(g) {
            acc += c * *beta;
        }
    }
    Ok(finish(structure, acc, weights.biased))
}

/// Independent scalar-covariance weights for each entry `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntrywiseWeights {
    pub n: usize,
    /// Row-major `n x n` weight sets; `(i, j)` and `(j, i)` are equal.
    pub entries: Vec<WeightSet>,
    /// Sum of the entry variances.
    pub variance: f64,
}

impl EntrywiseWeights {
    pub fn entry(&self, i: usize, j: usize) -> &WeightSet {
        &self.entries[i * self.n + j]
    }
}

/// Estimator covariances `ℂ^(k,ij)` of every entry `(i ≤ j)`, from pair
/// moments supplied per `(group levels, i, j)`, at the structure's sample
/// sizes. Returned row-major over all `n²` entries.
pub fn entry_covariances<F>(structure: &CouplingStructure, n: usize, moments: F) -> Result<Vec<Vec<DMatrix<f64>>>>
where
    F: Fn(&[usize], usize, usize) -> PairMoments + Sync,
{
    let m = structure.require_samples()?.to_vec();
    let upper: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let solved: Vec<Vec<DMatrix<f64>>> = upper
        .par_iter()
        .map(|&(i, j)| {
            structure
                .groups()
                .iter()
                .zip(&m)
                .map(|(g, &mk)| covcov_model(&moments(g, i, j)).at(mk as f64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); n * n];
    for ((i, j), c) in upper.into_iter().zip(solved) {
        out[j * n + i] = c.clone();
        out[i * n + j] = c;
    }
    Ok(out)
}

/// One scalar covariance MLBLUE per entry; `entry_covs[i * n + j][k]` is
/// the estimator covariance `ℂ^(k,ij)`.
pub fn covmat_entrywise_weights(
    structure: &CouplingStructure,
    entry_covs: &[Vec<DMatrix<f64>>],
    alpha: &[f64],
    cap: usize,
) -> Result<EntrywiseWeights> {
    let n = (entry_covs.len() as f64).sqrt().round() as usize;
    check_len("entry covariances", n * n, entry_covs.len())?;
    if n > cap {
        return Err(Error::TooLarge { size: n, cap });
    }
    let upper: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let opts = SolveOptions::default();
    let solved: Vec<(WeightSet, f64)> = upper
        .par_iter()
        .map(|&(i, j)| {
            solve_with_estimator_covariances(structure, &entry_covs[i * n + j], alpha, &opts).map_err(|e| {
                Error::SingularElement {
                    element: i * n + j,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut entries = vec![None; n * n];
    let mut variance = 0.0;
    for ((i, j), (w, v)) in upper.into_iter().zip(solved) {
        variance += if i == j { v } else { 2.0 * v };
        entries[j * n + i] = Some(w.clone());
        entries[i * n + j] = Some(w);
    }
    Ok(EntrywiseWeights {
        n,
        entries: entries.into_iter().map(|w| w.expect("filled above")).collect(),
        variance,
    })
}

/// `Σ_k Σ_ℓ β_ℓ^(k) ∘ B̃_ℓ^(k)` with entrywise weights.
pub fn apply_covmat_entrywise(
    structure: &CouplingStructure,
    weights: &EntrywiseWeights,
    estimates: &[Vec<DMatrix<f64>>],
) -> Result<CovMatrixEstimate> {
    let n = check_estimates(structure, estimates)?;
    check_len("entrywise weight dimension", weights.n, n)?;
    let acc = DMatrix::from_fn(n, n, |i, j| {
        let w = weights.entry(i, j);
        w.betas
            .iter()
            .zip(estimates)
            .flat_map(|(b, g)| b.iter().zip(g).map(move |(beta, c)| beta * c[(i, j)]))
            .sum()
    });
    Ok(finish(structure, acc, false))
}

/// A partition of the index pairs `{0..n}²` into classes sharing one
/// localization weight.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceClassPartition {
    n: usize,
    labels: Vec<usize>,
    distances: Vec<f64>,
    periodic: bool,
}

impl EquivalenceClassPartition {
    /// Distance classes on a periodic 1-D grid: `min(|i-j|, n-|i-j|)`.
    pub fn periodic(n: usize) -> Self {
        let labels = (0..n * n)
            .map(|p| {
                let d = (p / n).abs_diff(p % n);
                d.min(n - d)
            })
            .collect();
        Self {
            n,
            labels,
            distances: (0..=n / 2).map(|d| d as f64).collect(),
            periodic: true,
        }
    }

    /// A user partition from row-major labels `0..C`, with one distance per
    /// class used to find neighbouring classes (the label itself when
    /// absent).
    pub fn from_labels(n: usize, labels: Vec<usize>, distances: Option<Vec<f64>>) -> Result<Self> {
        check_len("partition labels", n * n, labels.len())?;
        let count = labels.iter().max().map_or(0, |&c| c + 1);
        let mut used = vec![false; count];
        for i in 0..n {
            for j in 0..n {
                if labels[i * n + j] != labels[j * n + i] {
                    return Err(Error::InvalidArgument(format!(
                        "pairs ({}, {}) and ({}, {}) are in different classes",
                        i + 1,
                        j + 1,
                        j + 1,
                        i + 1
                    )));
                }
                used[labels[i * n + j]] = true;
            }
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::InvalidArgument(format!("class {c} is empty")));
        }
        let distances = match distances {
            Some(d) => {
                check_len("class distances", count, d.len())?;
                d
            }
            None => (0..count).map(|c| c as f64).collect(),
        };
        Ok(Self {
            n,
            labels,
            distances,
            periodic: false,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_classes(&self) -> usize {
        self.distances.len()
    }

    pub fn class_of(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.n + j]
    }

    pub fn distance(&self, class: usize) -> f64 {
        self.distances[class]
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes()];
        for &c in &self.labels {
            sizes[c] += 1;
        }
        sizes
    }

    /// Pairs of every class in row-major order.
    pub fn members(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (p, &c) in self.labels.iter().enumerate() {
            out[c].push((p / self.n, p % self.n));
        }
        out
    }

    pub fn to_doc(&self) -> PartitionDoc {
        if self.periodic {
            PartitionDoc {
                n: self.n,
                kind: "periodic".into(),
                class_by_distance: Some((0..self.num_classes()).map(|d| (d.to_string(), d)).collect()),
                labels: None,
                distances: None,
            }
        } else {
            PartitionDoc {
                n: self.n,
                kind: "custom".into(),
                class_by_distance: None,
                labels: Some(self.labels.chunks(self.n.max(1)).map(<[usize]>::to_vec).collect()),
                distances: Some(self.distances.clone()),
            }
        }
    }

    pub fn from_doc(doc: PartitionDoc) -> Result<Self> {
        match doc.kind.as_str() {
            "periodic" => Ok(Self::periodic(doc.n)),
            "custom" => {
                let labels = doc
                    .labels
                    .ok_or_else(|| Error::InvalidArgument("custom partition needs labels".into()))?;
                Self::from_labels(doc.n, labels.concat(), doc.distances)
            }
            other => Err(Error::InvalidArgument(format!("unknown partition kind {other}"))),
        }
    }
}

/// Text form of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionDoc {
    pub n: usize,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_by_distance: Option<BTreeMap<String, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<f64>>,
}

/// The rational coefficients relating `B_{a,ij} B_{b,ij}` to expectations of
/// sample statistics of `m ≥ 4` joint draws.
pub fn sample_relation_coefficients(m: u64) -> Result<(f64, f64, f64)> {
    if m < 4 {
        return Err(Error::InsufficientSamples {
            what: "product of covariances from sample statistics",
            required: 4,
            actual: m as usize,
        });
    }
    let m = m as f64;
    let d = m * (m - 2.0) * (m - 3.0);
    Ok((
        (m - 1.0) * (m * m - 3.0 * m + 1.0) / d,
        (m - 1.0) / d,
        -m / ((m - 2.0) * (m - 3.0)),
    ))
}

/// Per-level statistics of a calibration ensemble for estimating products
/// of covariances `B_{a,ij} B_{b,ij}`.
struct Calibration {
    centered: Vec<DMatrix<f64>>,
    m: usize,
    coefficients: (f64, f64, f64),
}

impl Calibration {
    fn new(samples: &GroupSamples, levels: usize) -> Result<Self> {
        let m = samples.members();
        let coefficients = sample_relation_coefficients(m as u64)?;
        let centered = (0..levels)
            .map(|l| {
                let pos = samples.position(l).ok_or_else(|| {
                    Error::InvalidArgument(format!("calibration ensemble lacks level {}", l + 1))
                })?;
                Ok(centered_level(samples, pos))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            centered,
            m,
            coefficients,
        })
    }

    /// Entrywise estimate of `B_{a,ij} B_{b,ij}` as an `n x n` matrix.
    fn products(&self, a: usize, b: usize) -> DMatrix<f64> {
        let (xa, xb) = (&self.centered[a], &self.centered[b]);
        let mf = self.m as f64;
        let caa = xa.tr_mul(xa) / (mf - 1.0);
        let cbb = xb.tr_mul(xb) / (mf - 1.0);
        let cab = xa.tr_mul(xb) / (mf - 1.0);
        let y = xa.component_mul(xb);
        let m4 = y.tr_mul(&y) / mf;
        let (p1, p2, p3) = self.coefficients;
        let n = caa.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            p1 * caa[(i, j)] * cbb[(i, j)]
                + p2 * (cab[(i, i)] * cab[(j, j)] + cab[(i, j)] * cab[(j, i)])
                + p3 * m4[(i, j)]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationOptions {
    /// Target weights over levels; defaults to the finest level.
    pub alpha: Option<Vec<f64>>,
    /// Clip weights to [`CLIP_RANGE`].
    pub clip: bool,
    /// Use a random subset of at most this many pairs per class.
    pub max_pairs_per_class: Option<usize>,
    pub subset_seed: u64,
    pub condition_cap: f64,
}

impl Default for LocalizationOptions {
    fn default() -> Self {
        Self {
            alpha: None,
            clip: false,
            max_pairs_per_class: None,
            subset_seed: 0,
            condition_cap: LOCALIZATION_CONDITION_CAP,
        }
    }
}

/// Localization weights `L_{ℓ,𝒞}^(k)` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub groups: Vec<Vec<usize>>,
    /// `weights[class][k][pos]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    /// Condition number of each class system (infinite when not solved).
    pub condition: Vec<f64>,
    /// Class whose solution was reused, for ill-conditioned classes.
    pub fallback_from: Vec<Option<usize>>,
}

impl LocalizationMap {
    /// The same weights for every class: a plain multilevel estimator.
    pub fn uniform(partition: &EquivalenceClassPartition, structure: &CouplingStructure, weights: &WeightSet) -> Self {
        let c = partition.num_classes();
        Self {
            groups: structure.groups().to_vec(),
            weights: vec![weights.betas.clone(); c],
            condition: vec![1.0; c],
            fallback_from: vec![None; c],
        }
    }

    /// Assembled `n x n` localization matrix of group `k`, position `pos`.
    pub fn matrix(&self, partition: &EquivalenceClassPartition, k: usize, pos: usize) -> DMatrix<f64> {
        let n = partition.n();
        DMatrix::from_fn(n, n, |i, j| self.weights[partition.class_of(i, j)][k][pos])
    }

    /// Smallest eigenvalue of every assembled localization matrix,
    /// `[k][pos]`; negative values mean the matrix is not PSD.
    pub fn psd_diagnostic(&self, partition: &EquivalenceClassPartition) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .enumerate()
            .map(|(k, g)| {
                (0..g.len())
                    .map(|pos| linalg::smallest_eigenvalue(&self.matrix(partition, k, pos)))
                    .collect()
            })
            .collect()
    }

    pub fn to_doc(&self, partition: &EquivalenceClassPartition) -> LocalizationDoc {
        let classes = self
            .weights
            .iter()
            .enumerate()
            .map(|(c, w)| ClassWeights {
                class: c,
                distance: partition.distance(c),
                condition: self.condition[c].is_finite().then_some(self.condition[c]),
                fallback_from: self.fallback_from[c],
                weights: self
                    .groups
                    .iter()
                    .enumerate()
                    .flat_map(|(k, g)| {
                        g.iter()
                            .enumerate()
                            .map(move |(pos, &l)| (format!("group{}-level{}", k + 1, l + 1), w[k][pos]))
                    })
                    .collect(),
            })
            .collect();
        LocalizationDoc {
            groups: self
                .groups
                .iter()
                .map(|g| g.iter().map(|l| l + 1).collect())
                .collect(),
            classes,
        }
    }

    pub fn from_doc(doc: &LocalizationDoc) -> Result<Self> {
        let groups: Vec<Vec<usize>> = doc
            .groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&l| {
                        l.checked_sub(1)
                            .ok_or_else(|| Error::Format("levels are 1-based".into()))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut weights = Vec::with_capacity(doc.classes.len());
        for (c, cw) in doc.classes.iter().enumerate() {
            if cw.class != c {
                return Err(Error::Format(format!("class {} listed out of order", cw.class)));
            }
            let per_group = groups
                .iter()
                .enumerate()
                .map(|(k, g)| {
                    g.iter()
                        .map(|&l| {
                            let key = format!("group{}-level{}", k + 1, l + 1);
                            cw.weights
                                .get(&key)
                                .copied()
                                .ok_or_else(|| Error::Format(format!("class {c} lacks {key}")))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            weights.push(per_group);
        }
        Ok(Self {
            groups,
            weights,
            condition: doc
                .classes
                .iter()
                .map(|c| c.condition.unwrap_or(f64::INFINITY))
                .collect(),
            fallback_from: doc.classes.iter().map(|c| c.fallback_from).collect(),
        })
    }
}

/// Text form of a localization map: class → (group, level) → weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationDoc {
    pub groups: Vec<Vec<usize>>,
    pub classes: Vec<ClassWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub class: usize,
    pub distance: f64,
    #[serde(default)]
    pub condition: Option<f64>,
    #[serde(default)]
    pub fallback_from: Option<usize>,
    pub weights: BTreeMap<String, f64>,
}

fn general_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Optimal localization weights per class, minimizing the class-summed
/// mean square error of `Σ_k Σ_ℓ L_ℓ^(k) ∘ B̃_ℓ^(k)` against
/// `Σ_ℓ α_ℓ B_ℓ`.
///
/// Second moments of the estimates come from single-sample products of the
/// ensemble's covariance estimates, averaged over each class. Products of
/// true covariances on the right-hand side are estimated from the
/// independent all-levels `calibration` ensemble.
pub fn optimal_localization(
    structure: &CouplingStructure,
    ensemble: &Ensemble,
    calibration: &GroupSamples,
    partition: &EquivalenceClassPartition,
    options: &LocalizationOptions,
) -> Result<LocalizationMap> {
    structure.ensure_valid()?;
    check_len("ensemble groups", structure.num_groups(), ensemble.groups.len())?;
    let levels = structure.levels();
    let alpha = options
        .alpha
        .clone()
        .unwrap_or_else(|| crate::blue::finest_level_target(levels));
    check_len("alpha", levels, alpha.len())?;
    let estimates = ensemble_sample_covariances(ensemble)?;
    let n = check_estimates(structure, &estimates)?;
    check_len("partition size", partition.n(), n)?;
    let calib = Calibration::new(calibration, levels)?;

    // Stacked positions (k, ℓ).
    let stacked: Vec<(usize, usize)> = structure
        .groups()
        .iter()
        .enumerate()
        .flat_map(|(k, g)| g.iter().enumerate().map(move |(pos, _)| (k, pos)))
        .collect();
    let p = stacked.len();
    let level_of = |s: usize| structure.group(stacked[s].0)[stacked[s].1];

    // Products of true covariances for the right-hand side.
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for a in 0..p {
        for (t, &w) in alpha.iter().enumerate() {
            let x = level_of(a);
            if w != 0.0 && !keys.contains(&(x.min(t), x.max(t))) {
                keys.push((x.min(t), x.max(t)));
            }
        }
    }
    keys.sort_unstable();
    let products: BTreeMap<(usize, usize), DMatrix<f64>> = keys
        .par_iter()
        .map(|&(a, b)| ((a, b), calib.products(a, b)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let product = |a: usize, b: usize| &products[&(a.min(b), a.max(b))];

    let mut members = partition.members();
    if let Some(cap) = options.max_pairs_per_class {
        let mut rng = ChaCha12Rng::seed_from_u64(options.subset_seed);
        for m in &mut members {
            if m.len() > cap {
                let mut pick = index::sample(&mut rng, m.len(), cap).into_vec();
                pick.sort_unstable();
                *m = pick.into_iter().map(|i| m[i]).collect();
            }
        }
    }

    let solved: Vec<(Option<DVector<f64>>, f64)> = members
        .par_iter()
        .map(|pairs| {
            let mut lhs = DMatrix::<f64>::zeros(p, p);
            let mut rhs = DVector::<f64>::zeros(p);
            for &(i, j) in pairs {
                for a in 0..p {
                    let (ka, pa) = stacked[a];
                    let ba = estimates[ka][pa][(i, j)];
                    for b in a..p {
                        let (kb, pb) = stacked[b];
                        lhs[(a, b)] += ba * estimates[kb][pb][(i, j)];
                    }
                    for (t, &w) in alpha.iter().enumerate() {
                        if w != 0.0 {
                            rhs[a] += w * product(level_of(a), t)[(i, j)];
                        }
                    }
                }
            }
            let count = pairs.len().max(1) as f64;
            lhs /= count;
            rhs /= count;
            for a in 0..p {
                for b in 0..a {
                    lhs[(a, b)] = lhs[(b, a)];
                }
            }
            let cond = general_condition(&lhs);
            if !(cond <= options.condition_cap) {
                return (None, cond);
            }
            (lhs.lu().solve(&rhs), cond)
        })
        .collect();

    let classes = partition.num_classes();
    let good: Vec<usize> = (0..classes).filter(|&c| solved[c].0.is_some()).collect();
    if good.is_empty() {
        return Err(Error::Infeasible(
            "no class has a well-conditioned localization system".into(),
        ));
    }
    let mut weights = Vec::with_capacity(classes);
    let mut fallback_from = Vec::with_capacity(classes);
    for c in 0..classes {
        let (source, from) = match &solved[c].0 {
            Some(_) => (c, None),
            None => {
                let d = partition.distance(c);
                let nearest = *good
                    .iter()
                    .min_by(|&&x, &&y| {
                        let dx = (partition.distance(x) - d).abs();
                        let dy = (partition.distance(y) - d).abs();
                        dx.total_cmp(&dy).then(partition.distance(x).total_cmp(&partition.distance(y)))
                    })
                    .expect("non-empty");
                log::warn!(
                    "localization class {c} is ill-conditioned (condition {:.3e}); reusing class {nearest}",
                    solved[c].1
                );
                (nearest, Some(nearest))
            }
        };
        let sol = solved[source].0.as_ref().expect("well-conditioned");
        let mut per_group: Vec<Vec<f64>> = structure.groups().iter().map(|g| vec![0.0; g.len()]).collect();
        for (s, &(k, pos)) in stacked.iter().enumerate() {
            let mut w = sol[s];
            if options.clip {
                w = w.clamp(CLIP_RANGE.0, CLIP_RANGE.1);
            }
            per_group[k][pos] = w;
        }
        weights.push(per_group);
        fallback_from.push(from);
    }
    Ok(LocalizationMap {
        groups: structure.groups().to_vec(),
        weights,
        condition: solved.iter().map(|s| s.1).collect(),
        fallback_from,
    })
}

/// `Σ_k Σ_ℓ L_ℓ^(k) ∘ B̃_ℓ^(k)`; the result is flagged as biased.
pub fn apply_localized_estimator(
    structure: &CouplingStructure,
    localization: &LocalizationMap,
    partition: &EquivalenceClassPartition,
    estimates: &[Vec<DMatrix<f64>>],
) -> Result<CovMatrixEstimate> {
    let n = check_estimates(structure, estimates)?;
    check_len("partition size", partition.n(), n)?;
    check_len("localization classes", partition.num_classes(), localization.weights.len())?;
    if localization.groups != structure.groups() {
        return Err(Error::InvalidArgument(
            "localization map was built for different coupling groups".into(),
        ));
    }
    let acc = DMatrix::from_fn(n, n, |i, j| {
        let w = &localization.weights[partition.class_of(i, j)];
        w.iter()
            .zip(estimates)
            .flat_map(|(wk, g)| wk.iter().zip(g).map(move |(l, c)| l * c[(i, j)]))
            .sum()
    });
    Ok(finish(structure, acc, true))
}
