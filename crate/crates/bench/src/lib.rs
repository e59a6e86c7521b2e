//! Fixtures shared by the benchmarks.

use mlblue_core::blue::finest_level_target;
use mlblue_core::synthetic::{
    calibration_ensemble, CoupledModel, FieldHierarchy, FieldHierarchySpec, FieldLevelSpec, GaussianHierarchySpec,
};
use mlblue_core::vector::ElementCovariances;
use mlblue_core::{BasisKind, CouplingStructure, GroupSamples};
use nalgebra::DMatrix;

/// `levels`-level periodic field on `n` points, finest level last.
pub fn field(n: usize, levels: usize) -> FieldHierarchy {
    FieldHierarchySpec {
        n,
        basis: BasisKind::Periodic,
        variance: 1.0,
        scale: 4.0,
        decay: 1.0,
        levels: (0..levels)
            .map(|l| {
                let finest = l + 1 == levels;
                FieldLevelSpec {
                    mean: 0.0,
                    coupling: if finest { 1.0 } else { 0.6 + 0.3 * l as f64 / levels as f64 },
                    cutoff: (!finest).then_some(2.0 + 2.0 * l as f64),
                    noise: 1.0,
                }
            })
            .collect(),
    }
    .build()
    .expect("valid field")
}

/// Calibration draws coupling all levels of [`field`]. The basis is dense,
/// so keep `n` in the low thousands.
pub fn field_samples(n: usize, members: usize, levels: usize, seed: u64) -> GroupSamples {
    calibration_ensemble(&field(n, levels), members, seed)
}

/// Calibration draws of `n` independent elements per level; cheap at any `n`.
pub fn hierarchy_samples(n: usize, members: usize, levels: usize, seed: u64) -> GroupSamples {
    let spec = GaussianHierarchySpec {
        mean: vec![0.0; levels],
        sigma: (0..levels).map(|l| 1.0 + 0.1 * l as f64).collect(),
        rho: vec![0.9; levels],
        elements: n,
    };
    calibration_ensemble(&spec, members, seed)
}

/// A weight problem: every single level plus every adjacent pair, with
/// sample sizes decreasing towards the finest level.
pub struct WeightProblem {
    pub structure: CouplingStructure,
    pub group_covs: Vec<DMatrix<f64>>,
    pub element_covs: ElementCovariances,
    pub alpha: Vec<f64>,
    pub n: usize,
}

pub fn weight_problem(n: usize, levels: usize) -> WeightProblem {
    let model = field(n, levels);
    let gm = model.gaussian_moments();
    let mut groups: Vec<Vec<usize>> = (0..levels).map(|l| vec![l]).collect();
    groups.extend((1..levels).map(|l| vec![l - 1, l]));
    let m = (0..groups.len()).map(|k| 8 * (groups.len() - k) as u64).collect();
    let level_cost = |l: usize| 10f64.powi(l as i32 + 1 - levels as i32);
    let costs = groups.iter().map(|g| g.iter().map(|&l| level_cost(l)).sum()).collect();
    let structure = CouplingStructure::new(levels, groups).with_samples(m).with_costs(costs);
    let group_covs = structure.groups().iter().map(|g| gm.group_covariance(g)).collect();
    let element_covs = (0..n).map(|i| gm.element_group_covariances(&structure, i)).collect();
    WeightProblem {
        structure,
        group_covs,
        element_covs,
        alpha: finest_level_target(levels),
        n,
    }
}

impl WeightProblem {
    /// Per-sample group covariances of the first element.
    pub fn scalar_covs(&self) -> Vec<DMatrix<f64>> {
        self.element_covs[0].clone()
    }
}
