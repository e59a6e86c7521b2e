#![allow(dead_code)]

use mlblue_core::CouplingStructure;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// A random MLBLUE problem with per-sample group covariances.
#[derive(Debug, Clone)]
pub struct Instance {
    pub structure: CouplingStructure,
    pub covs: Vec<DMatrix<f64>>,
    pub alpha: Vec<f64>,
}

/// SPD matrix `A Aᵀ + shift I` with entries of `A` read cyclically from
/// `pool` starting at `offset`.
pub fn spd_from(p: usize, pool: &[f64], offset: usize, shift: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |i, j| pool[(offset + i * p + j) % pool.len()]);
    &a * a.transpose() + DMatrix::identity(p, p) * shift
}

fn build(levels: usize, masks: Vec<u32>, pool: Vec<f64>, m: Vec<u64>, alpha: Vec<f64>) -> Instance {
    let mut masks = masks;
    let covered = masks.iter().fold(0u32, |a, b| a | b);
    let full = (1u32 << levels) - 1;
    if covered != full {
        masks.push(full & !covered);
    }
    masks.sort_unstable();
    masks.dedup();
    let groups: Vec<Vec<usize>> = masks
        .iter()
        .map(|&mask| (0..levels).filter(|l| mask >> l & 1 == 1).collect())
        .collect();
    let k = groups.len();
    let structure = CouplingStructure::new(levels, groups).with_samples(m[..k].to_vec());
    let covs = (0..k)
        .map(|g| spd_from(structure.group_size(g), &pool, 7 * g, 0.3))
        .collect();
    let mut alpha = alpha;
    if alpha.iter().all(|a| a.abs() < 1e-3) {
        alpha[levels - 1] = 1.0;
    }
    Instance {
        structure,
        covs,
        alpha,
    }
}

/// Random instances with `L ≤ 4` and `K ≤ 5`.
pub fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=4).prop_flat_map(|l| {
        (
            Just(l),
            prop::collection::vec(1u32..(1u32 << l), 1..=4),
            prop::collection::vec(-1.0f64..1.0, 40),
            prop::collection::vec(1u64..60, 5),
            prop::collection::vec(-1.0f64..1.0, l),
        )
            .prop_map(|(l, masks, pool, m, alpha)| build(l, masks, pool, m, alpha))
    })
}

/// Estimator covariances `C^(k) / m^(k)`.
pub fn estimator_covs(inst: &Instance) -> Vec<DMatrix<f64>> {
    inst.covs
        .iter()
        .zip(inst.structure.samples())
        .map(|(c, &m)| c / m as f64)
        .collect()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
