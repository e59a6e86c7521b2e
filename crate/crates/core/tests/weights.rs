mod common;

use common::{estimator_covs, instance, rel_diff, Instance};
use mlblue_core::blue::{mlmc_weights, solve_with_estimator_covariances};
use mlblue_core::{
    apply_scalar_estimator, kkt_solve, mlblue_variance, optimal_scalar_weights, CouplingStructure,
    GroupMomentSet, SolveOptions, WeightSet,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Minimizes `βᵀ Σ β` over `A β = α` by parametrizing the affine solution
/// set with a null-space basis of the constraint matrix.
fn nullspace_oracle(inst: &Instance) -> (Vec<f64>, f64) {
    let s = &inst.structure;
    let p = s.total_size();
    let l = s.levels();
    let mut a = DMatrix::zeros(l, p);
    let mut sigma = DMatrix::zeros(p, p);
    let mut off = 0;
    for (k, c) in estimator_covs(inst).iter().enumerate() {
        for (pos, &lvl) in s.group(k).iter().enumerate() {
            a[(lvl, off + pos)] = 1.0;
        }
        sigma.view_mut((off, off), (c.nrows(), c.nrows())).copy_from(c);
        off += c.nrows();
    }
    let svd = a.clone().svd(true, true);
    let alpha = DVector::from_column_slice(&inst.alpha);
    let beta0 = svd.solve(&alpha, 1e-12).unwrap();
    // Eigenvectors of AᵀA with zero eigenvalue span the null space of A.
    let eig = (a.transpose() * &a).symmetric_eigen();
    let null: Vec<usize> = (0..p).filter(|&i| eig.eigenvalues[i].abs() < 1e-9).collect();
    let basis = DMatrix::from_fn(p, null.len(), |i, j| eig.eigenvectors[(i, null[j])]);
    let beta = if basis.ncols() == 0 {
        beta0
    } else {
        let h = basis.transpose() * &sigma * &basis;
        let g = basis.transpose() * &sigma * &beta0;
        let z = h.lu().solve(&(-g)).unwrap();
        &beta0 + &basis * z
    };
    let var = beta.dot(&(&sigma * &beta));
    (beta.as_slice().to_vec(), var)
}

fn flatten(w: &WeightSet) -> Vec<f64> {
    w.betas.iter().flatten().copied().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn closed_form_matches_kkt(inst in instance()) {
        let moments = GroupMomentSet::per_sample(inst.covs.clone());
        let w = optimal_scalar_weights(&inst.structure, &moments, &inst.alpha).unwrap();
        let kkt = kkt_solve(&inst.structure, &moments, &inst.alpha).unwrap();
        let scale = flatten(&w).iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (a, b) in flatten(&w).iter().zip(flatten(&kkt.weights)) {
            prop_assert!((a - b).abs() <= 1e-10 * scale.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn closed_form_matches_nullspace_oracle(inst in instance()) {
        let covs = estimator_covs(&inst);
        let (w, var) = solve_with_estimator_covariances(&inst.structure, &covs, &inst.alpha, &SolveOptions::default()).unwrap();
        let (beta, oracle_var) = nullspace_oracle(&inst);
        prop_assert!(rel_diff(var, oracle_var) < 1e-8, "{var} vs {oracle_var}");
        let scale = beta.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
        for (a, b) in flatten(&w).iter().zip(&beta) {
            prop_assert!((a - b).abs() <= 1e-7 * scale);
        }
    }

    #[test]
    fn no_bias_certificate(inst in instance()) {
        let moments = GroupMomentSet::per_sample(inst.covs.clone());
        let w = optimal_scalar_weights(&inst.structure, &moments, &inst.alpha).unwrap();
        prop_assert!(w.bias_defect(&inst.structure) <= 1e-10);
        let kkt = kkt_solve(&inst.structure, &moments, &inst.alpha).unwrap();
        prop_assert!(kkt.weights.bias_defect(&inst.structure) <= 1e-10);
    }

    #[test]
    fn variance_forms_agree(inst in instance()) {
        let moments = GroupMomentSet::per_sample(inst.covs.clone());
        let w = optimal_scalar_weights(&inst.structure, &moments, &inst.alpha).unwrap();
        let v = mlblue_variance(&inst.structure, &moments, &inst.alpha).unwrap();
        let direct = w.variance(&estimator_covs(&inst));
        prop_assert!(rel_diff(v, direct) < 1e-10, "{v} vs {direct}");
    }

    #[test]
    fn optimal_under_feasible_perturbations(inst in instance(), raw in prop::collection::vec(-1.0f64..1.0, 20)) {
        let s = &inst.structure;
        let covs = estimator_covs(&inst);
        let (w, var) = solve_with_estimator_covariances(s, &covs, &inst.alpha, &SolveOptions::default()).unwrap();
        // δ with Σ_k P δ = 0: subtract, per level, the mean of the raw entries.
        let mut delta: Vec<Vec<f64>> = s.groups().iter().enumerate()
            .map(|(k, g)| (0..g.len()).map(|pos| raw[(3 * k + pos) % raw.len()]).collect())
            .collect();
        let mut sums = vec![0.0; s.levels()];
        let mut counts = vec![0.0; s.levels()];
        for (k, g) in s.groups().iter().enumerate() {
            for (pos, &l) in g.iter().enumerate() {
                sums[l] += delta[k][pos];
                counts[l] += 1.0;
            }
        }
        for (k, g) in s.groups().iter().enumerate() {
            for (pos, &l) in g.iter().enumerate() {
                delta[k][pos] -= sums[l] / counts[l];
            }
        }
        for eps in [1e-3, 1e-1, 1.0] {
            let moved = WeightSet {
                betas: w.betas.iter().zip(&delta)
                    .map(|(b, d)| b.iter().zip(d).map(|(x, y)| x + eps * y).collect())
                    .collect(),
                ..w.clone()
            };
            prop_assert!(moved.bias_defect(s) <= 1e-10);
            prop_assert!(moved.variance(&covs) >= var - 1e-12 * var.max(1.0));
        }
    }

    #[test]
    fn doubling_samples_halves_variance(inst in instance()) {
        let moments = GroupMomentSet::per_sample(inst.covs.clone());
        let v = mlblue_variance(&inst.structure, &moments, &inst.alpha).unwrap();
        let doubled = inst.structure.clone().with_samples(inst.structure.samples().iter().map(|m| 2 * m).collect());
        let v2 = mlblue_variance(&doubled, &moments, &inst.alpha).unwrap();
        prop_assert!(rel_diff(v, 2.0 * v2) < 1e-10);
    }

    #[test]
    fn restrict_extend_adjoint(inst in instance(), x in prop::collection::vec(-5.0f64..5.0, 4), y in prop::collection::vec(-5.0f64..5.0, 4)) {
        let s = &inst.structure;
        let x = &x[..s.levels()];
        for k in 0..s.num_groups() {
            let y = &y[..s.group_size(k)];
            let rx = s.restrict(x, k).unwrap();
            let py = s.extend(y, k).unwrap();
            let lhs: f64 = rx.iter().zip(y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&py).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            prop_assert_eq!(s.restrict(&py, k).unwrap(), y.to_vec());
        }
    }

    #[test]
    fn kkt_solution_is_stationary(inst in instance()) {
        // Stationarity: ℂ^(k) β^(k) = R^(k) λ.
        let moments = GroupMomentSet::per_sample(inst.covs.clone());
        let kkt = kkt_solve(&inst.structure, &moments, &inst.alpha).unwrap();
        let covs = estimator_covs(&inst);
        for (k, c) in covs.iter().enumerate() {
            let lhs = c * DVector::from_column_slice(&kkt.weights.betas[k]);
            let rhs = inst.structure.restrict(&kkt.multipliers, k).unwrap();
            let scale = rhs.iter().fold(1e-300f64, |a, b| a.max(b.abs()));
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() <= 1e-8 * scale);
            }
        }
    }
}

fn three_level() -> CouplingStructure {
    CouplingStructure::new(3, vec![vec![0], vec![0, 1], vec![1, 2]])
}

#[test]
fn mlmc_pattern_is_never_better() {
    let s = three_level().with_samples(vec![40, 12, 5]);
    let pool = [0.3, -0.7, 0.9, 0.1, 0.5, -0.2, 0.8];
    for shift in [0.1, 0.5, 2.0] {
        let covs: Vec<_> = (0..3)
            .map(|k| common::spd_from(s.group_size(k), &pool, 2 * k, shift))
            .collect();
        let est: Vec<_> = covs.iter().zip(s.samples()).map(|(c, &m)| c / m as f64).collect();
        let alpha = [0.0, 0.0, 1.0];
        let (_, best) = solve_with_estimator_covariances(&s, &est, &alpha, &SolveOptions::default()).unwrap();
        let mlmc = mlmc_weights(&s, &alpha).unwrap();
        assert_eq!(
            mlmc.betas,
            vec![vec![1.0], vec![-1.0, 1.0], vec![-1.0, 1.0]]
        );
        assert!(mlmc.variance(&est) >= best);
    }
}

#[test]
fn mlmc_estimator_telescopes() {
    let s = three_level();
    let w = mlmc_weights(&s, &[0.0, 0.0, 1.0]).unwrap();
    let (a, b, c, d, e) = (1.5, 0.25, 2.0, -3.0, 0.5);
    let v = apply_scalar_estimator(&w, &[vec![a], vec![b, c], vec![d, e]]).unwrap();
    assert_eq!(v, a - b + c - d + e);
}

#[test]
fn single_group_weights_equal_alpha() {
    let s = CouplingStructure::single_group(3).with_samples(vec![9]);
    let c = common::spd_from(3, &[0.4, -0.1, 0.7, 0.2], 0, 0.5);
    let alpha = [0.2, -0.5, 1.0];
    let moments = GroupMomentSet::per_sample(vec![c.clone()]);
    let w = optimal_scalar_weights(&s, &moments, &alpha).unwrap();
    for (a, b) in w.betas[0].iter().zip(&alpha) {
        assert!((a - b).abs() < 1e-12);
    }
    // λ = φ⁻¹ α with φ = m C⁻¹, i.e. λ = C α / m.
    let kkt = kkt_solve(&s, &moments, &alpha).unwrap();
    let lambda = &c * DVector::from_column_slice(&alpha) / 9.0;
    for (a, b) in kkt.multipliers.iter().zip(lambda.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn plain_monte_carlo() {
    let s = CouplingStructure::single_group(1).with_samples(vec![25]);
    let moments = GroupMomentSet::per_sample(vec![DMatrix::from_element(1, 1, 4.0)]);
    let w = optimal_scalar_weights(&s, &moments, &[1.0]).unwrap();
    assert_eq!(w.betas, vec![vec![1.0]]);
    assert_eq!(mlblue_variance(&s, &moments, &[1.0]).unwrap(), 4.0 / 25.0);
    assert_eq!(apply_scalar_estimator(&w, &[vec![3.5]]).unwrap(), 3.5);
    assert_eq!(apply_scalar_estimator(&w, &[vec![0.0]]).unwrap(), 0.0);
}
