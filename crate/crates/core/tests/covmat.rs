use mlblue_core::covmat::{
    apply_covmat_entrywise, apply_covmat_scalar, apply_localized_estimator, covmat_entrywise_weights,
    covmat_scalar_weights, ensemble_sample_covariances, entry_covariances, level_sample_covariances,
    optimal_localization, sample_relation_coefficients, LocalizationDoc, LocalizationOptions, CLIP_RANGE,
    DEFAULT_ENTRYWISE_CAP,
};
use mlblue_core::moments::covcov_matrix_averaged;
use mlblue_core::synthetic::{
    calibration_ensemble, sample_ensemble, CoupledModel, FieldHierarchy, FieldHierarchySpec, FieldLevelSpec,
    GaussianHierarchySpec,
};
use mlblue_core::{BasisKind, CouplingStructure, CovCovMatrix, EquivalenceClassPartition, LocalizationMap};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn field(n: usize, levels: &[(f64, f64)]) -> FieldHierarchy {
    FieldHierarchySpec {
        n,
        basis: BasisKind::Periodic,
        variance: 1.0,
        scale: 3.0,
        decay: 1.0,
        levels: levels
            .iter()
            .map(|&(coupling, cutoff)| FieldLevelSpec {
                mean: 0.0,
                coupling,
                cutoff: Some(cutoff),
                noise: 1.0,
            })
            .collect(),
    }
    .build()
    .unwrap()
}

#[test]
fn product_estimator_is_unbiased() {
    // Average the P1/P2/P3 combination of sample statistics over many
    // independent ensembles of size m and compare with B_a,ij B_b,ij.
    let model = GaussianHierarchySpec {
        mean: vec![0.0, 0.0],
        sigma: vec![1.0, 1.3],
        rho: vec![0.8, 0.8],
        elements: 1,
    };
    let gm = model.gaussian_moments();
    let exact = gm.cov[(0, 0)] * gm.cov[(1, 1)];
    let m = 6;
    let reps = 100_000;
    let (p1, p2, p3) = sample_relation_coefficients(m as u64).unwrap();
    let draws = calibration_ensemble(&model, m * reps, 17);
    let values: Vec<f64> = (0..reps)
        .map(|r| {
            let col = |pos: usize| -> Vec<f64> {
                let x: Vec<f64> = (0..m).map(|s| draws.value(r * m + s, pos)[0]).collect();
                let mean = x.iter().sum::<f64>() / m as f64;
                x.into_iter().map(|v| v - mean).collect()
            };
            let (a, b) = (col(0), col(1));
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
            let mf = m as f64;
            let (caa, cbb, cab) = (dot(&a, &a) / (mf - 1.0), dot(&b, &b) / (mf - 1.0), dot(&a, &b) / (mf - 1.0));
            let m4 = a.iter().zip(&b).map(|(x, y)| (x * y).powi(2)).sum::<f64>() / mf;
            p1 * caa * cbb + p2 * 2.0 * cab * cab + p3 * m4
        })
        .collect();
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn relation_coefficients_limits() {
    let (p1, p2, p3) = sample_relation_coefficients(4).unwrap();
    assert_eq!((p1, p2, p3), (15.0 / 8.0, 3.0 / 8.0, -2.0));
    // Large m: C_aa C_bb alone is consistent.
    let (p1, p2, p3) = sample_relation_coefficients(1_000_000).unwrap();
    assert!((p1 - 1.0).abs() < 1e-5 && p2.abs() < 1e-11 && p3.abs() < 1e-5);
    assert!(sample_relation_coefficients(0).is_err());
}

#[test]
fn homogeneous_entries_give_scalar_weights() {
    // Independent, identically distributed elements make every entry's
    // estimator covariance proportional to one matrix.
    let n = 4;
    let model = GaussianHierarchySpec {
        mean: vec![0.0; 3],
        sigma: vec![1.0, 1.1, 0.9],
        rho: vec![0.85, 0.9, 0.95],
        elements: n,
    };
    let gm = model.gaussian_moments();
    let s = CouplingStructure::new(3, vec![vec![0], vec![0, 1], vec![1, 2], vec![0, 1, 2]])
        .with_samples(vec![80, 30, 12, 6]);
    let alpha = [0.0, 0.0, 1.0];
    let entries = entry_covariances(&s, n, |g, i, j| gm.pair_moments(g, i, j)).unwrap();
    let entrywise = covmat_entrywise_weights(&s, &entries, &alpha, DEFAULT_ENTRYWISE_CAP).unwrap();
    let summed = covcov_matrix_averaged_exact(&s, &gm);
    let scalar = covmat_scalar_weights(&s, &summed, &alpha).unwrap();
    assert!(scalar.dropped.is_empty());
    for w in &entrywise.entries {
        for (a, b) in w.betas.iter().flatten().zip(scalar.weights.betas.iter().flatten()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
    assert!((entrywise.variance - scalar.variance).abs() <= 1e-10 * scalar.variance);
}

fn covcov_matrix_averaged_exact(
    s: &CouplingStructure,
    gm: &mlblue_core::synthetic::GaussianMoments,
) -> Vec<CovCovMatrix> {
    let model = gm.averaged_covcov().unwrap();
    s.groups()
        .iter()
        .zip(s.samples())
        .map(|(g, &m)| CovCovMatrix {
            matrix: model.select(g).at(m as f64).unwrap(),
            samples: m,
        })
        .collect()
}

#[test]
fn trace_form_equals_sum_of_entry_covariances() {
    let model = field(5, &[(0.6, 1.0), (0.8, 2.0), (1.0, 1e6)]);
    let gm = model.gaussian_moments();
    let s = CouplingStructure::mlmc(3).with_samples(vec![40, 15, 5]);
    let entries = entry_covariances(&s, 5, |g, i, j| gm.pair_moments(g, i, j)).unwrap();
    let summed = covcov_matrix_averaged_exact(&s, &gm);
    for k in 0..s.num_groups() {
        let direct = entries.iter().fold(DMatrix::zeros(s.group_size(k), s.group_size(k)), |acc, e| acc + &e[k]);
        let scale = summed[k].matrix.amax();
        assert!((direct - &summed[k].matrix).amax() <= 1e-12 * scale);
    }
}

#[test]
fn entrywise_weights_are_unbiased_and_beat_scalar() {
    let model = field(6, &[(0.7, 1.0), (1.0, 1e6)]);
    let gm = model.gaussian_moments();
    let s = CouplingStructure::mlmc(2).with_samples(vec![60, 8]);
    let alpha = [0.0, 1.0];
    let entries = entry_covariances(&s, 6, |g, i, j| gm.pair_moments(g, i, j)).unwrap();
    let entrywise = covmat_entrywise_weights(&s, &entries, &alpha, DEFAULT_ENTRYWISE_CAP).unwrap();
    let scalar = covmat_scalar_weights(&s, &covcov_matrix_averaged_exact(&s, &gm), &alpha).unwrap();
    assert!(entrywise.variance <= scalar.variance * (1.0 + 1e-12));
    for i in 0..6 {
        for j in 0..6 {
            let w = entrywise.entry(i, j);
            assert!(w.bias_defect(&s) < 1e-10);
            assert_eq!(w, entrywise.entry(j, i));
        }
    }
    assert!(covmat_entrywise_weights(&s, &entries, &alpha, 5).is_err());
}

#[test]
fn estimators_reproduce_consistent_inputs() {
    let n = 4;
    let s = CouplingStructure::mlmc(3).with_samples(vec![10, 6, 4]);
    let b: Vec<DMatrix<f64>> = (0..3)
        .map(|l| DMatrix::from_fn(n, n, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs() + l as f64)))
        .collect();
    let estimates: Vec<Vec<DMatrix<f64>>> = s.groups().iter().map(|g| g.iter().map(|&l| b[l].clone()).collect()).collect();
    let weights = mlblue_core::blue::mlmc_weights(&s, &[0.0, 0.0, 1.0]).unwrap();
    let est = apply_covmat_scalar(&s, &weights, &estimates).unwrap();
    assert!((&est.matrix - &b[2]).amax() < 1e-14);
    assert!(!est.biased);
    let part = EquivalenceClassPartition::periodic(n);
    let uniform = LocalizationMap::uniform(&part, &s, &weights);
    let loc = apply_localized_estimator(&s, &uniform, &part, &estimates).unwrap();
    assert_eq!(loc.matrix, est.matrix);
    assert!(loc.biased);
}

#[test]
fn scalar_weighted_estimate_is_unbiased() {
    let n = 5;
    let model = field(n, &[(0.8, 2.0), (1.0, 1e6)]);
    let gm = model.gaussian_moments();
    let s = CouplingStructure::mlmc(2).with_samples(vec![30, 6]);
    let weights = covmat_scalar_weights(&s, &covcov_matrix_averaged_exact(&s, &gm), &[0.0, 1.0])
        .unwrap()
        .weights;
    let reps = 4000;
    let mut sum = DMatrix::zeros(n, n);
    let mut sum_sq = DMatrix::zeros(n, n);
    for r in 0..reps {
        let e = sample_ensemble(&model, &s, 1000 + r).unwrap();
        let est = apply_covmat_scalar(&s, &weights, &ensemble_sample_covariances(&e).unwrap()).unwrap();
        sum += &est.matrix;
        sum_sq += est.matrix.component_mul(&est.matrix);
    }
    let mean = &sum / reps as f64;
    let target = gm.block(1, 1);
    for i in 0..n {
        for j in 0..n {
            let var = sum_sq[(i, j)] / reps as f64 - mean[(i, j)].powi(2);
            let se = (var / reps as f64).sqrt();
            assert!((mean[(i, j)] - target[(i, j)]).abs() < 4.5 * se, "({i},{j})");
        }
    }
}

#[test]
fn redundant_levels_are_dropped() {
    let n = 3;
    let model = GaussianHierarchySpec {
        mean: vec![0.0, 0.0],
        sigma: vec![1.0, 1.0],
        rho: vec![1.0, 1.0],
        elements: n,
    };
    let gm = model.gaussian_moments();
    let s = CouplingStructure::new(2, vec![vec![0, 1], vec![1]]).with_samples(vec![20, 10]);
    let sol = covmat_scalar_weights(&s, &covcov_matrix_averaged_exact(&s, &gm), &[0.0, 1.0]).unwrap();
    assert_eq!(sol.dropped, vec![(0, 1)]);
    assert_eq!(sol.weights.betas[0][1], 0.0);
}

fn localization_setup(
    n: usize,
    m: Vec<u64>,
) -> (FieldHierarchy, CouplingStructure, EquivalenceClassPartition) {
    let model = field(n, &[(0.9, 4.0), (1.0, 1e6)]);
    let s = CouplingStructure::mlmc(2).with_samples(m);
    (model, s, EquivalenceClassPartition::periodic(n))
}

#[test]
fn large_single_level_ensembles_need_no_damping() {
    let n = 8;
    let model = field(n, &[(1.0, 1e6)]);
    let s = CouplingStructure::single_group(1).with_samples(vec![5000]);
    let part = EquivalenceClassPartition::periodic(n);
    let e = sample_ensemble(&model, &s, 3).unwrap();
    let calib = calibration_ensemble(&model, 5000, 4);
    let map = optimal_localization(&s, &e, &calib, &part, &LocalizationOptions::default()).unwrap();
    let diag = map.weights[0][0][0];
    assert!((diag - 1.0).abs() < 0.05, "diagonal weight {diag}");
}

#[test]
fn localization_lowers_error_on_small_ensembles() {
    let n = 32;
    let (model, s, part) = localization_setup(n, vec![10, 5]);
    let target = model.gaussian_moments().block(1, 1);
    let mlmc = mlblue_core::blue::mlmc_weights(&s, &[0.0, 1.0]).unwrap();
    let plain = LocalizationMap::uniform(&part, &s, &mlmc);
    let (mut raw, mut loc) = (0.0, 0.0);
    let reps = 200;
    for r in 0..reps {
        let e = sample_ensemble(&model, &s, r).unwrap();
        let calib = calibration_ensemble(&model, 10, r);
        let est = ensemble_sample_covariances(&e).unwrap();
        let map = optimal_localization(&s, &e, &calib, &part, &LocalizationOptions::default()).unwrap();
        let a = apply_localized_estimator(&s, &plain, &part, &est).unwrap();
        let b = apply_localized_estimator(&s, &map, &part, &est).unwrap();
        raw += (&a.matrix - &target).norm_squared();
        loc += (&b.matrix - &target).norm_squared();
    }
    assert!(loc < raw, "localized {loc} vs raw {raw}");
}

#[test]
fn clipping_and_subsets_are_respected() {
    let n = 16;
    let (model, s, part) = localization_setup(n, vec![8, 5]);
    let e = sample_ensemble(&model, &s, 1).unwrap();
    let calib = calibration_ensemble(&model, 6, 1);
    let clipped = optimal_localization(
        &s,
        &e,
        &calib,
        &part,
        &LocalizationOptions { clip: true, ..Default::default() },
    )
    .unwrap();
    for w in clipped.weights.iter().flatten().flatten() {
        assert!((CLIP_RANGE.0..=CLIP_RANGE.1).contains(w));
    }
    let opts = LocalizationOptions {
        max_pairs_per_class: Some(5),
        subset_seed: 9,
        ..Default::default()
    };
    let a = optimal_localization(&s, &e, &calib, &part, &opts).unwrap();
    let b = optimal_localization(&s, &e, &calib, &part, &opts).unwrap();
    assert_eq!(a, b);
    let full = optimal_localization(&s, &e, &calib, &part, &LocalizationOptions::default()).unwrap();
    let wide = LocalizationOptions {
        max_pairs_per_class: Some(n * n),
        ..Default::default()
    };
    assert_eq!(optimal_localization(&s, &e, &calib, &part, &wide).unwrap(), full);
}

#[test]
fn ill_conditioned_classes_reuse_nearest_solution() {
    let n = 12;
    let (model, s, part) = localization_setup(n, vec![8, 5]);
    let e = sample_ensemble(&model, &s, 2).unwrap();
    let calib = calibration_ensemble(&model, 6, 2);
    let base = optimal_localization(&s, &e, &calib, &part, &LocalizationOptions::default()).unwrap();
    let mut conds = base.condition.clone();
    conds.sort_by(f64::total_cmp);
    let cap = conds[conds.len() / 2];
    let opts = LocalizationOptions { condition_cap: cap, ..Default::default() };
    let map = optimal_localization(&s, &e, &calib, &part, &opts).unwrap();
    let mut reused = 0;
    for c in 0..part.num_classes() {
        match map.fallback_from[c] {
            None => {
                assert!(map.condition[c] <= cap);
                assert_eq!(map.weights[c], base.weights[c]);
            }
            Some(src) => {
                reused += 1;
                assert!(map.condition[c] > cap && map.condition[src] <= cap);
                assert_eq!(map.weights[c], map.weights[src]);
                let d = |x: usize| (part.distance(x) - part.distance(c)).abs();
                for other in 0..part.num_classes() {
                    if map.condition[other] <= cap {
                        assert!(d(src) <= d(other));
                    }
                }
            }
        }
    }
    assert!(reused > 0);
    let none = LocalizationOptions { condition_cap: 0.5, ..Default::default() };
    assert!(optimal_localization(&s, &e, &calib, &part, &none).is_err());
}

#[test]
fn localization_map_text_round_trip() {
    let n = 6;
    let (model, s, part) = localization_setup(n, vec![8, 5]);
    let e = sample_ensemble(&model, &s, 5).unwrap();
    let map = optimal_localization(&s, &e, &calibration_ensemble(&model, 8, 5), &part, &Default::default()).unwrap();
    let text = serde_json::to_string(&map.to_doc(&part)).unwrap();
    let doc: LocalizationDoc = serde_json::from_str(&text).unwrap();
    assert_eq!(LocalizationMap::from_doc(&doc).unwrap(), map);
    assert_eq!(map.psd_diagnostic(&part).len(), s.num_groups());
}

#[test]
fn calibration_and_sizes_are_checked() {
    let (model, s, part) = localization_setup(6, vec![8, 5]);
    let e = sample_ensemble(&model, &s, 5).unwrap();
    let small = calibration_ensemble(&model, 3, 5);
    assert!(optimal_localization(&s, &e, &small, &part, &Default::default()).is_err());
    let wrong = EquivalenceClassPartition::periodic(7);
    let calib = calibration_ensemble(&model, 6, 5);
    assert!(optimal_localization(&s, &e, &calib, &wrong, &Default::default()).is_err());
    let one = calibration_ensemble(&model, 1, 5);
    assert!(level_sample_covariances(&one).is_err());
}

#[test]
fn averaged_covcov_from_calibration_has_group_shapes() {
    let (model, s, _) = localization_setup(6, vec![8, 5]);
    let calib = calibration_ensemble(&model, 10, 0);
    let c = covcov_matrix_averaged(&calib, &s).unwrap();
    for (k, ck) in c.iter().enumerate() {
        assert_eq!(ck.matrix.nrows(), s.group_size(k));
        assert_eq!(ck.samples, s.samples()[k]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn periodic_partition_invariants(n in 1usize..24, shift in 0usize..24) {
        let p = EquivalenceClassPartition::periodic(n);
        prop_assert_eq!(p.class_sizes().iter().sum::<usize>(), n * n);
        prop_assert!(p.class_sizes().iter().all(|&c| c > 0));
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(p.class_of(i, j), p.class_of(j, i));
                prop_assert_eq!(p.class_of(i, j), p.class_of((i + shift) % n, (j + shift) % n));
            }
            prop_assert_eq!(p.class_of(i, i), 0);
        }
        prop_assert_eq!(EquivalenceClassPartition::from_doc(p.to_doc()).unwrap(), p);
    }

    #[test]
    fn labelled_partitions_round_trip(n in 1usize..7, raw in prop::collection::vec(0usize..4, 49)) {
        // Symmetrize and compact the labels.
        let mut labels = vec![0; n * n];
        for i in 0..n {
            for j in i..n {
                labels[i * n + j] = raw[i * 7 + j];
                labels[j * n + i] = raw[i * 7 + j];
            }
        }
        let mut seen: Vec<usize> = labels.clone();
        seen.sort_unstable();
        seen.dedup();
        let labels: Vec<usize> = labels.iter().map(|l| seen.binary_search(l).unwrap()).collect();
        let p = EquivalenceClassPartition::from_labels(n, labels.clone(), None).unwrap();
        prop_assert_eq!(p.num_classes(), seen.len());
        let members = p.members();
        for (c, pairs) in members.iter().enumerate() {
            for &(i, j) in pairs {
                prop_assert_eq!(p.class_of(i, j), c);
            }
        }
        prop_assert_eq!(EquivalenceClassPartition::from_doc(p.to_doc()).unwrap(), p);
    }

    #[test]
    fn entrywise_estimate_matches_scalar_when_weights_agree(
        vals in prop::collection::vec(-1.0f64..1.0, 27),
        w in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let n = 3;
        let s = CouplingStructure::mlmc(2).with_samples(vec![5, 5]);
        let mat = |o: usize| DMatrix::from_fn(n, n, |i, j| vals[o + i.max(j) * n + i.min(j)] );
        let estimates = vec![vec![mat(0)], vec![mat(9), mat(18)]];
        let ws = mlblue_core::WeightSet { betas: vec![vec![w[0]], vec![w[1], w[2]]], alpha: vec![0.0, 1.0], biased: false };
        let ew = mlblue_core::covmat::EntrywiseWeights { n, entries: vec![ws.clone(); n * n], variance: 0.0 };
        let a = apply_covmat_scalar(&s, &ws, &estimates).unwrap();
        let b = apply_covmat_entrywise(&s, &ew, &estimates).unwrap();
        prop_assert!((&a.matrix - &b.matrix).amax() <= 1e-14);
    }
}
