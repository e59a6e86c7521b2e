//! The computations behind each subcommand. Every function returns a JSON
//! document plus optional CSV tables; nothing here touches the file system.

use mlblue_core::blue::{mlmc_weights, solve_with_estimator_covariances, SolveOptions};
use mlblue_core::covmat::{
    apply_covmat_entrywise, apply_covmat_scalar, apply_localized_estimator, covmat_entrywise_weights,
    covmat_scalar_weights, ensemble_sample_covariances, entry_covariances, optimal_localization,
    CovmatScalarSolution, EntrywiseWeights, LocalizationOptions, DEFAULT_ENTRYWISE_CAP,
};
use mlblue_core::moments::{
    averaged_covcov_model, covcov_matrix_averaged, covcov_model, covcov_scalar, mc_cov,
    stacked_sample_covariance, CovCovMatrix,
};
use mlblue_core::mosap::{mlmc_cov_allocation, Allocation, AllocationMode, AllocationProblem, MlmcBoundInputs, VarianceModel};
use mlblue_core::rng::derive_seed;
use mlblue_core::synthetic::{
    calibration_ensemble, replicate_estimator, sample_ensemble, CoupledModel, GaussianMoments, Replications,
};
use mlblue_core::vector::{
    apply_vector_estimator, averaged_covariances, field_weights_nd, kron_alpha, matrix_allocation_candidates,
    matrix_weights, scalar_weights_nd, wfield_weights, ElementCovariances,
};
use mlblue_core::{
    apply_scalar_estimator, CouplingStructure, Ensemble, Flavor, GroupMomentSet, GroupSamples, LocalizationMap,
    PairMoments, StructureDoc, VectorWeightSet, VectorWeights, WeightSet,
};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::config::{Baseline, CovFlavor, Experiment, MomentSource, Task};
use crate::error::{CliError, CliResult};

/// Seed tag of the calibration ensemble used for sampled moments.
pub const MOMENTS_TAG: u64 = 0x6D6F_6D65_6E74_7300;
/// Seed tag of the calibration ensemble used for localization.
pub const LOCALIZE_TAG: u64 = 0x6C6F_6361_6C69_7A00;

/// A CSV table for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

/// Result document of one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub results: Value,
    pub tables: Vec<Table>,
}

fn num(v: f64) -> String {
    v.to_string()
}

fn idx(i: usize) -> String {
    (i + 1).to_string()
}

fn matrix_rows(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())
        .collect::<Vec<_>>())
}

/// Moments feeding the weights: exact, or estimated from a calibration
/// ensemble independent of every ensemble the weights are applied to.
pub struct MomentSet {
    pub gaussian: GaussianMoments,
    pub calibration: Option<GroupSamples>,
}

pub fn moment_set(exp: &Experiment, seed: u64) -> CliResult<MomentSet> {
    match exp.config.moments.source {
        MomentSource::Exact => Ok(MomentSet {
            gaussian: exp.model.gaussian_moments(),
            calibration: None,
        }),
        MomentSource::Sampled => {
            let calib = calibration_ensemble(&exp.model, exp.config.moments.members, derive_seed(seed, MOMENTS_TAG));
            let mean: Vec<f64> = calib.level_means().concat();
            let cov = stacked_sample_covariance(&calib)?;
            Ok(MomentSet {
                gaussian: GaussianMoments::new(exp.model.level_sizes(), DVector::from_vec(mean), cov),
                calibration: Some(calib),
            })
        }
    }
}

impl MomentSet {
    /// Second and fourth moments of entries `(i, j)` over `levels`; sampled
    /// fourth moments are used when available.
    fn pair_moments(&self, levels: &[usize], i: usize, j: usize) -> CliResult<PairMoments> {
        match &self.calibration {
            None => Ok(self.gaussian.pair_moments(levels, i, j)),
            Some(c) => {
                let cols = |e: usize| -> Vec<Vec<f64>> { levels.iter().map(|&l| c.column(l, e)).collect() };
                Ok(PairMoments::from_samples(&cols(i), &cols(j))?)
            }
        }
    }

    fn element_covs(&self, s: &CouplingStructure, n: usize) -> ElementCovariances {
        (0..n).map(|i| self.gaussian.element_group_covariances(s, i)).collect()
    }

    fn stacked(&self, s: &CouplingStructure) -> Vec<DMatrix<f64>> {
        s.groups().iter().map(|g| self.gaussian.group_covariance(g)).collect()
    }

    /// Covariance-of-covariance model of every group for the scalar
    /// covariance-matrix weights.
    fn summed_covcov(&self, s: &CouplingStructure) -> CliResult<Vec<CovCovMatrix>> {
        match &self.calibration {
            None => {
                let model = self.gaussian.averaged_covcov()?;
                s.groups()
                    .iter()
                    .zip(s.require_samples()?)
                    .map(|(g, &m)| {
                        Ok(CovCovMatrix {
                            matrix: model.select(g).at(m as f64)?,
                            samples: m,
                        })
                    })
                    .collect()
            }
            Some(c) => Ok(covcov_matrix_averaged(c, s)?),
        }
    }
}

/// Optimal weights of every task except localization.
#[derive(Debug, Clone)]
pub enum Weights {
    /// Mean or variance of a scalar quantity.
    Scalar { weights: WeightSet, variance: f64 },
    Vector(VectorWeightSet),
    CovMatrix(CovmatScalarSolution),
    Entrywise(EntrywiseWeights),
}

impl Weights {
    /// Total variance predicted from the moments the weights came from.
    pub fn predicted_variance(&self) -> f64 {
        match self {
            Weights::Scalar { variance, .. } => *variance,
            Weights::Vector(v) => v.variance,
            Weights::CovMatrix(s) => s.variance,
            Weights::Entrywise(e) => e.variance,
        }
    }
}

fn scalar_cov_estimator_covs(ms: &MomentSet, s: &CouplingStructure) -> CliResult<Vec<DMatrix<f64>>> {
    s.groups()
        .iter()
        .zip(s.require_samples()?)
        .map(|(g, &m)| Ok(covcov_scalar(&ms.pair_moments(g, 0, 0)?, m)?.matrix))
        .collect()
}

fn entry_covs(ms: &MomentSet, s: &CouplingStructure, n: usize) -> CliResult<Vec<Vec<DMatrix<f64>>>> {
    Ok(entry_covariances(s, n, |g, i, j| {
        ms.pair_moments(g, i, j)
            .expect("calibration ensembles have at least 4 members")
    })?)
}

pub fn compute_weights(exp: &Experiment, s: &CouplingStructure, ms: &MomentSet) -> CliResult<Weights> {
    let alpha = &exp.alpha;
    let n = exp.n;
    let opts = SolveOptions::default();
    Ok(match exp.task {
        Task::MeanScalar => {
            let covs = GroupMomentSet::per_sample(ms.stacked(s)).estimator_covariances(s)?;
            let (weights, variance) = solve_with_estimator_covariances(s, &covs, alpha, &opts)?;
            Weights::Scalar { weights, variance }
        }
        Task::CovScalar => {
            let covs = scalar_cov_estimator_covs(ms, s)?;
            let (weights, variance) = solve_with_estimator_covariances(s, &covs, alpha, &opts)?;
            Weights::Scalar { weights, variance }
        }
        Task::MeanVector(flavor) => Weights::Vector(match flavor {
            Flavor::Scalar => scalar_weights_nd(s, &ms.element_covs(s, n), alpha)?,
            Flavor::Field => field_weights_nd(s, &ms.element_covs(s, n), alpha)?,
            Flavor::Wfield => {
                let basis = exp.basis.as_ref().expect("basis resolved for wfield");
                let t = ms.gaussian.transformed(basis)?;
                let covs = (0..n).map(|i| t.element_group_covariances(s, i)).collect();
                wfield_weights(s, &covs, alpha, basis)?
            }
            Flavor::Matrix => matrix_weights(s, &vec![n; s.levels()], &ms.stacked(s), &kron_alpha(alpha, n))?,
        }),
        Task::CovMatrix(CovFlavor::Scalar) | Task::Localize => {
            Weights::CovMatrix(covmat_scalar_weights(s, &ms.summed_covcov(s)?, alpha)?)
        }
        Task::CovMatrix(CovFlavor::Entrywise) => {
            Weights::Entrywise(covmat_entrywise_weights(s, &entry_covs(ms, s, n)?, alpha, DEFAULT_ENTRYWISE_CAP)?)
        }
    })
}

/// Variance of `weights` under the exact model moments.
pub fn exact_variance(exp: &Experiment, s: &CouplingStructure, weights: &Weights) -> CliResult<f64> {
    let exact = MomentSet {
        gaussian: exp.model.gaussian_moments(),
        calibration: None,
    };
    let m = s.require_samples()?;
    let n = exp.n;
    Ok(match weights {
        Weights::Scalar { weights, .. } => {
            let covs = match exp.task {
                Task::CovScalar => scalar_cov_estimator_covs(&exact, s)?,
                _ => GroupMomentSet::per_sample(exact.stacked(s)).estimator_covariances(s)?,
            };
            weights.variance(&covs)
        }
        Weights::Vector(v) => match &v.weights {
            VectorWeights::Scalar(w) => {
                let avg = averaged_covariances(&exact.element_covs(s, n));
                w.variance(&GroupMomentSet::per_sample(avg).estimator_covariances(s)?)
            }
            VectorWeights::Field(field) => per_element_variance(s, field, &exact.element_covs(s, n))?,
            VectorWeights::Wfield { basis, field } => {
                let t = exact.gaussian.transformed(basis)?;
                let covs: ElementCovariances = (0..n).map(|i| t.element_group_covariances(s, i)).collect();
                per_element_variance(s, field, &covs)?
            }
            VectorWeights::Matrix { blocks, .. } => exact
                .stacked(s)
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let b = DMatrix::from_fn(n, n * blocks[k].len(), |r, col| blocks[k][col / n][(r, col % n)]);
                    (&b * c * b.transpose()).trace() / m[k] as f64
                })
                .sum(),
        },
        Weights::CovMatrix(sol) => {
            let covs: Vec<DMatrix<f64>> = exact.summed_covcov(s)?.into_iter().map(|c| c.matrix).collect();
            sol.weights.variance(&covs)
        }
        Weights::Entrywise(e) => {
            let covs = entry_covs(&exact, s, n)?;
            (0..n * n).map(|p| e.entries[p].variance(&covs[p])).sum()
        }
    })
}

fn per_element_variance(s: &CouplingStructure, field: &[WeightSet], covs: &ElementCovariances) -> CliResult<f64> {
    field
        .iter()
        .zip(covs)
        .map(|(w, c)| Ok(w.variance(&GroupMomentSet::per_sample(c.clone()).estimator_covariances(s)?)))
        .sum()
}

/// Applies the weights to one ensemble; matrices are returned row-major.
pub fn apply(exp: &Experiment, s: &CouplingStructure, weights: &Weights, e: &Ensemble) -> CliResult<Vec<f64>> {
    Ok(match weights {
        Weights::Scalar { weights, .. } => {
            let values = match exp.task {
                Task::CovScalar => e
                    .groups
                    .iter()
                    .map(|g| {
                        (0..g.levels().len())
                            .map(|pos| {
                                let x = g.column(pos, 0);
                                mc_cov(&x, &x)
                            })
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()?,
                _ => e.scalar_means(),
            };
            vec![apply_scalar_estimator(weights, &values)?]
        }
        Weights::Vector(v) => apply_vector_estimator(v, &e.vector_means())?,
        Weights::CovMatrix(sol) => row_major(&apply_covmat_scalar(s, &sol.weights, &ensemble_sample_covariances(e)?)?.matrix),
        Weights::Entrywise(w) => row_major(&apply_covmat_entrywise(s, w, &ensemble_sample_covariances(e)?)?.matrix),
    })
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Exact value of the estimated quantity; matrices row-major.
pub fn truth(exp: &Experiment) -> Vec<f64> {
    let gm = exp.model.gaussian_moments();
    let n = exp.n;
    match exp.task {
        Task::MeanScalar | Task::MeanVector(_) => {
            let mut acc = DVector::zeros(n);
            for (l, a) in exp.alpha.iter().enumerate() {
                acc += gm.level_mean(l) * *a;
            }
            acc.as_slice().to_vec()
        }
        Task::CovScalar | Task::CovMatrix(_) | Task::Localize => {
            let mut acc = DMatrix::zeros(n, n);
            for (l, a) in exp.alpha.iter().enumerate() {
                acc += gm.block(l, l) * *a;
            }
            row_major(&acc)
        }
    }
}

fn task_header(exp: &Experiment, command: &str) -> Value {
    json!({
        "command": command,
        "task": exp.task.name(),
        "flavor": exp.task.flavor(),
        "seed": exp.seed,
        "generator": mlblue_core::rng::GENERATOR,
        "moments": exp.config.moments.source,
        "alpha": exp.alpha,
        "structure": StructureDoc::from(&exp.structure),
        "n": exp.n,
    })
}

fn weights_json(s: &CouplingStructure, weights: &Weights) -> (Value, Table) {
    let groups = s.groups();
    match weights {
        Weights::Scalar { weights: w, .. } | Weights::CovMatrix(CovmatScalarSolution { weights: w, .. }) => {
            scalar_weights_json(s, w)
        }
        Weights::Vector(v) => match &v.weights {
            VectorWeights::Scalar(w) => scalar_weights_json(s, w),
            VectorWeights::Field(field) | VectorWeights::Wfield { field, .. } => {
                let mut t = Table::new("weights", &["group", "level", "element", "beta"]);
                let per_group: Vec<Value> = groups
                    .iter()
                    .enumerate()
                    .map(|(k, g)| {
                        let beta: Vec<Vec<f64>> = (0..g.len())
                            .map(|pos| field.iter().map(|w| w.betas[k][pos]).collect())
                            .collect();
                        for (pos, &l) in g.iter().enumerate() {
                            for (i, b) in beta[pos].iter().enumerate() {
                                t.push(vec![idx(k), idx(l), idx(i), num(*b)]);
                            }
                        }
                        json!({"group": k + 1, "levels": one_based(g), "beta": beta})
                    })
                    .collect();
                (json!(per_group), t)
            }
            VectorWeights::Matrix { blocks, .. } => {
                let mut t = Table::new("weights", &["group", "level", "row", "col", "value"]);
                let per_group: Vec<Value> = groups
                    .iter()
                    .enumerate()
                    .map(|(k, g)| {
                        for (pos, &l) in g.iter().enumerate() {
                            let b = &blocks[k][pos];
                            for i in 0..b.nrows() {
                                for j in 0..b.ncols() {
                                    t.push(vec![idx(k), idx(l), idx(i), idx(j), num(b[(i, j)])]);
                                }
                            }
                        }
                        let mats: Vec<Value> = blocks[k].iter().map(matrix_rows).collect();
                        json!({"group": k + 1, "levels": one_based(g), "blocks": mats})
                    })
                    .collect();
                (json!(per_group), t)
            }
        },
        Weights::Entrywise(e) => {
            let n = e.n;
            let mut t = Table::new("weights", &["group", "level", "row", "col", "beta"]);
            let per_group: Vec<Value> = groups
                .iter()
                .enumerate()
                .map(|(k, g)| {
                    let mats: Vec<Value> = (0..g.len())
                        .map(|pos| {
                            let m = DMatrix::from_fn(n, n, |i, j| e.entry(i, j).betas[k][pos]);
                            for i in 0..n {
                                for j in 0..n {
                                    t.push(vec![idx(k), idx(g[pos]), idx(i), idx(j), num(m[(i, j)])]);
                                }
                            }
                            matrix_rows(&m)
                        })
                        .collect();
                    json!({"group": k + 1, "levels": one_based(g), "beta": mats})
                })
                .collect();
            (json!(per_group), t)
        }
    }
}

fn scalar_weights_json(s: &CouplingStructure, w: &WeightSet) -> (Value, Table) {
    let mut t = Table::new("weights", &["group", "level", "beta"]);
    let per_group: Vec<Value> = s
        .groups()
        .iter()
        .enumerate()
        .map(|(k, g)| {
            for (pos, &l) in g.iter().enumerate() {
                t.push(vec![idx(k), idx(l), num(w.betas[k][pos])]);
            }
            json!({"group": k + 1, "levels": one_based(g), "beta": w.betas[k]})
        })
        .collect();
    (json!(per_group), t)
}

fn one_based(g: &[usize]) -> Vec<usize> {
    g.iter().map(|l| l + 1).collect()
}

fn bias_defect(s: &CouplingStructure, w: &Weights) -> f64 {
    match w {
        Weights::Scalar { weights, .. } => weights.bias_defect(s),
        Weights::Vector(v) => v.bias_defect(s),
        Weights::CovMatrix(sol) => sol.weights.bias_defect(s),
        Weights::Entrywise(e) => e.entries.iter().map(|w| w.bias_defect(s)).fold(0.0, f64::max),
    }
}

fn weights_details(w: &Weights) -> Value {
    match w {
        Weights::Vector(v) => json!({
            "fallback_elements": one_based(&v.fallback_elements),
            "basis": match &v.weights {
                VectorWeights::Wfield { basis, .. } => Some(basis.kind()),
                _ => None,
            },
        }),
        Weights::CovMatrix(sol) => json!({
            "dropped": sol.dropped.iter().map(|(k, l)| json!({"group": k + 1, "level": l + 1})).collect::<Vec<_>>(),
        }),
        _ => json!({}),
    }
}

/// `weights`: optimal weights and their variance.
pub fn weights_report(exp: &Experiment) -> CliResult<Report> {
    if exp.task == Task::Localize {
        return localize_report(exp);
    }
    let s = exp.sampled_structure()?;
    let ms = moment_set(exp, exp.seed)?;
    let w = compute_weights(exp, s, &ms)?;
    let (table, csv) = weights_json(s, &w);
    let mut results = task_header(exp, "weights");
    results["weights"] = table;
    results["variance"] = json!(w.predicted_variance());
    results["exact_variance"] = json!(exact_variance(exp, s, &w)?);
    results["bias_defect"] = json!(bias_defect(s, &w));
    // Weights from sampled moments are independent of any ensemble they
    // are later applied to.
    results["biased"] = json!(false);
    results["details"] = weights_details(&w);
    Ok(Report {
        results,
        tables: vec![csv],
    })
}

/// `estimate`: one ensemble, one estimate.
pub fn estimate_report(exp: &Experiment) -> CliResult<Report> {
    let s = exp.sampled_structure()?;
    let e = sample_ensemble(&exp.model, s, exp.seed)?;
    let target = truth(exp);
    let mut results = task_header(exp, "estimate");
    let mut table = Table::new("estimate", &["component", "estimate", "truth"]);
    if exp.task == Task::Localize {
        let (map, baseline) = localization_pair(exp, s, &e, exp.seed)?;
        let partition = exp.partition.as_ref().expect("partition resolved for localize");
        let est = ensemble_sample_covariances(&e)?;
        let loc = row_major(&apply_localized_estimator(s, &map, partition, &est)?.matrix);
        let base = row_major(&apply_localized_estimator(s, &baseline, partition, &est)?.matrix);
        for (i, (a, t)) in loc.iter().zip(&target).enumerate() {
            table.push(vec![idx(i), num(*a), num(*t)]);
        }
        results["estimate"] = json!(loc);
        results["baseline_estimate"] = json!(base);
        results["squared_error"] = json!(squared_error(&loc, &target));
        results["baseline_squared_error"] = json!(squared_error(&base, &target));
        results["biased"] = json!(true);
    } else {
        let ms = moment_set(exp, exp.seed)?;
        let w = compute_weights(exp, s, &ms)?;
        let v = apply(exp, s, &w, &e)?;
        for (i, (a, t)) in v.iter().zip(&target).enumerate() {
            table.push(vec![idx(i), num(*a), num(*t)]);
        }
        results["estimate"] = json!(v);
        results["squared_error"] = json!(squared_error(&v, &target));
        results["variance"] = json!(w.predicted_variance());
        results["exact_variance"] = json!(exact_variance(exp, s, &w)?);
        results["biased"] = json!(false);
    }
    results["truth"] = json!(target);
    Ok(Report {
        results,
        tables: vec![table],
    })
}

fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Optimal localization from `e` and the unlocalized baseline.
fn localization_pair(
    exp: &Experiment,
    s: &CouplingStructure,
    e: &Ensemble,
    seed: u64,
) -> CliResult<(LocalizationMap, LocalizationMap)> {
    let cfg = &exp.config.localize;
    let partition = exp.partition.as_ref().expect("partition resolved for localize");
    let calib = calibration_ensemble(&exp.model, cfg.calibration_members, derive_seed(seed, LOCALIZE_TAG));
    let opts = LocalizationOptions {
        alpha: Some(exp.alpha.clone()),
        clip: cfg.clip,
        max_pairs_per_class: cfg.max_pairs_per_class,
        subset_seed: seed,
        ..LocalizationOptions::default()
    };
    let map = optimal_localization(s, e, &calib, partition, &opts)?;
    Ok((map, baseline_map(exp, s, seed)?))
}

fn baseline_map(exp: &Experiment, s: &CouplingStructure, seed: u64) -> CliResult<LocalizationMap> {
    let partition = exp.partition.as_ref().expect("partition resolved for localize");
    let w = match exp.config.localize.baseline {
        Baseline::Mlmc => mlmc_weights(s, &exp.alpha)?,
        Baseline::Mlblue => {
            let ms = moment_set(exp, seed)?;
            covmat_scalar_weights(s, &ms.summed_covcov(s)?, &exp.alpha)?.weights
        }
    };
    Ok(LocalizationMap::uniform(partition, s, &w))
}

/// `localize`: the optimal localization map of one ensemble.
pub fn localize_report(exp: &Experiment) -> CliResult<Report> {
    if exp.task != Task::Localize {
        return Err(CliError::config("the localize command needs task = \"localize\""));
    }
    let s = exp.sampled_structure()?;
    let partition = exp.partition.as_ref().expect("partition resolved for localize");
    let e = sample_ensemble(&exp.model, s, exp.seed)?;
    let (map, baseline) = localization_pair(exp, s, &e, exp.seed)?;
    let est = ensemble_sample_covariances(&e)?;
    let target = truth(exp);
    let loc = row_major(&apply_localized_estimator(s, &map, partition, &est)?.matrix);
    let base = row_major(&apply_localized_estimator(s, &baseline, partition, &est)?.matrix);

    let mut t = Table::new("localization", &["class", "distance", "group", "level", "weight"]);
    for (c, per_class) in map.weights.iter().enumerate() {
        for (k, g) in s.groups().iter().enumerate() {
            for (pos, &l) in g.iter().enumerate() {
                t.push(vec![c.to_string(), num(partition.distance(c)), idx(k), idx(l), num(per_class[k][pos])]);
            }
        }
    }
    let mut results = task_header(exp, "localize");
    results["partition"] = json!(partition.to_doc());
    results["localization"] = json!(map.to_doc(partition));
    results["min_eigenvalues"] = json!(map.psd_diagnostic(partition));
    results["squared_error"] = json!(squared_error(&loc, &target));
    results["baseline"] = json!(exp.config.localize.baseline);
    results["baseline_squared_error"] = json!(squared_error(&base, &target));
    results["biased"] = json!(true);
    Ok(Report {
        results,
        tables: vec![t],
    })
}

/// `replicate`: empirical against predicted moments over independent
/// ensembles.
pub fn replicate_report(exp: &Experiment, count: usize) -> CliResult<Report> {
    let s = exp.sampled_structure()?;
    let target = truth(exp);
    let mut results = task_header(exp, "replicate");
    results["replications"] = json!(count);
    if exp.task == Task::Localize {
        let partition = exp.partition.as_ref().expect("partition resolved for localize");
        let baseline = baseline_map(exp, s, exp.seed)?;
        let reps = replicate_estimator(&exp.model, s, count, exp.seed, |e| {
            let r_seed = e.metadata.seed.unwrap_or(exp.seed);
            let (map, _) = localization_pair(exp, s, e, r_seed).map_err(into_core)?;
            let est = ensemble_sample_covariances(e)?;
            let mut out = row_major(&apply_localized_estimator(s, &map, partition, &est)?.matrix);
            out.extend(row_major(&apply_localized_estimator(s, &baseline, partition, &est)?.matrix));
            Ok(out)
        })?;
        let nn = exp.n * exp.n;
        let split = |from: usize| Replications {
            values: reps.values.iter().map(|v| v[from..from + nn].to_vec()).collect(),
        };
        let (loc, base) = (split(0), split(nn));
        let (mse, mse_se) = loc.mse(&target);
        let (bmse, bmse_se) = base.mse(&target);
        results["mse"] = json!(mse);
        results["mse_se"] = json!(mse_se);
        results["baseline"] = json!(exp.config.localize.baseline);
        results["baseline_mse"] = json!(bmse);
        results["baseline_mse_se"] = json!(bmse_se);
        let mut t = Table::new("mse", &["replication", "squared_error", "baseline_squared_error"]);
        for (r, (a, b)) in loc.squared_errors(&target).iter().zip(base.squared_errors(&target)).enumerate() {
            t.push(vec![idx(r), num(*a), num(b)]);
        }
        return Ok(Report {
            results,
            tables: vec![t],
        });
    }

    let sampled = exp.config.moments.source == MomentSource::Sampled;
    let recompute = sampled && exp.config.replicate.recompute_weights;
    let fixed = if recompute {
        None
    } else {
        Some(compute_weights(exp, s, &moment_set(exp, exp.seed)?)?)
    };
    let reps = replicate_estimator(&exp.model, s, count, exp.seed, |e| {
        let own;
        let w = match &fixed {
            Some(w) => w,
            None => {
                let r_seed = e.metadata.seed.unwrap_or(exp.seed);
                let ms = moment_set(exp, r_seed).map_err(into_core)?;
                own = compute_weights(exp, s, &ms).map_err(into_core)?;
                &own
            }
        };
        apply(exp, s, w, e).map_err(into_core)
    })?;
    let mean = reps.mean();
    let se = reps.mean_se();
    let var = reps.variance();
    let var_se = reps.variance_se();
    let z_max = mean
        .iter()
        .zip(&target)
        .zip(&se)
        .map(|((m, t), s)| if *s > 0.0 { (m - t).abs() / s } else { 0.0 })
        .fold(0.0, f64::max);
    let mut t = Table::new("replicate", &["component", "truth", "mean", "mean_se", "variance", "variance_se"]);
    for i in 0..mean.len() {
        t.push(vec![idx(i), num(target[i]), num(mean[i]), num(se[i]), num(var[i]), num(var_se[i])]);
    }
    results["truth"] = json!(target);
    results["mean"] = json!(mean);
    results["mean_se"] = json!(se);
    results["max_abs_z"] = json!(z_max);
    results["empirical_variance"] = json!(reps.total_variance());
    results["empirical_variance_se"] = json!(var_se.iter().map(|v| v * v).sum::<f64>().sqrt());
    if let Some(w) = &fixed {
        let exact = exact_variance(exp, s, w)?;
        results["variance"] = json!(w.predicted_variance());
        results["exact_variance"] = json!(exact);
        results["variance_ratio"] = json!(reps.total_variance() / exact);
    }
    results["recompute_weights"] = json!(recompute);
    Ok(Report {
        results,
        tables: vec![t],
    })
}

fn into_core(e: CliError) -> mlblue_core::Error {
    match e {
        CliError::Numerical(e) => e,
        other => mlblue_core::Error::InvalidArgument(other.to_string()),
    }
}

/// `allocate`: integer sample sizes for a budget or a target.
pub fn allocate_report(exp: &Experiment, budget: Option<f64>, target: Option<f64>) -> CliResult<Report> {
    if exp.task == Task::Localize {
        return Err(CliError::config(
            "sample allocation for the localized estimator is not defined; allocate for cov-matrix instead",
        ));
    }
    let (budget, target) = match (budget, target, &exp.config.allocation) {
        (None, None, Some(a)) => (a.budget, a.target),
        (b, t, _) => (b, t),
    };
    if exp.task == Task::MeanVector(Flavor::Matrix) {
        return candidates_report(exp, budget, target);
    }
    crate::config::check_allocation(budget, target)?;
    let mode = match (budget, target) {
        (Some(b), _) => AllocationMode::Budget(b),
        (_, Some(t)) => AllocationMode::Target(t),
        _ => unreachable!("checked above"),
    };
    let s = &exp.structure;
    if s.costs().is_empty() {
        return Err(CliError::config("allocation needs group costs"));
    }
    let ms = moment_set(exp, exp.seed)?;
    let n = exp.n;
    let model = match exp.task {
        Task::MeanScalar => VarianceModel::Mean(ms.stacked(s)),
        Task::MeanVector(_) => VarianceModel::Mean(averaged_covariances(&ms.element_covs(s, n))),
        Task::CovScalar => VarianceModel::Covariance(
            s.groups()
                .iter()
                .map(|g| Ok(covcov_model(&ms.pair_moments(g, 0, 0)?)))
                .collect::<CliResult<_>>()?,
        ),
        Task::CovMatrix(_) => VarianceModel::Covariance(match &ms.calibration {
            None => ms.gaussian.averaged_covcov()?.per_group(s),
            Some(c) => averaged_covcov_model(c)?.per_group(s),
        }),
        Task::Localize => unreachable!("rejected above"),
    };
    let problem = AllocationProblem::new(s.clone(), exp.alpha.clone(), model)?;
    let a = problem.allocate(mode)?;
    let mut results = task_header(exp, "allocate");
    results["mode"] = json!(mode);
    results["m"] = json!(a.samples);
    results["variance"] = json!(a.variance);
    results["cost"] = json!(a.cost);
    results["gap"] = json!(a.gap);
    results["continuous_m"] = json!(a.continuous_samples);
    results["continuous_variance"] = json!(a.continuous_variance);
    results["kkt_residual"] = json!(a.kkt_residual);
    let allocated = s.clone().with_samples(a.samples.clone());
    results["allocated_structure"] = json!(StructureDoc::from(&allocated));
    if let AllocationMode::Budget(b) = mode {
        let uniform = problem.uniform_cost_allocation(b);
        results["uniform_m"] = json!(uniform);
        results["uniform_variance"] = json!(finite(problem.variance(&uniform)?));
    }
    if let Some(v) = flavor_variance(exp, &ms, s, &a)? {
        results["flavor_variance"] = v;
    }
    if matches!(exp.task, Task::CovMatrix(_)) && s.is_mlmc() {
        if let AllocationMode::Budget(b) = mode {
            results["mlmc_bound"] = mlmc_bound(&ms, s, b)?;
        }
    }
    let mut t = Table::new("allocation", &["group", "levels", "cost", "m", "continuous_m"]);
    for (k, g) in s.groups().iter().enumerate() {
        let levels = one_based(g).iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        t.push(vec![
            idx(k),
            levels,
            num(s.costs()[k]),
            a.samples[k].to_string(),
            num(a.continuous_samples[k]),
        ]);
    }
    Ok(Report {
        results,
        tables: vec![t],
    })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Variance of the configured flavor at the allocation, which optimizes
/// the scalar-weight variance; `null` when it cannot be evaluated.
fn flavor_variance(exp: &Experiment, ms: &MomentSet, s: &CouplingStructure, a: &Allocation) -> CliResult<Option<Value>> {
    let n = exp.n;
    let per_element = |covs: &ElementCovariances| -> CliResult<f64> {
        covs.iter()
            .map(|c| {
                let p = AllocationProblem::new(s.clone(), exp.alpha.clone(), VarianceModel::Mean(c.clone()))?;
                Ok(p.variance(&a.samples)?)
            })
            .sum()
    };
    let v = match exp.task {
        Task::MeanVector(Flavor::Field) => finite(per_element(&ms.element_covs(s, n))?),
        Task::MeanVector(Flavor::Wfield) => {
            let t = ms.gaussian.transformed(exp.basis.as_ref().expect("basis resolved for wfield"))?;
            finite(per_element(&(0..n).map(|i| t.element_group_covariances(s, i)).collect())?)
        }
        Task::CovMatrix(CovFlavor::Entrywise) => {
            let mut total = 0.0;
            for i in 0..n {
                for j in i..n {
                    let models = s
                        .groups()
                        .iter()
                        .map(|g| Ok(covcov_model(&ms.pair_moments(g, i, j)?)))
                        .collect::<CliResult<_>>()?;
                    let p = AllocationProblem::new(s.clone(), exp.alpha.clone(), VarianceModel::Covariance(models))?;
                    let v = p.variance(&a.samples)?;
                    total += if i == j { v } else { 2.0 * v };
                }
            }
            finite(total)
        }
        _ => return Ok(None),
    };
    Ok(Some(json!(v)))
}

/// `allocate` for matrix weights: the optimal variance at each configured
/// candidate. A budget picks the smallest variance within it, a target the
/// cheapest candidate meeting it.
fn candidates_report(exp: &Experiment, budget: Option<f64>, target: Option<f64>) -> CliResult<Report> {
    let candidates = exp
        .config
        .allocation
        .as_ref()
        .and_then(|a| a.candidates.as_ref())
        .ok_or_else(|| {
            CliError::config("matrix weights are allocated by evaluating candidates; set allocation.candidates")
        })?;
    let s = &exp.structure;
    crate::config::check_candidates(candidates, s.num_groups())?;
    if budget.is_some() || target.is_some() {
        crate::config::check_allocation(budget, target)?;
    }
    if s.costs().is_empty() {
        return Err(CliError::config("allocation needs group costs"));
    }
    let ms = moment_set(exp, exp.seed)?;
    let n = exp.n;
    let evaluated = matrix_allocation_candidates(
        s,
        &vec![n; s.levels()],
        &ms.stacked(s),
        &kron_alpha(&exp.alpha, n),
        candidates,
    )?;
    let feasible: Vec<bool> = evaluated
        .iter()
        .map(|(_, v, c)| match (budget, target) {
            (Some(b), _) => *c <= b * (1.0 + 1e-12),
            (_, Some(t)) => *v <= t * t,
            _ => true,
        })
        .collect();
    let key = |i: usize| if target.is_some() { evaluated[i].2 } else { evaluated[i].1 };
    let best = (0..evaluated.len())
        .filter(|&i| feasible[i])
        .min_by(|&a, &b| key(a).total_cmp(&key(b)));
    let mut results = task_header(exp, "allocate");
    results["mode"] = json!(match (budget, target) {
        (Some(b), _) => json!({"budget": b}),
        (_, Some(t)) => json!({"target": t}),
        _ => json!("candidates"),
    });
    results["candidates"] = json!(evaluated
        .iter()
        .zip(&feasible)
        .map(|((m, v, c), f)| json!({"m": m, "variance": v, "cost": c, "feasible": f}))
        .collect::<Vec<_>>());
    results["best"] = json!(best.map(|i| i + 1));
    if let Some(i) = best {
        let (m, v, c) = &evaluated[i];
        results["m"] = json!(m);
        results["variance"] = json!(v);
        results["cost"] = json!(c);
        results["allocated_structure"] = json!(StructureDoc::from(&s.clone().with_samples(m.clone())));
    }
    let mut t = Table::new("candidates", &["candidate", "m", "cost", "variance", "feasible"]);
    for (i, ((m, v, c), f)) in evaluated.iter().zip(&feasible).enumerate() {
        let m = m.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        t.push(vec![idx(i), m, num(*c), num(*v), f.to_string()]);
    }
    Ok(Report {
        results,
        tables: vec![t],
    })
}

fn mlmc_bound(ms: &MomentSet, s: &CouplingStructure, budget: f64) -> CliResult<Value> {
    let inputs = match &ms.calibration {
        None => ms.gaussian.mlmc_bound_inputs()?,
        Some(c) => MlmcBoundInputs::from_samples(c)?,
    };
    let exact = match &ms.calibration {
        None => ms.gaussian.averaged_covcov()?.per_group(s),
        Some(c) => averaged_covcov_model(c)?.per_group(s),
    };
    let a = mlmc_cov_allocation(s, &inputs, budget, Some(&exact))?;
    Ok(json!(a))
}

/// `validate`: the loaded configuration, normalized.
pub fn validate_report(exp: &Experiment) -> Report {
    let mut results = task_header(exp, "validate");
    results["valid"] = json!(true);
    results["model"] = json!(exp.model_spec);
    results["has_samples"] = json!(exp.structure.has_samples());
    results["has_costs"] = json!(!exp.structure.costs().is_empty());
    results["mlmc_pattern"] = json!(exp.structure.is_mlmc());
    Report {
        results,
        tables: Vec::new(),
    }
}
