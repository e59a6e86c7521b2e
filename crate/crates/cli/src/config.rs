//! Experiment configuration files.
//!
//! A configuration is a TOML document with `schema_version = 1`. Levels and
//! groups are 1-based, as in every other text format of the tool.
//!
//! ```toml
//! schema_version = 1
//! task = "mean-vector"
//! flavor = "wfield"
//! seed = 7
//!
//! [model]
//! type = "field"
//! n = 16
//! basis = "dct"
//! levels = [
//!     { coupling = 0.8, cutoff = 2.0 },
//!     { coupling = 1.0 },
//! ]
//!
//! [structure]
//! L = 2
//! groups = [[1], [1, 2]]
//! m = [64, 8]
//! costs = [0.1, 1.1]
//! ```
//!
//! `model_file` and `structure_file` may replace the inline tables; relative
//! paths are resolved against the directory of the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use mlblue_core::blue::finest_level_target;
use mlblue_core::covmat::{PartitionDoc, DEFAULT_CALIBRATION_MEMBERS};
use mlblue_core::synthetic::{CoupledModel, Model, ModelSpec};
use mlblue_core::{BasisKind, CouplingStructure, EquivalenceClassPartition, Flavor, OrthonormalBasis, StructureDoc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// `mean-scalar`, `mean-vector`, `cov-scalar`, `cov-matrix` or
    /// `localize`; the flavor may be given inline as `mean-vector(field)`.
    pub task: String,
    #[serde(default)]
    pub flavor: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Target weights over levels; defaults to the finest level.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub structure: Option<StructureDoc>,
    #[serde(default)]
    pub structure_file: Option<PathBuf>,
    /// Basis of the W-field flavor; defaults to the field model's basis, or
    /// DCT for other models.
    #[serde(default)]
    pub basis: Option<BasisKind>,
    #[serde(default)]
    pub moments: MomentsConfig,
    #[serde(default)]
    pub allocation: Option<AllocationConfig>,
    #[serde(default)]
    pub replicate: ReplicateConfig,
    #[serde(default)]
    pub localize: LocalizeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentSource {
    /// Exact moments of the Gaussian model.
    Exact,
    /// Moments estimated from an independent calibration ensemble.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    #[serde(default = "default_source")]
    pub source: MomentSource,
    /// Calibration ensemble size for sampled moments.
    #[serde(default = "default_members")]
    pub members: usize,
}

fn default_source() -> MomentSource {
    MomentSource::Exact
}

fn default_members() -> usize {
    2000
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            source: default_source(),
            members: default_members(),
        }
    }
}

/// Exactly one of `budget` and `target` (a standard deviation). Matrix
/// weights are allocated by evaluating `candidates` instead, where the
/// budget or target, if given, selects among them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationConfig {
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default)]
    pub target: Option<f64>,
    /// Sample sizes per group, one list per candidate.
    #[serde(default)]
    pub candidates: Option<Vec<Vec<u64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    /// Recompute sampled weights from a fresh calibration ensemble in
    /// every replication instead of once.
    #[serde(default)]
    pub recompute_weights: bool,
}

fn default_count() -> usize {
    1000
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        Self {
            count: default_count(),
            recompute_weights: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Unlocalized scalar-weight MLBLUE.
    Mlblue,
    /// Unlocalized telescoping weights; needs the MLMC pattern.
    Mlmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeConfig {
    #[serde(default = "default_calibration")]
    pub calibration_members: usize,
    #[serde(default)]
    pub clip: bool,
    #[serde(default)]
    pub max_pairs_per_class: Option<usize>,
    /// Partition file; the periodic distance partition when absent.
    #[serde(default)]
    pub partition_file: Option<PathBuf>,
    #[serde(default = "default_baseline")]
    pub baseline: Baseline,
}

fn default_calibration() -> usize {
    DEFAULT_CALIBRATION_MEMBERS
}

fn default_baseline() -> Baseline {
    Baseline::Mlblue
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            calibration_members: default_calibration(),
            clip: false,
            max_pairs_per_class: None,
            partition_file: None,
            baseline: default_baseline(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub csv: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, csv: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovFlavor {
    /// One weight per (group, level) for the whole matrix.
    Scalar,
    /// Independent weights for every entry.
    Entrywise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    MeanScalar,
    MeanVector(Flavor),
    CovScalar,
    CovMatrix(CovFlavor),
    Localize,
}

impl Task {
    pub fn parse(task: &str, flavor: Option<&str>) -> CliResult<Self> {
        let (name, inline) = match task.split_once('(') {
            Some((name, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| CliError::config(format!("malformed task {task:?}")))?;
                (name.trim(), Some(inner.trim()))
            }
            None => (task.trim(), None),
        };
        let flavor = match (inline, flavor) {
            (Some(a), Some(b)) if a != b => {
                return Err(CliError::config(format!("task flavor {a:?} conflicts with flavor {b:?}")));
            }
            (a, b) => a.or(b),
        };
        let no_flavor = |t: Task| match flavor {
            Some(f) => Err(CliError::config(format!("task {name} takes no flavor (got {f:?})"))),
            None => Ok(t),
        };
        match name {
            "mean-scalar" => no_flavor(Task::MeanScalar),
            "cov-scalar" => no_flavor(Task::CovScalar),
            "localize" => no_flavor(Task::Localize),
            "mean-vector" => {
                let f = match flavor {
                    Some("scalar") => Flavor::Scalar,
                    Some("field") => Flavor::Field,
                    Some("wfield") => Flavor::Wfield,
                    Some("matrix") => Flavor::Matrix,
                    Some(other) => {
                        return Err(CliError::config(format!(
                            "unknown mean-vector flavor {other:?} (scalar, field, wfield, matrix)"
                        )))
                    }
                    None => return Err(CliError::config("mean-vector needs a flavor")),
                };
                Ok(Task::MeanVector(f))
            }
            "cov-matrix" => {
                let f = match flavor {
                    Some("scalar") | None => CovFlavor::Scalar,
                    Some("entrywise") => CovFlavor::Entrywise,
                    Some(other) => {
                        return Err(CliError::config(format!(
                            "unknown cov-matrix flavor {other:?} (scalar, entrywise)"
                        )))
                    }
                };
                Ok(Task::CovMatrix(f))
            }
            other => Err(CliError::config(format!("unknown task {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::MeanScalar => "mean-scalar",
            Task::MeanVector(_) => "mean-vector",
            Task::CovScalar => "cov-scalar",
            Task::CovMatrix(_) => "cov-matrix",
            Task::Localize => "localize",
        }
    }

    pub fn flavor(&self) -> Option<&'static str> {
        match self {
            Task::MeanVector(Flavor::Scalar) => Some("scalar"),
            Task::MeanVector(Flavor::Field) => Some("field"),
            Task::MeanVector(Flavor::Wfield) => Some("wfield"),
            Task::MeanVector(Flavor::Matrix) => Some("matrix"),
            Task::CovMatrix(CovFlavor::Scalar) => Some("scalar"),
            Task::CovMatrix(CovFlavor::Entrywise) => Some("entrywise"),
            _ => None,
        }
    }

    /// Covariance tasks need at least two samples per group.
    pub fn min_samples(&self) -> u64 {
        match self {
            Task::MeanScalar | Task::MeanVector(_) => 1,
            Task::CovScalar | Task::CovMatrix(_) | Task::Localize => 2,
        }
    }
}

/// A validated configuration with every referenced file loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub task: Task,
    pub model_spec: ModelSpec,
    pub model: Model,
    /// Sample sizes and costs as given; either may be empty.
    pub structure: CouplingStructure,
    pub alpha: Vec<f64>,
    pub seed: u64,
    /// Element count of every level.
    pub n: usize,
    /// W-field basis.
    pub basis: Option<OrthonormalBasis>,
    /// Localization partition.
    pub partition: Option<EquivalenceClassPartition>,
}

fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Parses TOML, or JSON when the file name ends in `.json`.
fn parse_doc<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::config(format!("{what} file {} does not exist", path.display())));
    }
    let text = read_to_string(path)?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }
}

fn pick<T: DeserializeOwned>(
    inline: Option<T>,
    file: Option<&PathBuf>,
    base: &Path,
    what: &str,
) -> CliResult<T> {
    match (inline, file) {
        (Some(v), None) => Ok(v),
        (None, Some(f)) => parse_doc(&base.join(f), what),
        (Some(_), Some(_)) => Err(CliError::config(format!(
            "give either an inline {what} or a {what}_file, not both"
        ))),
        (None, None) => Err(CliError::config(format!("missing {what} (inline table or {what}_file)"))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::config(format!("config file {} does not exist", path.display())));
        }
        Self::parse(&read_to_string(path)?)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        // Check the version first so old files get a clear message.
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        match raw.get("schema_version").and_then(toml::Value::as_integer) {
            Some(v) if v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(CliError::config(format!(
                    "unsupported schema_version {v}; this tool reads version {SCHEMA_VERSION}"
                )))
            }
            None => return Err(CliError::config("missing integer schema_version")),
        }
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }
}

impl Experiment {
    /// Loads `path`; `seed` overrides the configured seed.
    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let config = ExperimentConfig::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_config(config, &base, seed)
    }

    pub fn from_config(config: ExperimentConfig, base: &Path, seed: Option<u64>) -> CliResult<Self> {
        if config.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {}; this tool reads version {SCHEMA_VERSION}",
                config.schema_version
            )));
        }
        let task = Task::parse(&config.task, config.flavor.as_deref())?;
        let model_spec: ModelSpec = pick(config.model.clone(), config.model_file.as_ref(), base, "model")?;
        let model = model_spec
            .build()
            .map_err(|e| CliError::config(format!("model: {e}")))?;
        let doc: StructureDoc = pick(config.structure.clone(), config.structure_file.as_ref(), base, "structure")?;
        let structure = doc
            .into_structure()
            .map_err(|e| CliError::config(format!("structure: {e}")))?;
        if structure.levels() != model.levels() {
            return Err(CliError::config(format!(
                "structure has {} levels but the model has {}",
                structure.levels(),
                model.levels()
            )));
        }
        let alpha = config
            .alpha
            .clone()
            .unwrap_or_else(|| finest_level_target(structure.levels()));
        if alpha.len() != structure.levels() {
            return Err(CliError::config(format!(
                "alpha has {} entries for {} levels",
                alpha.len(),
                structure.levels()
            )));
        }
        if alpha.iter().all(|&a| a == 0.0) || alpha.iter().any(|a| !a.is_finite()) {
            return Err(CliError::config("alpha must be finite and not all zero"));
        }
        let sizes = model.level_sizes();
        let n = sizes[0];
        if sizes.iter().any(|&s| s != n) {
            return Err(CliError::config("levels of different sizes are not supported"));
        }
        if matches!(task, Task::MeanScalar | Task::CovScalar) && n != 1 {
            return Err(CliError::config(format!(
                "task {} needs scalar levels, the model has {n} elements",
                task.name()
            )));
        }
        if structure.has_samples() {
            let min = task.min_samples();
            if let Some(k) = structure.samples().iter().position(|&m| m < min) {
                return Err(CliError::config(format!(
                    "group {} has m = {}; task {} needs at least {min}",
                    k + 1,
                    structure.samples()[k],
                    task.name()
                )));
            }
        }
        if config.moments.source == MomentSource::Sampled && config.moments.members < 4 {
            return Err(CliError::config("sampled moments need at least 4 calibration members"));
        }
        if let Some(a) = &config.allocation {
            match &a.candidates {
                None => check_allocation(a.budget, a.target)?,
                Some(c) => {
                    if task != Task::MeanVector(Flavor::Matrix) {
                        return Err(CliError::config("allocation candidates apply to mean-vector(matrix) only"));
                    }
                    check_candidates(c, structure.num_groups())?;
                    if a.budget.is_some() || a.target.is_some() {
                        check_allocation(a.budget, a.target)?;
                    }
                }
            }
        }

        let basis = match task {
            Task::MeanVector(Flavor::Wfield) => {
                let kind = match (config.basis, &model) {
                    (Some(k), _) => k,
                    (None, Model::Field(f)) => f.basis().kind(),
                    (None, Model::Hierarchy(_)) => BasisKind::Dct,
                };
                let b = match (kind, &model) {
                    (BasisKind::Custom, Model::Field(f)) => f.basis().clone(),
                    (BasisKind::Custom, _) => {
                        return Err(CliError::config("a custom basis is only available from a field model"))
                    }
                    (k, _) => OrthonormalBasis::of_kind(k, n).map_err(|e| CliError::config(e.to_string()))?,
                };
                Some(b)
            }
            _ => None,
        };

        let partition = match task {
            Task::Localize => {
                if config.localize.calibration_members < 4 {
                    return Err(CliError::config("localization needs at least 4 calibration members"));
                }
                let p = match &config.localize.partition_file {
                    Some(f) => {
                        let doc: PartitionDoc = parse_doc(&base.join(f), "partition")?;
                        EquivalenceClassPartition::from_doc(doc).map_err(|e| CliError::config(e.to_string()))?
                    }
                    None => EquivalenceClassPartition::periodic(n),
                };
                if p.n() != n {
                    return Err(CliError::config(format!(
                        "partition is for n = {} but levels have {n} elements",
                        p.n()
                    )));
                }
                if config.localize.baseline == Baseline::Mlmc && !structure.is_mlmc() {
                    return Err(CliError::config("the mlmc baseline needs the MLMC coupling pattern"));
                }
                Some(p)
            }
            _ => None,
        };

        Ok(Self {
            seed: seed.or(config.seed).unwrap_or(0),
            task,
            model_spec,
            model,
            structure,
            alpha,
            n,
            basis,
            partition,
            config,
        })
    }

    /// The structure, failing unless it carries sample sizes.
    pub fn sampled_structure(&self) -> CliResult<&CouplingStructure> {
        if self.structure.has_samples() {
            Ok(&self.structure)
        } else {
            Err(CliError::config("the structure needs sample sizes m for this command"))
        }
    }
}

pub fn check_allocation(budget: Option<f64>, target: Option<f64>) -> CliResult<()> {
    match (budget, target) {
        (Some(b), None) if b.is_finite() && b > 0.0 => Ok(()),
        (None, Some(t)) if t.is_finite() && t > 0.0 => Ok(()),
        (Some(_), Some(_)) => Err(CliError::config("give either an allocation budget or a target, not both")),
        (None, None) => Err(CliError::config("allocation needs a budget or a target")),
        _ => Err(CliError::config("allocation budget and target must be positive")),
    }
}

pub fn check_candidates(candidates: &[Vec<u64>], groups: usize) -> CliResult<()> {
    if candidates.is_empty() {
        return Err(CliError::config("allocation candidates are empty"));
    }
    for (i, m) in candidates.iter().enumerate() {
        if m.len() != groups {
            return Err(CliError::config(format!(
                "candidate {} has {} sample sizes for {groups} groups",
                i + 1,
                m.len()
            )));
        }
        if m.contains(&0) {
            return Err(CliError::config(format!("candidate {} has an empty group", i + 1)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inline_and_separate_flavors() {
        assert_eq!(Task::parse("mean-vector(wfield)", None).unwrap(), Task::MeanVector(Flavor::Wfield));
        assert_eq!(Task::parse("mean-vector", Some("matrix")).unwrap(), Task::MeanVector(Flavor::Matrix));
        assert_eq!(Task::parse("cov-matrix", None).unwrap(), Task::CovMatrix(CovFlavor::Scalar));
        assert!(Task::parse("mean-vector(field)", Some("matrix")).is_err());
        assert!(Task::parse("mean-scalar", Some("field")).is_err());
        assert!(Task::parse("mean-vector", None).is_err());
        assert!(Task::parse("mean-vector(field", None).is_err());
        assert!(Task::parse("median", None).is_err());
    }

    #[test]
    fn schema_version_is_checked_first() {
        let e = ExperimentConfig::parse("schema_version = 2\ntask = 'x'\nbogus = 1").unwrap_err();
        assert!(e.to_string().contains("schema_version 2"));
        assert!(ExperimentConfig::parse("task = 'mean-scalar'").is_err());
    }
}
