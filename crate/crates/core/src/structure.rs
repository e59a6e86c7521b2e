//! Coupling structures: fidelity levels, coupling groups, sample sizes and
//! costs, together with the selection (`restrict`) and extension (`extend`)
//! operators between level space and group space.
//!
//! Levels and groups are 0-based in the Rust API. The text document format
//! ([`StructureDoc`]) and the CLI use 1-based indices.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A rule of a well-formed coupling structure that does not hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Violation {
    NoLevels,
    NoGroups,
    EmptyGroup { group: usize },
    LevelOutOfRange { group: usize, level: usize },
    RepeatedLevel { group: usize, level: usize },
    DuplicateGroup { group: usize, duplicate_of: usize },
    UncoveredLevel { level: usize },
    SampleCountLength { expected: usize, actual: usize },
    CostLength { expected: usize, actual: usize },
    NonPositiveCost { group: usize },
}

impl fmt::Display for Violation {
    // 1-based, like the document format.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::NoLevels => write!(f, "L must be at least 1"),
            Violation::NoGroups => write!(f, "at least one coupling group is required"),
            Violation::EmptyGroup { group } => write!(f, "group {} is empty", group + 1),
            Violation::LevelOutOfRange { group, level } => write!(
                f,
                "group {} references level {} outside 1..=L",
                group + 1,
                level.wrapping_add(1)
            ),
            Violation::RepeatedLevel { group, level } => {
                write!(f, "group {} lists level {} twice", group + 1, level + 1)
            }
            Violation::DuplicateGroup {
                group,
                duplicate_of,
            } => write!(
                f,
                "group {} duplicates group {}",
                group + 1,
                duplicate_of + 1
            ),
            Violation::UncoveredLevel { level } => {
                write!(f, "level {} is not covered by any group", level + 1)
            }
            Violation::SampleCountLength { expected, actual } => {
                write!(f, "m has {actual} entries, expected {expected}")
            }
            Violation::CostLength { expected, actual } => {
                write!(f, "costs has {actual} entries, expected {expected}")
            }
            Violation::NonPositiveCost { group } => {
                write!(f, "cost of group {} must be positive", group + 1)
            }
        }
    }
}

/// Fidelity levels, coupling groups and (optionally) per-group sample sizes
/// and costs.
///
/// An empty `samples` or `costs` vector means "not specified". Construction
/// does not validate; call [`CouplingStructure::validate`] or
/// [`CouplingStructure::ensure_valid`].
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingStructure {
    levels: usize,
    groups: Vec<Vec<usize>>,
    samples: Vec<u64>,
    costs: Vec<f64>,
}

impl CouplingStructure {
    /// Builds a structure from 0-based level lists. Each group is sorted.
    pub fn new(levels: usize, groups: Vec<Vec<usize>>) -> Self {
        let groups = groups
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        Self {
            levels,
            groups,
            samples: Vec::new(),
            costs: Vec::new(),
        }
    }

    /// The MLMC pattern `{0}, {0,1}, ..., {L-2, L-1}`.
    pub fn mlmc(levels: usize) -> Self {
        let mut groups = vec![vec![0]];
        groups.extend((1..levels).map(|l| vec![l - 1, l]));
        Self::new(levels, groups)
    }

    /// One group coupling every level.
    pub fn single_group(levels: usize) -> Self {
        Self::new(levels, vec![(0..levels).collect()])
    }

    pub fn with_samples(mut self, samples: Vec<u64>) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_costs(mut self, costs: Vec<f64>) -> Self {
        self.costs = costs;
        self
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, k: usize) -> &[usize] {
        &self.groups[k]
    }

    pub fn group_size(&self, k: usize) -> usize {
        self.groups[k].len()
    }

    /// `p`, the sum of group sizes.
    pub fn total_size(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn samples(&self) -> &[u64] {
        &self.samples
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn has_samples(&self) -> bool {
        !self.samples.is_empty()
    }

    /// Position of `level` inside group `k`, if the group contains it.
    pub fn position(&self, k: usize, level: usize) -> Option<usize> {
        self.groups[k].binary_search(&level).ok()
    }

    /// Indicator of the groups containing the finest level.
    pub fn high_fidelity_indicator(&self) -> Vec<bool> {
        let top = self.levels.saturating_sub(1);
        self.groups.iter().map(|g| g.contains(&top)).collect()
    }

    /// True when the groups follow the MLMC pattern (see [`Self::mlmc`]).
    pub fn is_mlmc(&self) -> bool {
        self.groups == Self::mlmc(self.levels).groups
    }

    /// Stacked `(group, level)` pairs in group order.
    pub fn stacked_indices(&self) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(k, g)| g.iter().map(move |&l| (k, l)))
            .collect()
    }

    /// Lists every rule violated by this structure; empty when valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.levels == 0 {
            out.push(Violation::NoLevels);
        }
        if self.groups.is_empty() {
            out.push(Violation::NoGroups);
        }
        let mut covered = vec![false; self.levels];
        let mut seen: HashMap<&[usize], usize> = HashMap::new();
        for (k, g) in self.groups.iter().enumerate() {
            if g.is_empty() {
                out.push(Violation::EmptyGroup { group: k });
            }
            for (i, &l) in g.iter().enumerate() {
                if l >= self.levels {
                    out.push(Violation::LevelOutOfRange { group: k, level: l });
                } else {
                    covered[l] = true;
                }
                if i > 0 && g[i - 1] == l {
                    out.push(Violation::RepeatedLevel { group: k, level: l });
                }
            }
            if let Some(&first) = seen.get(g.as_slice()) {
                out.push(Violation::DuplicateGroup {
                    group: k,
                    duplicate_of: first,
                });
            } else {
                seen.insert(g.as_slice(), k);
            }
        }
        for (level, c) in covered.iter().enumerate() {
            if !c {
                out.push(Violation::UncoveredLevel { level });
            }
        }
        let k = self.groups.len();
        if !self.samples.is_empty() && self.samples.len() != k {
            out.push(Violation::SampleCountLength {
                expected: k,
                actual: self.samples.len(),
            });
        }
        if !self.costs.is_empty() {
            if self.costs.len() != k {
                out.push(Violation::CostLength {
                    expected: k,
                    actual: self.costs.len(),
                });
            }
            for (g, &c) in self.costs.iter().enumerate() {
                if !(c > 0.0 && c.is_finite()) {
                    out.push(Violation::NonPositiveCost { group: g });
                }
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidStructure(v))
        }
    }

    /// Sample sizes, required to be present and consistent.
    pub fn require_samples(&self) -> Result<&[u64]> {
        check_len("sample sizes m", self.groups.len(), self.samples.len())?;
        Ok(&self.samples)
    }

    /// `R^(k) x`: the entries of a level vector at the levels of group `k`.
    pub fn restrict(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_group(k)?;
        check_len("level vector", self.levels, x.len())?;
        Ok(self.groups[k].iter().map(|&l| x[l]).collect())
    }

    /// `P^(k) y`: scatters a group vector back into level space, zero
    /// elsewhere.
    pub fn extend(&self, y: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_group(k)?;
        check_len("group vector", self.groups[k].len(), y.len())?;
        let mut x = vec![0.0; self.levels];
        for (&l, &v) in self.groups[k].iter().zip(y) {
            x[l] += v;
        }
        Ok(x)
    }

    /// Dense `R^(k)`, of shape `p^(k) x L`.
    pub fn selection_matrix(&self, k: usize) -> DMatrix<f64> {
        let g = &self.groups[k];
        let mut r = DMatrix::zeros(g.len(), self.levels);
        for (i, &l) in g.iter().enumerate() {
            r[(i, l)] = 1.0;
        }
        r
    }

    /// `P^(k) M R^(k)` added into an `L x L` accumulator.
    pub(crate) fn scatter_add(&self, k: usize, m: &DMatrix<f64>, acc: &mut DMatrix<f64>) {
        let g = &self.groups[k];
        for (i, &li) in g.iter().enumerate() {
            for (j, &lj) in g.iter().enumerate() {
                acc[(li, lj)] += m[(i, j)];
            }
        }
    }

    pub(crate) fn gather(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.groups[k].len(), self.groups[k].iter().map(|&l| x[l]))
    }

    /// Sub-matrix of an `L x L` level matrix on the levels of group `k`.
    pub fn restrict_matrix(&self, k: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
        let g = &self.groups[k];
        DMatrix::from_fn(g.len(), g.len(), |i, j| m[(g[i], g[j])])
    }

    fn check_group(&self, k: usize) -> Result<()> {
        if k < self.groups.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "group index {} out of range 1..={}",
                k + 1,
                self.groups.len()
            )))
        }
    }
}

/// Text-document form of a [`CouplingStructure`] (1-based levels).
///
/// ```toml
/// L = 3
/// groups = [[1], [1, 2], [2, 3]]
/// m = [40, 20, 10]
/// costs = [1.0, 3.0, 9.0]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureDoc {
    #[serde(rename = "L")]
    pub levels: usize,
    pub groups: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<Vec<f64>>,
}

impl StructureDoc {
    /// Converts to a structure, reporting every violation (including level
    /// index 0, which is out of range in the 1-based format).
    pub fn into_structure(self) -> Result<CouplingStructure> {
        let mut bad = Vec::new();
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(k, g)| {
                g.iter()
                    .map(|&l| {
                        if l == 0 {
                            bad.push(Violation::LevelOutOfRange {
                                group: k,
                                level: usize::MAX,
                            });
                        }
                        l.wrapping_sub(1)
                    })
                    .collect()
            })
            .collect();
        let s = CouplingStructure::new(self.levels, groups)
            .with_samples(self.m.unwrap_or_default())
            .with_costs(self.costs.unwrap_or_default());
        let mut v = s.validate();
        if !bad.is_empty() {
            v.retain(|x| !matches!(x, Violation::LevelOutOfRange { .. }));
            bad.extend(v);
            v = bad;
        }
        if v.is_empty() {
            Ok(s)
        } else {
            Err(Error::InvalidStructure(v))
        }
    }
}

impl From<&CouplingStructure> for StructureDoc {
    fn from(s: &CouplingStructure) -> Self {
        StructureDoc {
            levels: s.levels,
            groups: s
                .groups
                .iter()
                .map(|g| g.iter().map(|l| l + 1).collect())
                .collect(),
            m: (!s.samples.is_empty()).then(|| s.samples.clone()),
            costs: (!s.costs.is_empty()).then(|| s.costs.clone()),
        }
    }
}
