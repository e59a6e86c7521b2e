//! Coupled sample ensembles indexed by (group, member, level, element).

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::structure::CouplingStructure;

/// Samples of one coupling group: `members` coupled draws, each holding one
/// vector per level of the group.
///
/// Storage is member-major: the values of member `i` are contiguous, with
/// the levels of the group laid out one after the other.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSamples {
    levels: Vec<usize>,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    stride: usize,
    members: usize,
    data: Vec<f64>,
}

impl GroupSamples {
    /// Zero-filled storage for `members` draws of `levels` with element
    /// counts `sizes`.
    pub fn zeros(levels: Vec<usize>, sizes: Vec<usize>, members: usize) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut stride = 0;
        for &n in &sizes {
            offsets.push(stride);
            stride += n;
        }
        Self {
            levels,
            sizes,
            offsets,
            stride,
            members,
            data: vec![0.0; stride * members],
        }
    }

    pub fn from_data(
        levels: Vec<usize>,
        sizes: Vec<usize>,
        members: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let mut g = Self::zeros(levels, sizes, 0);
        check_len("group sample data", g.stride * members, data.len())?;
        g.members = members;
        g.data = data;
        Ok(g)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Values of one member, all levels concatenated.
    pub fn member(&self, i: usize) -> &[f64] {
        &self.data[i * self.stride..(i + 1) * self.stride]
    }

    pub fn member_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride;
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Splits the storage into per-member chunks, for parallel filling.
    pub fn members_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.data.chunks_exact_mut(self.stride.max(1))
    }

    /// Vector of level at position `pos` (within the group) of member `i`.
    pub fn value(&self, i: usize, pos: usize) -> &[f64] {
        let start = i * self.stride + self.offsets[pos];
        &self.data[start..start + self.sizes[pos]]
    }

    /// Column of scalar samples for (level position, element).
    pub fn column(&self, pos: usize, element: usize) -> Vec<f64> {
        let off = self.offsets[pos] + element;
        (0..self.members)
            .map(|i| self.data[i * self.stride + off])
            .collect()
    }

    pub fn position(&self, level: usize) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    /// Per-level Monte Carlo mean vectors, summing members in order.
    pub fn level_means(&self) -> Vec<Vec<f64>> {
        (0..self.levels.len())
            .map(|pos| {
                let mut acc = vec![0.0; self.sizes[pos]];
                for i in 0..self.members {
                    for (a, v) in acc.iter_mut().zip(self.value(i, pos)) {
                        *a += v;
                    }
                }
                let inv = 1.0 / self.members as f64;
                acc.iter_mut().for_each(|a| *a *= inv);
                acc
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    /// Whether groups were drawn from independent inputs.
    #[serde(default)]
    pub independent_groups: bool,
}

/// Samples of every group of a coupling structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub level_sizes: Vec<usize>,
    pub groups: Vec<GroupSamples>,
    pub metadata: EnsembleMetadata,
}

impl Ensemble {
    /// Checks member counts and level layout against `structure`.
    pub fn check(&self, structure: &CouplingStructure) -> Result<()> {
        check_len("ensemble groups", structure.num_groups(), self.groups.len())?;
        check_len("level sizes", structure.levels(), self.level_sizes.len())?;
        for (k, g) in self.groups.iter().enumerate() {
            if g.levels() != structure.group(k) {
                return Err(Error::InvalidArgument(format!(
                    "ensemble group {} does not hold the levels of the structure",
                    k + 1
                )));
            }
            for (&l, &n) in g.levels().iter().zip(g.sizes()) {
                check_len("level element count", self.level_sizes[l], n)?;
            }
            if structure.has_samples() {
                check_len("group member count", structure.samples()[k] as usize, g.members())?;
            }
        }
        Ok(())
    }

    /// Scalar Monte Carlo means per group and level (element 0 only).
    pub fn scalar_means(&self) -> Vec<Vec<f64>> {
        self.groups
            .iter()
            .map(|g| g.level_means().into_iter().map(|v| v[0]).collect())
            .collect()
    }

    /// Mean vectors per group and level.
    pub fn vector_means(&self) -> Vec<Vec<Vec<f64>>> {
        self.groups.iter().map(GroupSamples::level_means).collect()
    }

    /// Reads a small ensemble from CSV with header
    /// `group,member,level,element,value` (all indices 1-based).
    pub fn from_csv<R: Read>(structure: &CouplingStructure, reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            group: usize,
            member: usize,
            level: usize,
            element: usize,
            value: f64,
        }
        let mut rows = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize::<Row>() {
            let row = row?;
            if row.group == 0 || row.member == 0 || row.level == 0 || row.element == 0 {
                return Err(Error::Format("CSV indices are 1-based".into()));
            }
            rows.push(row);
        }
        let mut level_sizes = vec![0usize; structure.levels()];
        let mut members = vec![0usize; structure.num_groups()];
        for r in &rows {
            let (k, l) = (r.group - 1, r.level - 1);
            if k >= structure.num_groups() || structure.position(k, l).is_none() {
                return Err(Error::Format(format!(
                    "row references level {} outside group {}",
                    r.level, r.group
                )));
            }
            level_sizes[l] = level_sizes[l].max(r.element);
            members[k] = members[k].max(r.member);
        }
        if let Some(l) = level_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Format(format!("no CSV entries for level {}", l + 1)));
        }
        let mut groups: Vec<GroupSamples> = (0..structure.num_groups())
            .map(|k| {
                let lv = structure.group(k).to_vec();
                let sz = lv.iter().map(|&l| level_sizes[l]).collect();
                GroupSamples::zeros(lv, sz, members[k])
            })
            .collect();
        let mut seen: Vec<Vec<bool>> = groups.iter().map(|g| vec![false; g.data.len()]).collect();
        for r in &rows {
            let k = r.group - 1;
            let g = &mut groups[k];
            let pos = structure.position(k, r.level - 1).unwrap_or(0);
            let idx = (r.member - 1) * g.stride + g.offsets[pos] + r.element - 1;
            if seen[k][idx] {
                return Err(Error::Format(format!(
                    "duplicate CSV entry for group {}, member {}, level {}, element {}",
                    r.group, r.member, r.level, r.element
                )));
            }
            seen[k][idx] = true;
            g.data[idx] = r.value;
        }
        if let Some(k) = seen.iter().position(|s| s.iter().any(|x| !x)) {
            return Err(Error::Format(format!("missing CSV entries in group {}", k + 1)));
        }
        let e = Ensemble {
            level_sizes,
            groups,
            metadata: EnsembleMetadata::default(),
        };
        e.check(&CouplingStructure::new(structure.levels(), structure.groups().to_vec()))?;
        Ok(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_means() {
        let mut g = GroupSamples::zeros(vec![0, 1], vec![1, 2], 2);
        g.member_mut(0).copy_from_slice(&[1.0, 2.0, 3.0]);
        g.member_mut(1).copy_from_slice(&[3.0, 4.0, 5.0]);
        assert_eq!(g.value(1, 1), &[4.0, 5.0]);
        assert_eq!(g.column(1, 1), vec![3.0, 5.0]);
        assert_eq!(g.level_means(), vec![vec![2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn csv_import() {
        let s = CouplingStructure::mlmc(2);
        let text = "group,member,level,element,value\n\
                    1,1,1,1,0.5\n1,2,1,1,1.5\n\
                    2,1,1,1,1.0\n2,1,2,1,2.0\n";
        let e = Ensemble::from_csv(&s, text.as_bytes()).unwrap();
        assert_eq!(e.groups[0].members(), 2);
        assert_eq!(e.scalar_means(), vec![vec![1.0], vec![1.0, 2.0]]);
        let bad = "group,member,level,element,value\n1,1,2,1,0.5\n";
        assert!(Ensemble::from_csv(&s, bad.as_bytes()).is_err());
        let missing = "group,member,level,element,value\n1,1,1,1,0.5\n2,1,1,1,1.0\n";
        assert!(Ensemble::from_csv(&s, missing.as_bytes()).is_err());
    }
}
