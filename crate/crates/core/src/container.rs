//! Binary container for ensembles and weight sets.
//!
//! Layout: the 8-byte magic `MLBLUEC1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the payload of every array in header order as
//! little-endian `f64` values (row-major for matrices).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ensemble::{Ensemble, EnsembleMetadata, GroupSamples};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MLBLUEC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub version: u32,
    pub arrays: Vec<ArraySpec>,
    #[serde(default)]
    pub metadata: Value,
}

/// A decoded container: header plus one flat buffer per array.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub data: Vec<Vec<f64>>,
}

impl Container {
    pub fn new(kind: &str, metadata: Value) -> Self {
        Self {
            header: Header {
                kind: kind.to_string(),
                version: VERSION,
                arrays: Vec::new(),
                metadata,
            },
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let spec = ArraySpec {
            name: name.into(),
            shape,
        };
        if spec.len() != values.len() {
            return Err(Error::Format(format!(
                "array {} has {} values for shape {:?}",
                spec.name,
                values.len(),
                spec.shape
            )));
        }
        self.header.arrays.push(spec);
        self.data.push(values);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&ArraySpec, &[f64])> {
        self.header
            .arrays
            .iter()
            .zip(&self.data)
            .find(|(s, _)| s.name == name)
            .map(|(s, d)| (s, d.as_slice()))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for d in &self.data {
            buf.clear();
            buf.reserve(d.len() * 8);
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::Format("header too large".into()));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {}",
                header.version
            )));
        }
        let mut data = Vec::with_capacity(header.arrays.len());
        for spec in &header.arrays {
            let mut bytes = vec![0u8; spec.len() * 8];
            r.read_exact(&mut bytes)?;
            data.push(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            );
        }
        Ok(Self { header, data })
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    level_sizes: Vec<usize>,
    groups: Vec<EnsembleGroupHeader>,
    #[serde(flatten)]
    info: EnsembleMetadata,
}

#[derive(Serialize, Deserialize)]
struct EnsembleGroupHeader {
    /// 1-based levels.
    levels: Vec<usize>,
    members: usize,
}

impl Ensemble {
    pub fn to_container(&self) -> Result<Container> {
        let meta = EnsembleHeader {
            level_sizes: self.level_sizes.clone(),
            groups: self
                .groups
                .iter()
                .map(|g| EnsembleGroupHeader {
                    levels: g.levels().iter().map(|l| l + 1).collect(),
                    members: g.members(),
                })
                .collect(),
            info: self.metadata.clone(),
        };
        let mut c = Container::new("ensemble", serde_json::to_value(meta)?);
        for (k, g) in self.groups.iter().enumerate() {
            let width: usize = g.sizes().iter().sum();
            c.push(format!("group{}", k + 1), vec![g.members(), width], g.data().to_vec())?;
        }
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.header.kind != "ensemble" {
            return Err(Error::Format(format!("expected an ensemble, found {}", c.header.kind)));
        }
        let meta: EnsembleHeader = serde_json::from_value(c.header.metadata)?;
        if meta.groups.len() != c.data.len() {
            return Err(Error::Format("group count does not match payload".into()));
        }
        let mut groups = Vec::with_capacity(meta.groups.len());
        for (gh, data) in meta.groups.into_iter().zip(c.data) {
            let levels: Vec<usize> = gh
                .levels
                .iter()
                .map(|&l| {
                    l.checked_sub(1)
                        .filter(|&l| l < meta.level_sizes.len())
                        .ok_or_else(|| Error::Format(format!("level {l} out of range")))
                })
                .collect::<Result<_>>()?;
            let sizes = levels.iter().map(|&l| meta.level_sizes[l]).collect();
            groups.push(GroupSamples::from_data(levels, sizes, gh.members, data)?);
        }
        Ok(Ensemble {
            level_sizes: meta.level_sizes,
            groups,
            metadata: meta.info,
        })
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        self.to_container()?.write(w)
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        Self::from_container(Container::read(r)?)
    }
}
