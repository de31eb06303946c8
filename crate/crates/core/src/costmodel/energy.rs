use std::collections::BTreeMap;
use std::path::Path;

use super::{OpCounts, OpKind};
use crate::error::{Error, Result};

const DEFAULT_TABLE: &str = include_str!("../../configs/energy_default.txt");

/// Joules per operation, by kind. Kinds may be absent; estimating counts
/// that use an absent kind is an error.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyTable {
    joules: BTreeMap<OpKind, f64>,
}

impl Default for EnergyTable {
    /// The shipped table (`configs/energy_default.txt`).
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped energy table is valid")
    }
}

impl EnergyTable {
    pub fn new() -> Self {
        Self {
            joules: BTreeMap::new(),
        }
    }

    pub fn with(mut self, kind: OpKind, joules: f64) -> Self {
        self.joules.insert(kind, joules);
        self
    }

    pub fn get(&self, kind: OpKind) -> Option<f64> {
        self.joules.get(&kind).copied()
    }

    /// Parses `kind = joules` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |reason: String| Error::format("energy table", format!("line {}: {reason}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `kind = joules`, got `{line}`")))?;
            let key = key.trim();
            let kind =
                OpKind::parse(key).ok_or_else(|| bad(format!("unknown operation kind `{key}`")))?;
            let joules: f64 = value
                .trim()
                .parse()
                .map_err(|_| bad(format!("`{}` is not a number", value.trim())))?;
            if !(joules >= 0.0 && joules.is_finite()) {
                return Err(bad(format!(
                    "energy for `{key}` must be finite and non-negative"
                )));
            }
            if table.joules.insert(kind, joules).is_some() {
                return Err(bad(format!("`{key}` given twice")));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, f64)> + '_ {
        self.joules.iter().map(|(k, v)| (*k, *v))
    }
}

/// Energy in joules: the dot product of tallies and per-operation energies.
pub fn estimate_energy(counts: &OpCounts, table: &EnergyTable) -> Result<f64> {
    counts
        .iter()
        .filter(|&(_, n)| n > 0)
        .map(|(kind, n)| {
            table
                .get(kind)
                .map(|j| j * n as f64)
                .ok_or_else(|| Error::MissingEnergy(kind.name().to_string()))
        })
        .sum()
}
