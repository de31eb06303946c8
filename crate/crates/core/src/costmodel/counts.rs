use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut};

use serde::Serialize;

/// Operation categories tallied by the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    FloatMul,
    FloatAdd,
    FloatDiv,
    /// tanh, sqrt, exp and friends.
    SpecialFn,
    Compare,
    IntAddShift,
    MemReadWords,
    MemWriteWords,
}

impl OpKind {
    pub const ALL: [OpKind; 8] = [
        OpKind::FloatMul,
        OpKind::FloatAdd,
        OpKind::FloatDiv,
        OpKind::SpecialFn,
        OpKind::Compare,
        OpKind::IntAddShift,
        OpKind::MemReadWords,
        OpKind::MemWriteWords,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::FloatMul => "float_mul",
            OpKind::FloatAdd => "float_add",
            OpKind::FloatDiv => "float_div",
            OpKind::SpecialFn => "special_fn",
            OpKind::Compare => "compare",
            OpKind::IntAddShift => "int_add_shift",
            OpKind::MemReadWords => "mem_read_words",
            OpKind::MemWriteWords => "mem_write_words",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-kind operation tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    tallies: [u64; 8],
}

impl OpCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, kind: OpKind, count: u64) -> Self {
        self[kind] += count;
        self
    }

    pub fn add(&mut self, kind: OpKind, count: u64) {
        self[kind] += count;
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self[kind]
    }

    pub fn is_zero(&self) -> bool {
        self.tallies.iter().all(|&t| t == 0)
    }

    /// Every tally multiplied by `factor` (e.g. per-row counts times rows).
    pub fn times(&self, factor: u64) -> Self {
        let mut out = *self;
        out.tallies.iter_mut().for_each(|t| *t *= factor);
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, u64)> + '_ {
        OpKind::ALL.into_iter().map(|k| (k, self[k]))
    }
}

impl Index<OpKind> for OpCounts {
    type Output = u64;

    fn index(&self, kind: OpKind) -> &u64 {
        &self.tallies[kind.slot()]
    }
}

impl IndexMut<OpKind> for OpCounts {
    fn index_mut(&mut self, kind: OpKind) -> &mut u64 {
        &mut self.tallies[kind.slot()]
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        for (a, b) in self.tallies.iter_mut().zip(rhs.tallies) {
            *a += b;
        }
    }
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::iter::Sum for OpCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(OpCounts::default(), Add::add)
    }
}

impl Serialize for OpCounts {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(OpKind::ALL.len()))?;
        for (kind, count) in self.iter() {
            map.serialize_entry(kind.name(), &count)?;
        }
        map.end()
    }
}

impl fmt::Display for OpCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (kind, count) in self.iter().filter(|&(_, c)| c > 0) {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{kind}={count}")?;
            first = false;
        }
        if first {
            f.write_str("(none)")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for kind in OpKind::ALL {
            assert_eq!(OpKind::parse(kind.name()), Some(kind));
        }
        assert_eq!(OpKind::parse("flops"), None);
    }

    #[test]
    fn counts_add_and_scale() {
        let a = OpCounts::new()
            .with(OpKind::FloatMul, 3)
            .with(OpKind::Compare, 1);
        let b = OpCounts::new().with(OpKind::FloatMul, 2);
        let s = a + b;
        assert_eq!(s[OpKind::FloatMul], 5);
        assert_eq!(s.times(2)[OpKind::Compare], 2);
        assert_eq!([a, b].into_iter().sum::<OpCounts>(), s);
        assert_eq!(s.to_string(), "float_mul=5 compare=1");
    }
}
