//! Per-tensor lattice entries: the S-map (`ShapeInfo`) and V-map
//! (`ValueInfo`) cells of the analysis.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sym::{ArithOp, DimValue, SymError};

/// Rank and dimensions of one tensor.
///
/// `Undef` is top (nothing known yet), `Nac` is bottom (rank unknowable).
/// `Ranked` with individual dims ranging over the `DimValue` lattice sits in
/// between; ranked entries of different rank meet to `Nac`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ShapeInfo {
    Undef,
    Ranked(Vec<DimValue>),
    Nac,
}

/// Element-wise values of a small integer tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ValueInfo {
    Undef,
    Tracked(Vec<DimValue>),
    Nac,
}

// Both serialise as "undef", "nac", or a list of rendered dims.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CellRepr {
    Tag(String),
    List(Vec<DimValue>),
}

fn cell_from_repr<E: serde::de::Error>(r: CellRepr) -> Result<(u8, Vec<DimValue>), E> {
    match r {
        CellRepr::Tag(t) if t == "undef" => Ok((0, Vec::new())),
        CellRepr::Tag(t) if t == "nac" => Ok((2, Vec::new())),
        CellRepr::Tag(t) => Err(E::custom(format!("unexpected tag `{t}`"))),
        CellRepr::List(v) => Ok((1, v)),
    }
}

impl Serialize for ShapeInfo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ShapeInfo::Undef => s.serialize_str("undef"),
            ShapeInfo::Nac => s.serialize_str("nac"),
            ShapeInfo::Ranked(d) => d.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ShapeInfo {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match cell_from_repr(CellRepr::deserialize(d)?)? {
            (0, _) => ShapeInfo::Undef,
            (2, _) => ShapeInfo::Nac,
            (_, v) => ShapeInfo::Ranked(v),
        })
    }
}

impl Serialize for ValueInfo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ValueInfo::Undef => s.serialize_str("undef"),
            ValueInfo::Nac => s.serialize_str("nac"),
            ValueInfo::Tracked(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ValueInfo {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match cell_from_repr(CellRepr::deserialize(d)?)? {
            (0, _) => ValueInfo::Undef,
            (2, _) => ValueInfo::Nac,
            (_, v) => ValueInfo::Tracked(v),
        })
    }
}

fn meet_vec(a: &[DimValue], b: &[DimValue]) -> Option<Vec<DimValue>> {
    if a.len() != b.len() {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x.meet(y)).collect())
}

impl ShapeInfo {
    pub fn known<I: IntoIterator<Item = i64>>(dims: I) -> Self {
        ShapeInfo::Ranked(dims.into_iter().map(DimValue::Known).collect())
    }

    pub fn scalar() -> Self {
        ShapeInfo::Ranked(Vec::new())
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            ShapeInfo::Ranked(d) => Some(d.len()),
            _ => None,
        }
    }

    pub fn dims(&self) -> Option<&[DimValue]> {
        match self {
            ShapeInfo::Ranked(d) => Some(d),
            _ => None,
        }
    }

    /// Top, or ranked with at least one `Undef` dim.
    pub fn has_undef(&self) -> bool {
        match self {
            ShapeInfo::Undef => true,
            ShapeInfo::Ranked(d) => d.iter().any(DimValue::is_undef),
            ShapeInfo::Nac => false,
        }
    }

    pub fn has_nac(&self) -> bool {
        match self {
            ShapeInfo::Nac => true,
            ShapeInfo::Ranked(d) => d.iter().any(DimValue::is_nac),
            ShapeInfo::Undef => false,
        }
    }

    /// Every dim is `Known` or `Sym`.
    pub fn is_resolved(&self) -> bool {
        matches!(self, ShapeInfo::Ranked(d) if d.iter().all(DimValue::is_resolved))
    }

    pub fn as_known(&self) -> Option<Vec<i64>> {
        self.dims()?.iter().map(DimValue::as_known).collect()
    }

    /// Product of dims (`Known(1)` for scalars).
    pub fn numel(&self) -> Result<DimValue, SymError> {
        match self {
            ShapeInfo::Undef => Ok(DimValue::Undef),
            ShapeInfo::Nac => Ok(DimValue::Nac),
            ShapeInfo::Ranked(d) => d
                .iter()
                .try_fold(DimValue::Known(1), |acc, x| DimValue::apply(ArithOp::Mul, &acc, x)),
        }
    }

    pub fn meet(&self, other: &Self) -> Self {
        match (self, other) {
            (ShapeInfo::Undef, x) | (x, ShapeInfo::Undef) => x.clone(),
            (ShapeInfo::Nac, _) | (_, ShapeInfo::Nac) => ShapeInfo::Nac,
            (ShapeInfo::Ranked(a), ShapeInfo::Ranked(b)) => {
                meet_vec(a, b).map_or(ShapeInfo::Nac, ShapeInfo::Ranked)
            }
        }
    }

    /// Lattice order: `self <= other`.
    pub fn le(&self, other: &Self) -> bool {
        self.meet(other) == *self
    }

    /// Fill only the `Undef` parts of `self` from `candidate`. Returns `None`
    /// when nothing changes.
    pub fn refine_undef(&self, candidate: &ShapeInfo) -> Option<ShapeInfo> {
        match (self, candidate) {
            (ShapeInfo::Undef, ShapeInfo::Undef) => None,
            (ShapeInfo::Undef, c) => Some(c.clone()),
            (ShapeInfo::Ranked(cur), ShapeInfo::Ranked(cand)) if cur.len() == cand.len() => {
                let mut changed = false;
                let dims = cur
                    .iter()
                    .zip(cand)
                    .map(|(c, n)| {
                        if c.is_undef() && !n.is_undef() {
                            changed = true;
                            n.clone()
                        } else {
                            c.clone()
                        }
                    })
                    .collect();
                changed.then_some(ShapeInfo::Ranked(dims))
            }
            _ => None,
        }
    }
}

impl ValueInfo {
    pub fn known<I: IntoIterator<Item = i64>>(vals: I) -> Self {
        ValueInfo::Tracked(vals.into_iter().map(DimValue::Known).collect())
    }

    pub fn elems(&self) -> Option<&[DimValue]> {
        match self {
            ValueInfo::Tracked(v) => Some(v),
            _ => None,
        }
    }

    pub fn meet(&self, other: &Self) -> Self {
        match (self, other) {
            (ValueInfo::Undef, x) | (x, ValueInfo::Undef) => x.clone(),
            (ValueInfo::Nac, _) | (_, ValueInfo::Nac) => ValueInfo::Nac,
            (ValueInfo::Tracked(a), ValueInfo::Tracked(b)) => {
                meet_vec(a, b).map_or(ValueInfo::Nac, ValueInfo::Tracked)
            }
        }
    }

    pub fn le(&self, other: &Self) -> bool {
        self.meet(other) == *self
    }
}

fn write_list(f: &mut fmt::Formatter<'_>, items: &[DimValue], open: &str, close: &str) -> fmt::Result {
    write!(f, "{open}")?;
    for (i, d) in items.iter().enumerate() {
        if i > 0 {
            write!(f, ",")?;
        }
        write!(f, "{d}")?;
    }
    write!(f, "{close}")
}

impl fmt::Display for ShapeInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeInfo::Undef => write!(f, "undef"),
            ShapeInfo::Nac => write!(f, "nac"),
            ShapeInfo::Ranked(d) => write_list(f, d, "[", "]"),
        }
    }
}

impl fmt::Display for ValueInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValueInfo::Undef => write!(f, "undef"),
            ValueInfo::Nac => write!(f, "nac"),
            ValueInfo::Tracked(v) => write_list(f, v, "<", ">"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_meet_and_order() {
        let a = ShapeInfo::Ranked(vec![DimValue::symbol("N"), DimValue::Known(64)]);
        let b = ShapeInfo::Ranked(vec![DimValue::symbol("N"), DimValue::Known(32)]);
        assert_eq!(
            a.meet(&b),
            ShapeInfo::Ranked(vec![DimValue::symbol("N"), DimValue::Nac])
        );
        assert_eq!(a.meet(&ShapeInfo::known([1])), ShapeInfo::Nac);
        assert!(ShapeInfo::Nac.le(&a));
        assert!(a.le(&ShapeInfo::Undef));
        assert!(!ShapeInfo::Undef.le(&a));
    }

    #[test]
    fn refine_only_fills_undef() {
        let cur = ShapeInfo::Ranked(vec![DimValue::Known(3), DimValue::Undef]);
        let cand = ShapeInfo::Ranked(vec![DimValue::Known(4), DimValue::Known(5)]);
        assert_eq!(cur.refine_undef(&cand), Some(ShapeInfo::known([3, 5])));
        assert_eq!(ShapeInfo::known([3]).refine_undef(&ShapeInfo::known([4])), None);
    }

    #[test]
    fn serde_forms() {
        let s = ShapeInfo::Ranked(vec![DimValue::symbol("N"), DimValue::Nac]);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"["N","nac"]"#);
        assert_eq!(serde_json::from_str::<ShapeInfo>(&j).unwrap(), s);
        assert_eq!(serde_json::to_string(&ShapeInfo::Undef).unwrap(), r#""undef""#);
        assert_eq!(serde_json::from_str::<ValueInfo>(r#""nac""#).unwrap(), ValueInfo::Nac);
    }

    #[test]
    fn numel_is_symbolic_product() {
        let s = ShapeInfo::Ranked(vec![DimValue::symbol("N"), DimValue::Known(12)]);
        assert_eq!(s.numel().unwrap().to_string(), "(12*N)");
        assert_eq!(ShapeInfo::scalar().numel().unwrap(), DimValue::Known(1));
    }
}
