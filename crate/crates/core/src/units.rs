//! Identifiers for the prunable units of an encoder and masks over them.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Head,
    Neuron,
    Parameter,
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnitKind::Head => "head",
            UnitKind::Neuron => "neuron",
            UnitKind::Parameter => "parameter",
        })
    }
}

/// A head, an FFN neuron, or a single scalar weight.
///
/// For parameters, `tensor` names the weight matrix inside the layer
/// (`"heads.2.wq"`, `"w1"`, ...) and `index` is the flat row-major offset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub kind: UnitKind,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<String>,
}

impl UnitId {
    pub fn head(layer: usize, index: usize) -> Self {
        Self {
            layer,
            kind: UnitKind::Head,
            index,
            tensor: None,
        }
    }

    pub fn neuron(layer: usize, index: usize) -> Self {
        Self {
            layer,
            kind: UnitKind::Neuron,
            index,
            tensor: None,
        }
    }

    pub fn parameter(layer: usize, tensor: impl Into<String>, index: usize) -> Self {
        Self {
            layer,
            kind: UnitKind::Parameter,
            index,
            tensor: Some(tensor.into()),
        }
    }
}

/// Kind, then layer, then tensor name, then index: the tie-break order used
/// when ranking units.
impl Ord for UnitId {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.kind, self.layer, &self.tensor, self.index).cmp(&(
            other.kind,
            other.layer,
            &other.tensor,
            other.index,
        ))
    }
}

impl PartialOrd for UnitId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.tensor {
            Some(t) => write!(f, "L{}.{}[{}]", self.layer, t, self.index),
            None => write!(f, "L{}.{}{}", self.layer, self.kind, self.index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Structured,
    Unstructured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Ranked { lambda: f64 },
    Random { seed: u64 },
    Auto { lambda: f64 },
    Manual,
}

/// The set of units removed from a model at one sparsity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityMask {
    pub kind: MaskKind,
    pub sparsity: f64,
    pub provenance: Provenance,
    pub removed: BTreeSet<UnitId>,
}

impl SparsityMask {
    pub fn empty(kind: MaskKind) -> Self {
        Self {
            kind,
            sparsity: 0.0,
            provenance: Provenance::Manual,
            removed: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.removed.is_empty()
    }

    pub fn contains(&self, unit: &UnitId) -> bool {
        self.removed.contains(unit)
    }

    pub fn count(&self, kind: UnitKind) -> usize {
        self.removed.iter().filter(|u| u.kind == kind).count()
    }

    pub fn is_subset(&self, other: &SparsityMask) -> bool {
        self.removed.is_subset(&other.removed)
    }
}

/// Number of units removed out of `n` at sparsity `s`: `round(s·n)`.
pub fn removal_count(s: f64, n: usize) -> usize {
    ((s * n as f64).round() as usize).min(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_break_order() {
        let mut v = vec![
            UnitId::neuron(0, 0),
            UnitId::head(1, 0),
            UnitId::head(0, 3),
            UnitId::head(0, 1),
        ];
        v.sort();
        assert_eq!(
            v,
            vec![
                UnitId::head(0, 1),
                UnitId::head(0, 3),
                UnitId::head(1, 0),
                UnitId::neuron(0, 0)
            ]
        );
    }

    #[test]
    fn counts() {
        assert_eq!(removal_count(0.5, 12), 6);
        assert_eq!(removal_count(0.25, 8), 2);
        assert_eq!(removal_count(0.3, 10), 3);
        assert_eq!(removal_count(0.0, 10), 0);
    }

    #[test]
    fn mask_json_shape() {
        let mut m = SparsityMask::empty(MaskKind::Structured);
        m.removed.insert(UnitId::head(2, 1));
        let s = serde_json::to_string(&m.removed).unwrap();
        assert_eq!(s, r#"[{"layer":2,"kind":"head","index":1}]"#);
    }
}
