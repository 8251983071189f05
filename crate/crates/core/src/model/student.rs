use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreReport;
use crate::sparsify::rank_mask;
use crate::tensor::Tensor;
use crate::units::{MaskKind, SparsityMask, UnitKind};

use super::ModelParams;

/// How a student is carved out of a trained teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum StudentInit {
    /// Keep `k` evenly spaced teacher layers.
    DropLayers { k: usize },
    /// Remove the fraction `s` of heads and of neurons with the lowest
    /// expressiveness, then compact.
    PruneParams { s: f64 },
}

impl Default for StudentInit {
    fn default() -> Self {
        StudentInit::DropLayers { k: 2 }
    }
}

impl StudentInit {
    pub fn validate(&self, teacher_layers: usize) -> Result<()> {
        match *self {
            StudentInit::DropLayers { k } if k == 0 || k >= teacher_layers => Err(Error::Parameter(
                format!("drop-layers keeps k in 1..{teacher_layers}, got {k}"),
            )),
            StudentInit::PruneParams { s } if !(s > 0.0 && s < 1.0) => Err(Error::Parameter(
                format!("prune-params needs 0 < s < 1, got {s}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Teacher layers kept when dropping to `k` of `n`: `⌈j·n/k⌉ − 1` for
/// `j = 1..=k` (zero-based).
pub fn drop_layer_indices(n: usize, k: usize) -> Result<Vec<usize>> {
    StudentInit::DropLayers { k }.validate(n)?;
    Ok((1..=k).map(|j| (j * n).div_ceil(k) - 1).collect())
}

/// Builds a student from `teacher`. The prune-params strategy needs the
/// teacher's expressiveness scores (a report whose knowledgeable score is
/// the normalized expressiveness).
pub fn init_student(
    teacher: &ModelParams,
    strategy: StudentInit,
    expressiveness: Option<&ScoreReport>,
) -> Result<ModelParams> {
    strategy.validate(teacher.num_layers())?;
    match strategy {
        StudentInit::DropLayers { k } => {
            let keep = drop_layer_indices(teacher.num_layers(), k)?;
            let mut student = teacher.clone();
            student.layers = keep.iter().map(|&i| teacher.layers[i].clone()).collect();
            student.config.layers = k;
            Ok(student)
        }
        StudentInit::PruneParams { s } => {
            let report = expressiveness.ok_or_else(|| {
                Error::Contract("prune-params initialization needs expressiveness scores".into())
            })?;
            let mask = rank_mask(report, s)?;
            compact(teacher, &mask)
        }
    }
}

/// Physically removes masked heads and neurons. The result computes the same
/// function as the teacher with the corresponding gates set to zero.
pub fn compact(params: &ModelParams, mask: &SparsityMask) -> Result<ModelParams> {
    if mask.kind != MaskKind::Structured {
        return Err(Error::Mask("compaction needs a structured mask".into()));
    }
    for u in &mask.removed {
        let ok = match u.kind {
            UnitKind::Head => params
                .layers
                .get(u.layer)
                .is_some_and(|l| u.index < l.heads.len()),
            UnitKind::Neuron => params
                .layers
                .get(u.layer)
                .is_some_and(|l| u.index < l.ffn_width()),
            UnitKind::Parameter => false,
        };
        if !ok {
            return Err(Error::Mask(format!("mask refers to unknown unit {u}")));
        }
    }
    let mut out = params.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let heads = std::mem::take(&mut layer.heads);
        layer.heads = heads
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !mask.contains(&crate::units::UnitId::head(l, *i)))
            .map(|(_, h)| h)
            .collect();
        let keep: Vec<usize> = (0..layer.ffn_width())
            .filter(|&j| !mask.contains(&crate::units::UnitId::neuron(l, j)))
            .collect();
        if keep.len() != layer.ffn_width() {
            layer.w1 = layer.w1.select_columns(&keep)?;
            layer.w2 = layer.w2.select_rows(&keep)?;
        }
    }
    Ok(out)
}

/// Weight matrices eligible for unstructured pruning, as
/// `(layer, name within layer, tensor)`.
pub fn prunable_tensors(params: &ModelParams) -> Vec<(usize, String, &Tensor)> {
    let mut out = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            out.push((l, format!("heads.{h}.wq"), &head.wq));
            out.push((l, format!("heads.{h}.wk"), &head.wk));
            out.push((l, format!("heads.{h}.wv"), &head.wv));
            out.push((l, format!("heads.{h}.wo"), &head.wo));
        }
        out.push((l, "w1".to_string(), &layer.w1));
        out.push((l, "w2".to_string(), &layer.w2));
    }
    out
}

fn prunable_mut<'a>(params: &'a mut ModelParams, layer: usize, name: &str) -> Option<&'a mut Tensor> {
    let l = params.layers.get_mut(layer)?;
    match name {
        "w1" => Some(&mut l.w1),
        "w2" => Some(&mut l.w2),
        _ => {
            let rest = name.strip_prefix("heads.")?;
            let (h, which) = rest.split_once('.')?;
            let head = l.heads.get_mut(h.parse::<usize>().ok()?)?;
            match which {
                "wq" => Some(&mut head.wq),
                "wk" => Some(&mut head.wk),
                "wv" => Some(&mut head.wv),
                "wo" => Some(&mut head.wo),
                _ => None,
            }
        }
    }
}

/// Zeroes every scalar weight listed in an unstructured mask.
pub fn apply_unstructured(params: &ModelParams, mask: &SparsityMask) -> Result<ModelParams> {
    if mask.kind != MaskKind::Unstructured {
        return Err(Error::Mask("expected an unstructured mask".into()));
    }
    let mut out = params.clone();
    for u in &mask.removed {
        let name = u
            .tensor
            .as_deref()
            .filter(|_| u.kind == UnitKind::Parameter)
            .ok_or_else(|| Error::Mask(format!("{u} is not a parameter unit")))?;
        let t = prunable_mut(&mut out, u.layer, name)
            .ok_or_else(|| Error::Mask(format!("mask refers to unknown tensor {u}")))?;
        if u.index >= t.numel() {
            return Err(Error::Mask(format!("offset out of range for {u}")));
        }
        t.data_mut()[u.index] = 0.0;
    }
    Ok(out)
}
