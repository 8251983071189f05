//! Gradient-based sensitivity scores for heads, neurons and single weights.
//!
//! A unit's score is the expected absolute derivative of a loss with respect
//! to a gate fixed at 1: the first-order estimate of how much the loss moves
//! when the unit is removed. Expressiveness uses the teacher's task loss,
//! student-friendliness the distillation loss against a frozen trial student.
//! Both are ℓ2-normalized and blended as `I = λ·P̂ + (1−λ)·Q̂`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distill::{kd_loss, task_loss};
use crate::error::{Error, Result};
use crate::model::{bind_gates, bind_params, encoder_forward, forward, prunable_tensors, GateSet, ModelParams};
use crate::tape::{Tape, Var};
use crate::tasks::Example;
use crate::tensor::Tensor;
use crate::units::{UnitId, UnitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// The teacher's own task loss.
    Task,
    /// Distillation loss against a frozen student.
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    /// Units of one kind in one layer form a group.
    #[default]
    PerLayer,
    /// All units of one kind form a group.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub kind: UnitKind,
    pub layer: Option<usize>,
}

impl GroupKey {
    pub fn of(unit: &UnitId, grouping: Grouping) -> Self {
        Self {
            kind: unit.kind,
            layer: match grouping {
                Grouping::PerLayer => Some(unit.layer),
                Grouping::Global => None,
            },
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}s of layer {l}", self.kind),
            None => write!(f, "all {}s", self.kind),
        }
    }
}

/// Raw nonnegative scores of one loss kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScoreTable {
    pub loss: LossKind,
    pub batches: usize,
    pub data_digest: String,
    pub scores: BTreeMap<UnitId, f64>,
}

/// A loss over batches as a function of a flat vector of gates.
pub trait GateObjective {
    fn units(&self) -> &[UnitId];
    fn num_batches(&self) -> usize;
    /// Loss of batch `b` and its gradient with respect to each gate, in
    /// [`GateObjective::units`] order.
    fn loss_and_grad(&self, batch: usize, gates: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn loss(&self, batch: usize, gates: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(batch, gates)?.0)
    }
}

/// `mean_b |∂L_b/∂g|` at all gates equal to 1.
pub fn gate_scores(obj: &dyn GateObjective) -> Result<Vec<f64>> {
    let n = obj.units().len();
    let ones = vec![1.0; n];
    let mut acc = vec![0.0; n];
    let batches = obj.num_batches();
    if batches == 0 {
        return Err(Error::Input("no batches to score".into()));
    }
    for b in 0..batches {
        let (_, g) = obj.loss_and_grad(b, &ones)?;
        for (a, x) in acc.iter_mut().zip(&g) {
            *a += x.abs();
        }
    }
    Ok(acc.into_iter().map(|a| a / batches as f64).collect())
}

/// `mean_b |L_b(gates = 1) − L_b(gate u = 0)|`, computed from loss values
/// only.
pub fn gate_ablation(obj: &dyn GateObjective, unit: usize) -> Result<f64> {
    let n = obj.units().len();
    if unit >= n {
        return Err(Error::Contract(format!("unit {unit} out of {n}")));
    }
    let ones = vec![1.0; n];
    let mut off = ones.clone();
    off[unit] = 0.0;
    let batches = obj.num_batches();
    let mut acc = 0.0;
    for b in 0..batches {
        acc += (obj.loss(b, &ones)? - obj.loss(b, &off)?).abs();
    }
    Ok(acc / batches as f64)
}

/// A loss over batches as a function of a flat vector of weights.
pub trait WeightObjective {
    fn units(&self) -> &[UnitId];
    /// Current weight values in [`WeightObjective::units`] order.
    fn weights(&self) -> Vec<f64>;
    fn num_batches(&self) -> usize;
    /// Loss of batch `b` and its gradient with respect to each weight.
    fn loss_and_grad(&self, batch: usize) -> Result<(f64, Vec<f64>)>;
}

/// `mean_b |w · ∂L_b/∂w|`: the first-order loss change of zeroing `w`.
pub fn weight_scores(obj: &dyn WeightObjective) -> Result<Vec<f64>> {
    let w = obj.weights();
    let mut acc = vec![0.0; w.len()];
    let batches = obj.num_batches();
    if batches == 0 {
        return Err(Error::Input("no batches to score".into()));
    }
    for b in 0..batches {
        let (_, g) = obj.loss_and_grad(b)?;
        for ((a, x), wi) in acc.iter_mut().zip(&g).zip(&w) {
            *a += (wi * x).abs();
        }
    }
    Ok(acc.into_iter().map(|a| a / batches as f64).collect())
}

/// Everything the encoder objectives need: the teacher, the frozen trial
/// student (for distillation scores), the scoring data and its batching.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub teacher: &'a ModelParams,
    pub student: Option<&'a ModelParams>,
    pub data: &'a [Example],
    pub batch_size: usize,
    pub tau: f64,
}

impl<'a> ScoreContext<'a> {
    fn batches(&self) -> Result<Vec<&'a [Example]>> {
        if self.data.is_empty() {
            return Err(Error::Input("no scoring data".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        Ok(self.data.chunks(self.batch_size).collect())
    }

    fn student_logits(&self, kind: LossKind) -> Result<Option<Vec<Tensor>>> {
        match kind {
            LossKind::Task => Ok(None),
            LossKind::Distill => {
                let student = self.student.ok_or_else(|| {
                    Error::Contract("distillation scores need a frozen trial student".into())
                })?;
                if student.classes() != self.teacher.classes() {
                    return Err(Error::Contract("teacher and student class counts differ".into()));
                }
                crate::tensor::check_tau(self.tau)?;
                let z = self
                    .data
                    .iter()
                    .map(|e| {
                        let z = encoder_forward(&e.tokens, student, None)?;
                        z.reshape(&[1, z.numel()])
                    })
                    .collect::<Result<_>>()?;
                Ok(Some(z))
            }
        }
    }
}

/// SHA-256 over the token ids and labels of `data`.
pub fn data_digest(data: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in data {
        h.update((e.tokens.len() as u64).to_le_bytes());
        for &t in &e.tokens {
            h.update((t as u64).to_le_bytes());
        }
        h.update((e.label as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn example_loss(
    tape: &mut Tape,
    z: Var,
    ex: &Example,
    index: usize,
    student: Option<&[Tensor]>,
    tau: f64,
) -> Result<Var> {
    match student {
        None => task_loss(tape, z, ex.label),
        Some(zs) => {
            let s = tape.constant(zs[index].clone());
            kd_loss(tape, z, s, tau)
        }
    }
}

/// Every head and neuron of a model, in [`UnitId`] order.
pub fn structured_units(params: &ModelParams) -> Vec<UnitId> {
    let mut units = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        units.extend((0..layer.heads.len()).map(|i| UnitId::head(l, i)));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        units.extend((0..layer.ffn_width()).map(|j| UnitId::neuron(l, j)));
    }
    units
}

/// Gate values of `gates` in [`structured_units`] order.
pub fn flatten_gates(gates: &GateSet) -> Vec<f64> {
    gates.xi.iter().flatten().chain(gates.nu.iter().flatten()).copied().collect()
}

/// Inverse of [`flatten_gates`] for the layout of `params`.
pub fn unflatten_gates(params: &ModelParams, flat: &[f64]) -> Result<GateSet> {
    let mut g = GateSet::ones(params);
    let expected = g.xi.iter().chain(&g.nu).map(Vec::len).sum::<usize>();
    if flat.len() != expected {
        return Err(Error::Contract(format!("{} gate values for {expected} gates", flat.len())));
    }
    let mut it = flat.iter().copied();
    for v in g.xi.iter_mut().chain(g.nu.iter_mut()).flatten() {
        *v = it.next().unwrap_or(1.0);
    }
    Ok(g)
}

/// Task or distillation loss of a gated teacher, as a function of its gates.
pub struct EncoderGateObjective<'a> {
    ctx: ScoreContext<'a>,
    batches: Vec<&'a [Example]>,
    offsets: Vec<usize>,
    student: Option<Vec<Tensor>>,
    units: Vec<UnitId>,
}

impl<'a> EncoderGateObjective<'a> {
    pub fn new(ctx: ScoreContext<'a>, kind: LossKind) -> Result<Self> {
        let batches = ctx.batches()?;
        let offsets = batches
            .iter()
            .scan(0, |acc, b| {
                let start = *acc;
                *acc += b.len();
                Some(start)
            })
            .collect();
        Ok(Self {
            student: ctx.student_logits(kind)?,
            units: structured_units(ctx.teacher),
            ctx,
            batches,
            offsets,
        })
    }
}

impl GateObjective for EncoderGateObjective<'_> {
    fn units(&self) -> &[UnitId] {
        &self.units
    }

    fn num_batches(&self) -> usize {
        self.batches.len()
    }

    fn loss_and_grad(&self, batch: usize, gates: &[f64]) -> Result<(f64, Vec<f64>)> {
        let teacher = self.ctx.teacher;
        let gate_set = unflatten_gates(teacher, gates)?;
        let examples = self.batches[batch];
        let mut loss = 0.0;
        let mut grad = vec![0.0; gates.len()];
        for (k, ex) in examples.iter().enumerate() {
            let mut tape = Tape::new();
            let p = bind_params(&mut tape, teacher, false);
            let g = bind_gates(&mut tape, &gate_set, teacher, true)?;
            let z = forward(&mut tape, &p, Some(&g), &ex.tokens)?;
            let l = example_loss(
                &mut tape,
                z,
                ex,
                self.offsets[batch] + k,
                self.student.as_deref(),
                self.ctx.tau,
            )?;
            loss += tape.value(l).item();
            let grads = tape.backward(l)?;
            let mut out = grad.iter_mut();
            for &v in g.xi.iter().flatten() {
                if let Some(o) = out.next() {
                    *o += grads.scalar(v);
                }
            }
            for &v in &g.nu {
                let like = tape.value(v);
                for x in grads.wrt(v, like).data() {
                    if let Some(o) = out.next() {
                        *o += x;
                    }
                }
            }
        }
        let n = examples.len() as f64;
        grad.iter_mut().for_each(|x| *x /= n);
        Ok((loss / n, grad))
    }

    fn loss(&self, batch: usize, gates: &[f64]) -> Result<f64> {
        let teacher = self.ctx.teacher;
        let gate_set = unflatten_gates(teacher, gates)?;
        let examples = self.batches[batch];
        let mut loss = 0.0;
        for (k, ex) in examples.iter().enumerate() {
            let mut tape = Tape::new();
            let p = bind_params(&mut tape, teacher, false);
            let g = bind_gates(&mut tape, &gate_set, teacher, false)?;
            let z = forward(&mut tape, &p, Some(&g), &ex.tokens)?;
            let l = example_loss(
                &mut tape,
                z,
                ex,
                self.offsets[batch] + k,
                self.student.as_deref(),
                self.ctx.tau,
            )?;
            tape.check_finite()?;
            loss += tape.value(l).item();
        }
        Ok(loss / examples.len() as f64)
    }
}

/// Mean absolute gate gradient of every head and neuron.
pub fn accumulate_gate_grads(
    ctx: &ScoreContext<'_>,
    gates: &GateSet,
    kind: LossKind,
) -> Result<RawScoreTable> {
    if !gates.matches(ctx.teacher) || !gates.all_ones() {
        return Err(Error::Contract("scoring needs every gate equal to 1".into()));
    }
    let obj = EncoderGateObjective::new(*ctx, kind)?;
    let scores = gate_scores(&obj)?;
    Ok(RawScoreTable {
        loss: kind,
        batches: obj.num_batches(),
        data_digest: data_digest(ctx.data),
        scores: obj.units.iter().cloned().zip(scores).collect(),
    })
}

/// Expressiveness P: sensitivity of the teacher's task loss.
pub fn expressiveness(ctx: &ScoreContext<'_>) -> Result<RawScoreTable> {
    accumulate_gate_grads(ctx, &GateSet::ones(ctx.teacher), LossKind::Task)
}

/// Student-friendliness Q: sensitivity of the distillation loss against the
/// frozen trial student, gradients taken through the teacher branch.
pub fn friendliness(ctx: &ScoreContext<'_>) -> Result<RawScoreTable> {
    accumulate_gate_grads(ctx, &GateSet::ones(ctx.teacher), LossKind::Distill)
}

/// Exact loss change from zeroing one head or neuron gate.
pub fn ablation_oracle(ctx: &ScoreContext<'_>, unit: &UnitId, kind: LossKind) -> Result<f64> {
    let obj = EncoderGateObjective::new(*ctx, kind)?;
    let pos = obj
        .units
        .iter()
        .position(|u| u == unit)
        .ok_or_else(|| Error::Contract(format!("no such unit {unit}")))?;
    gate_ablation(&obj, pos)
}

/// Task or distillation loss as a function of the prunable weight matrices.
pub struct EncoderWeightObjective<'a> {
    ctx: ScoreContext<'a>,
    batches: Vec<&'a [Example]>,
    offsets: Vec<usize>,
    student: Option<Vec<Tensor>>,
    units: Vec<UnitId>,
}

impl<'a> EncoderWeightObjective<'a> {
    pub fn new(ctx: ScoreContext<'a>, kind: LossKind) -> Result<Self> {
        let batches = ctx.batches()?;
        let offsets = batches
            .iter()
            .scan(0, |acc, b| {
                let start = *acc;
                *acc += b.len();
                Some(start)
            })
            .collect();
        Ok(Self {
            student: ctx.student_logits(kind)?,
            units: parameter_units(ctx.teacher),
            ctx,
            batches,
            offsets,
        })
    }
}

/// Every scalar of every prunable weight matrix, in [`prunable_tensors`]
/// order.
pub fn parameter_units(params: &ModelParams) -> Vec<UnitId> {
    prunable_tensors(params)
        .into_iter()
        .flat_map(|(l, name, t)| (0..t.numel()).map(move |i| UnitId::parameter(l, name.clone(), i)))
        .collect()
}

fn prunable_vars(p: &crate::model::ParamVars) -> Vec<Var> {
    let mut out = Vec::new();
    for layer in &p.layers {
        for h in &layer.heads {
            out.extend([h.wq, h.wk, h.wv, h.wo]);
        }
        out.extend([layer.w1, layer.w2]);
    }
    out
}

impl WeightObjective for EncoderWeightObjective<'_> {
    fn units(&self) -> &[UnitId] {
        &self.units
    }

    fn weights(&self) -> Vec<f64> {
        prunable_tensors(self.ctx.teacher)
            .into_iter()
            .flat_map(|(_, _, t)| t.data().to_vec())
            .collect()
    }

    fn num_batches(&self) -> usize {
        self.batches.len()
    }

    fn loss_and_grad(&self, batch: usize) -> Result<(f64, Vec<f64>)> {
        let teacher = self.ctx.teacher;
        let examples = self.batches[batch];
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.units.len()];
        for (k, ex) in examples.iter().enumerate() {
            let mut tape = Tape::new();
            let p = bind_params(&mut tape, teacher, true);
            let z = forward(&mut tape, &p, None, &ex.tokens)?;
            let l = example_loss(
                &mut tape,
                z,
                ex,
                self.offsets[batch] + k,
                self.student.as_deref(),
                self.ctx.tau,
            )?;
            loss += tape.value(l).item();
            let grads = tape.backward(l)?;
            let mut at = 0;
            for v in prunable_vars(&p) {
                let like = tape.value(v);
                let n = like.numel();
                if let Some(t) = grads.get(v) {
                    for (o, x) in grad[at..at + n].iter_mut().zip(t.data()) {
                        *o += x;
                    }
                }
                at += n;
            }
        }
        let n = examples.len() as f64;
        grad.iter_mut().for_each(|x| *x /= n);
        Ok((loss / n, grad))
    }
}

/// Scores normalized to unit ℓ2 norm per group. Groups whose scores are all
/// zero are left at zero and listed in `zero_groups`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub scores: BTreeMap<UnitId, f64>,
    pub zero_groups: Vec<GroupKey>,
}

pub fn normalize_l2(scores: &BTreeMap<UnitId, f64>, grouping: Grouping) -> Normalized {
    let mut norms: BTreeMap<GroupKey, f64> = BTreeMap::new();
    for (u, s) in scores {
        *norms.entry(GroupKey::of(u, grouping)).or_default() += s * s;
    }
    let zero_groups: Vec<GroupKey> = norms
        .iter()
        .filter(|(_, n)| **n == 0.0)
        .map(|(k, _)| *k)
        .collect();
    for k in &zero_groups {
        log::warn!("all scores zero for {k}; group left unnormalized");
    }
    let scores = scores
        .iter()
        .map(|(u, s)| {
            let n = norms[&GroupKey::of(u, grouping)];
            (u.clone(), if n == 0.0 { 0.0 } else { s / n.sqrt() })
        })
        .collect();
    Normalized { scores, zero_groups }
}

/// `I = λ·P̂ + (1−λ)·Q̂` per unit.
pub fn interpolate(
    p_hat: &BTreeMap<UnitId, f64>,
    q_hat: &BTreeMap<UnitId, f64>,
    lambda: f64,
) -> Result<BTreeMap<UnitId, f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if p_hat.len() != q_hat.len() || p_hat.keys().zip(q_hat.keys()).any(|(a, b)| a != b) {
        return Err(Error::Contract("P and Q cover different units".into()));
    }
    Ok(p_hat
        .iter()
        .zip(q_hat.values())
        .map(|((u, p), q)| (u.clone(), lambda * p + (1.0 - lambda) * q))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    #[serde(flatten)]
    pub unit: UnitId,
    pub p_raw: f64,
    pub q_raw: f64,
    pub p: f64,
    pub q: f64,
    pub i: f64,
    /// Zero-based position in the removal order of the unit's kind (lowest
    /// `i` first).
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub lambda: f64,
    pub grouping: Grouping,
    /// Groups with all-zero raw scores, for P and Q respectively.
    pub zero_groups_p: Vec<GroupKey>,
    pub zero_groups_q: Vec<GroupKey>,
    /// Sorted by unit.
    pub units: Vec<UnitScore>,
}

/// Removal order: `i` ascending, ties by unit order.
pub(crate) fn removal_order(a: &UnitScore, b: &UnitScore) -> std::cmp::Ordering {
    a.i.total_cmp(&b.i).then_with(|| a.unit.cmp(&b.unit))
}

impl ScoreReport {
    pub fn build(
        p: &BTreeMap<UnitId, f64>,
        q: &BTreeMap<UnitId, f64>,
        lambda: f64,
        grouping: Grouping,
    ) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Input("empty score table".into()));
        }
        if p.values().chain(q.values()).any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Contract("raw scores must be finite and nonnegative".into()));
        }
        let p_hat = normalize_l2(p, grouping);
        let q_hat = normalize_l2(q, grouping);
        let i = interpolate(&p_hat.scores, &q_hat.scores, lambda)?;
        let units = p
            .iter()
            .map(|(u, &p_raw)| UnitScore {
                unit: u.clone(),
                p_raw,
                q_raw: q[u],
                p: p_hat.scores[u],
                q: q_hat.scores[u],
                i: i[u],
                rank: 0,
            })
            .collect();
        let mut report = Self {
            lambda,
            grouping,
            zero_groups_p: p_hat.zero_groups,
            zero_groups_q: q_hat.zero_groups,
            units,
        };
        report.assign_ranks();
        Ok(report)
    }

    /// Report from two raw tables over the same units.
    pub fn from_tables(
        p: &RawScoreTable,
        q: &RawScoreTable,
        lambda: f64,
        grouping: Grouping,
    ) -> Result<Self> {
        Self::build(&p.scores, &q.scores, lambda, grouping)
    }

    /// Ranking by expressiveness alone (`I = P̂`).
    pub fn expressiveness_only(p: &RawScoreTable, grouping: Grouping) -> Result<Self> {
        Self::build(&p.scores, &p.scores, 1.0, grouping)
    }

    fn assign_ranks(&mut self) {
        let mut order: Vec<usize> = (0..self.units.len()).collect();
        order.sort_by(|&a, &b| {
            self.units[a]
                .unit
                .kind
                .cmp(&self.units[b].unit.kind)
                .then_with(|| removal_order(&self.units[a], &self.units[b]))
        });
        let mut last_kind = None;
        let mut r = 0;
        for idx in order {
            let kind = self.units[idx].unit.kind;
            if last_kind != Some(kind) {
                last_kind = Some(kind);
                r = 0;
            }
            self.units[idx].rank = r;
            r += 1;
        }
    }

    /// Same scores, re-blended at another λ.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        let mut out = self.clone();
        out.lambda = lambda;
        for u in &mut out.units {
            u.i = lambda * u.p + (1.0 - lambda) * u.q;
        }
        out.assign_ranks();
        Ok(out)
    }

    pub fn kinds(&self) -> Vec<UnitKind> {
        let mut k: Vec<UnitKind> = self.units.iter().map(|u| u.unit.kind).collect();
        k.dedup();
        k
    }

    pub fn of_kind(&self, kind: UnitKind) -> impl Iterator<Item = &UnitScore> {
        self.units.iter().filter(move |u| u.unit.kind == kind)
    }

    pub fn get(&self, unit: &UnitId) -> Option<&UnitScore> {
        self.units
            .binary_search_by(|u| u.unit.cmp(unit))
            .ok()
            .map(|i| &self.units[i])
    }

    /// One JSON object per unit.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.units {
            let _ = writeln!(out, "{}", serde_json::to_string(u)?);
        }
        Ok(out)
    }

    /// SHA-256 of the JSON-lines export.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_jsonl()?.as_bytes())))
    }
}

/// Per-weight scores `|w·∂L/∂w|` for both losses, normalized and blended as
/// in the structured case.
pub fn unstructured_scores(
    ctx: &ScoreContext<'_>,
    lambda: f64,
    grouping: Grouping,
) -> Result<ScoreReport> {
    let p_obj = EncoderWeightObjective::new(*ctx, LossKind::Task)?;
    let p = weight_scores(&p_obj)?;
    let q_obj = EncoderWeightObjective::new(*ctx, LossKind::Distill)?;
    let q = weight_scores(&q_obj)?;
    let units = p_obj.units;
    let p: BTreeMap<UnitId, f64> = units.iter().cloned().zip(p).collect();
    let q: BTreeMap<UnitId, f64> = units.into_iter().zip(q).collect();
    ScoreReport::build(&p, &q, lambda, grouping)
}
