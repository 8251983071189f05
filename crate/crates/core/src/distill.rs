//! Distillation losses, optimizers and the training loops for the teacher and
//! its students.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{bind_params, encoder_forward, forward, GateSet, ModelParams};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{metric, Dataset};
use crate::tensor::{check_tau, log_softmax_row, softmax_row, Tensor};

/// `L_KD = −softmax(z_t/τ) · log softmax(z_s/τ)`, without any τ² factor.
/// Gradients reach both branches; freeze one by binding it as a constant.
pub fn kd_loss(tape: &mut Tape, zt: Var, zs: Var, tau: f64) -> Result<Var> {
    let pt = tape.softmax_t(zt, tau)?;
    let ls = tape.log_softmax_t(zs, tau)?;
    let prod = tape.mul(pt, ls)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// `L_TK = −log softmax(z_s)[label]`.
pub fn task_loss(tape: &mut Tape, zs: Var, label: usize) -> Result<Var> {
    let k = tape.value(zs).numel();
    if label >= k {
        return Err(Error::Input(format!("label {label} outside {k} classes")));
    }
    let mut y = Tensor::zeros(tape.value(zs).shape());
    y.data_mut()[label] = 1.0;
    let y = tape.constant(y);
    let ls = tape.log_softmax_t(zs, 1.0)?;
    let prod = tape.mul(y, ls)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0))
}

/// `L = L_KD + α·L_TK`.
pub fn total_loss(kd: f64, tk: f64, alpha: f64) -> f64 {
    kd + alpha * tk
}

/// Scalar form of [`kd_loss`].
pub fn kd_loss_value(zt: &[f64], zs: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if zt.len() != zs.len() {
        return Err(Error::Contract(format!(
            "teacher has {} classes, student {}",
            zt.len(),
            zs.len()
        )));
    }
    let mut pt = zt.to_vec();
    softmax_row(&mut pt, tau);
    let mut ls = zs.to_vec();
    log_softmax_row(&mut ls, tau);
    Ok(-pt.iter().zip(&ls).map(|(p, l)| p * l).sum::<f64>())
}

/// `−y · log y_s` for a gold one-hot `y` and student probabilities `y_s`.
pub fn task_loss_value(y: &[f64], ys: &[f64]) -> Result<f64> {
    if y.len() != ys.len() {
        return Err(Error::Dimension(format!("{} vs {} classes", y.len(), ys.len())));
    }
    Ok(-y
        .iter()
        .zip(ys)
        .filter(|(g, _)| **g != 0.0)
        .map(|(g, p)| g * p.ln())
        .sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    /// Stochastic gradient descent with optional heavy-ball momentum.
    Sgd { momentum: f64 },
    /// Adam with decoupled weight decay.
    Adamw { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Epoch cap.
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
    /// Optimizer steps over which the learning rate ramps linearly from
    /// `lr / warmup_steps` to `lr`.
    pub warmup_steps: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            patience: 3,
            weight_decay: 0.01,
            warmup_steps: 100,
            optimizer: Optimizer::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        match self.optimizer {
            Optimizer::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config("momentum must lie in [0, 1)".into()))
            }
            Optimizer::Adamw { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 =>
            {
                Err(Error::Config("adamw needs betas in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

struct OptState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptState {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, cfg: &TrainConfig, params: &mut ModelParams, grads: &[Vec<f64>]) {
        self.step += 1;
        let lr = if cfg.warmup_steps > 0 {
            cfg.lr * (self.step as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            cfg.lr
        };
        for (i, t) in params.tensors_mut().into_iter().enumerate() {
            let decay = if t.shape().len() == 2 { cfg.weight_decay } else { 0.0 };
            let g = &grads[i];
            let w = t.data_mut();
            match cfg.optimizer {
                Optimizer::Sgd { momentum } => {
                    let m = &mut self.m[i];
                    for j in 0..w.len() {
                        m[j] = momentum * m[j] + g[j];
                        w[j] -= lr * (m[j] + decay * w[j]);
                    }
                }
                Optimizer::Adamw { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..w.len() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        w[j] -= lr * (update + decay * w[j]);
                    }
                }
            }
        }
    }
}

/// Loss decomposition and dev metric after one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_kd: f64,
    pub l_tk: f64,
    pub l: f64,
    pub dev_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub best_dev_metric: Option<f64>,
    pub stopped_early: bool,
    /// Excluded from serialization so that reports of identical runs compare
    /// byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(out, "{}", serde_json::to_string(e)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs: Vec<EpochRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self::from_epochs(epochs, false, Duration::ZERO))
    }

    fn from_epochs(epochs: Vec<EpochRecord>, stopped_early: bool, wall_time: Duration) -> Self {
        let mut best: Option<&EpochRecord> = None;
        for e in &epochs {
            if best.is_none_or(|b| e.dev_metric > b.dev_metric) {
                best = Some(e);
            }
        }
        Self {
            best_epoch: best.map(|b| b.epoch),
            best_dev_metric: best.map(|b| b.dev_metric),
            epochs,
            stopped_early,
            wall_time,
        }
    }
}

/// Dev metric and logits of a (possibly gated) model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metric: f64,
    pub logits: Vec<Vec<f64>>,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(params: &ModelParams, gates: Option<&GateSet>, data: &Dataset) -> Result<Evaluation> {
    let logits = data
        .examples
        .iter()
        .map(|e| Ok(encoder_forward(&e.tokens, params, gates)?.into_vec()))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
    let metric = metric(data.spec.metric, &preds, &data.labels())?;
    Ok(Evaluation { metric, logits })
}

enum Target<'a> {
    Task,
    Distill {
        teacher_logits: &'a [Vec<f64>],
        tau: f64,
        alpha: f64,
    },
}

fn train(
    mut params: ModelParams,
    train: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
    target: Target<'_>,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Input("training and dev data must be nonempty".into()));
    }
    let start = Instant::now();
    let mut rng = Rng::new(seed);
    let mut opt = OptState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut sum_kd, mut sum_tk, mut sum_l) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> =
                params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            for &i in batch {
                let ex = &train.examples[i];
                let mut tape = Tape::new();
                let p = bind_params(&mut tape, &params, true);
                let zs = forward(&mut tape, &p, None, &ex.tokens)?;
                let tk = task_loss(&mut tape, zs, ex.label)?;
                let (loss, kd_value) = match target {
                    Target::Task => (tk, 0.0),
                    Target::Distill {
                        teacher_logits,
                        tau,
                        alpha,
                    } => {
                        let zt = Tensor::new(vec![1, teacher_logits[i].len()], teacher_logits[i].clone())?;
                        let zt = tape.constant(zt);
                        let kd = kd_loss(&mut tape, zt, zs, tau)?;
                        let weighted = tape.scale(tk, alpha);
                        let kd_value = tape.value(kd).item();
                        (tape.add(kd, weighted)?, kd_value)
                    }
                };
                sum_kd += kd_value;
                sum_tk += tape.value(tk).item();
                sum_l += tape.value(loss).item();
                let g = tape.backward(loss)?;
                for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                    if let Some(t) = g.get(v) {
                        for (a, b) in acc.iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for acc in &mut grads {
                for a in acc.iter_mut() {
                    *a *= scale;
                }
            }
            opt.apply(cfg, &mut params, &grads);
        }
        let dev_metric = evaluate(&params, None, dev)?.metric;
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            l_kd: sum_kd / n,
            l_tk: sum_tk / n,
            l: sum_l / n,
            dev_metric,
        };
        log::info!(
            "epoch {epoch}: L={:.4} L_KD={:.4} L_TK={:.4} dev={:.4}",
            record.l,
            record.l_kd,
            record.l_tk,
            dev_metric
        );
        epochs.push(record);
        if best.as_ref().is_none_or(|(b, _)| dev_metric > *b) {
            best = Some((dev_metric, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok((
        params,
        TrainReport::from_epochs(epochs, stopped_early, start.elapsed()),
    ))
}

/// Trains a model on the task loss alone, keeping the weights of the best dev
/// epoch. `seed` drives the data order.
pub fn finetune_teacher(
    params: ModelParams,
    train_data: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    train(params, train_data, dev, cfg, Target::Task, seed)
}

/// Distillation hyperparameters shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub student_init: crate::model::StudentInit,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            alpha: 1.0,
            lambda: 0.5,
            grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            student_init: crate::model::StudentInit::default(),
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        validate_grid(&self.grid)?;
        self.train.validate()
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("sparsity grid is empty".into()));
    }
    if grid.iter().any(|&s| !(s > 0.0 && s < 1.0)) {
        return Err(Error::Config("grid values must lie in (0, 1)".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Teacher logits for every example under the given gates.
pub fn teacher_logits(
    teacher: &ModelParams,
    gates: &GateSet,
    data: &Dataset,
) -> Result<Vec<Vec<f64>>> {
    data.examples
        .iter()
        .map(|e| Ok(encoder_forward(&e.tokens, teacher, Some(gates))?.into_vec()))
        .collect()
}

/// Trains `student` on `L_KD + α·L_TK` against the frozen, gated teacher.
pub fn distill(
    teacher: &ModelParams,
    gates: &GateSet,
    student: ModelParams,
    train_data: &Dataset,
    dev: &Dataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if teacher.classes() != student.classes() {
        return Err(Error::Contract(format!(
            "teacher predicts {} classes, student {}",
            teacher.classes(),
            student.classes()
        )));
    }
    if !gates.matches(teacher) {
        return Err(Error::Contract("gate set does not match the teacher".into()));
    }
    if !gates.is_binary() {
        return Err(Error::Contract("teacher gates must be binary during distillation".into()));
    }
    let logits = teacher_logits(teacher, gates, train_data)?;
    train(
        student,
        train_data,
        dev,
        &cfg.train,
        Target::Distill {
            teacher_logits: &logits,
            tau: cfg.tau,
            alpha: cfg.alpha,
        },
        seed,
    )
}
