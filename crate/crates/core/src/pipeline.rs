//! The three stages (trial distillation, parameter sparsification, actual
//! distillation from a rewound student) and the runs built from them: grid,
//! automatic and random-mask searches, the pilot study and the λ sweep.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig, Split};
use crate::distill::{distill, evaluate, finetune_teacher, TrainReport};
use crate::error::{Error, Result};
use crate::model::{apply_unstructured, init_student, GateSet, ModelConfig, ModelParams, StudentInit};
use crate::rng::{derive_seed, Rng};
use crate::scoring::{
    expressiveness, friendliness, parameter_units, structured_units, unstructured_scores,
    ScoreContext, ScoreReport,
};
use crate::sparsify::{
    auto_sparsity, density_profile, random_mask, rank_mask, search, AutoEstimate, GridPoint,
};
use crate::tasks::{
    build_vocab_and_encode, encode_rows, load_tsv, make_synthetic, variance_confidence,
    Arity, Dataset, Example, LabelMap, TaskSpec, Vocab,
};
use crate::tensor::softmax_row;
use crate::units::{MaskKind, Provenance, SparsityMask, UnitKind};

/// Sub-seed names. Each stochastic stage draws from its own stream.
pub mod seeds {
    pub const TEACHER_INIT: &str = "teacher.init";
    pub const TEACHER_SHUFFLE: &str = "teacher.shuffle";
    pub const DISTILL_SHUFFLE: &str = "distill.shuffle";
    pub const RANDOM_MASK: &str = "stark.random";
    pub const PILOT: &str = "pilot";
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
    /// Teacher architecture with vocabulary, length and classes filled in.
    pub teacher_config: ModelConfig,
}

/// Generates or loads the train and dev splits.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (vocab, train, dev) = match &cfg.data {
        DataConfig::Synthetic(spec) => {
            let d = make_synthetic(spec, cfg.seed)?;
            (d.vocab, d.train, d.dev)
        }
        DataConfig::Tsv(t) => {
            let train_rows = load_tsv(&t.train, &t.schema)?;
            let dev_rows = load_tsv(&t.dev, &t.schema)?;
            for (path, load) in [(&t.train, &train_rows), (&t.dev, &dev_rows)] {
                if !load.skipped.is_empty() {
                    log::warn!("{}: skipped malformed lines {:?}", path.display(), load.skipped);
                }
            }
            let labels = LabelMap::from_rows(&train_rows.rows);
            let (vocab, train) =
                build_vocab_and_encode(&train_rows.rows, &labels, t.max_vocab, t.max_len)?;
            let dev = encode_rows(&dev_rows.rows, &vocab, &labels, t.max_len)?;
            let spec = TaskSpec {
                name: t.name.clone(),
                arity: if t.schema.text_b.is_some() { Arity::Pair } else { Arity::Single },
                classes: labels.labels.len(),
                regression: false,
                metric: t.metric,
                max_len: t.max_len,
            };
            spec.validate()?;
            (
                vocab,
                Dataset {
                    spec: spec.clone(),
                    examples: train,
                },
                Dataset { spec, examples: dev },
            )
        }
    };
    let teacher_config = cfg
        .model
        .model_config(vocab.len(), train.spec.max_len, train.spec.classes);
    teacher_config.validate()?;
    Ok(PreparedData {
        vocab,
        train,
        dev,
        teacher_config,
    })
}

/// Initializes and trains the teacher on the task loss.
pub fn train_teacher(cfg: &RunConfig, data: &PreparedData) -> Result<(ModelParams, TrainReport)> {
    let mut rng = Rng::from_name(cfg.seed, seeds::TEACHER_INIT);
    let init = ModelParams::init(&data.teacher_config, &mut rng)?;
    finetune_teacher(
        init,
        &data.train,
        &data.dev,
        &cfg.teacher,
        derive_seed(cfg.seed, seeds::TEACHER_SHUFFLE),
    )
}

/// Examples that feed score accumulation.
pub fn scoring_examples<'a>(cfg: &RunConfig, data: &'a PreparedData) -> &'a [Example] {
    let all = match cfg.scoring.split {
        Split::Train => &data.train.examples,
        Split::Dev => &data.dev.examples,
    };
    match cfg.scoring.max_examples {
        Some(n) => &all[..n.min(all.len())],
        None => all,
    }
}

fn score_context<'a>(
    cfg: &RunConfig,
    teacher: &'a ModelParams,
    student: Option<&'a ModelParams>,
    data: &'a PreparedData,
) -> ScoreContext<'a> {
    ScoreContext {
        teacher,
        student,
        data: scoring_examples(cfg, data),
        batch_size: cfg.scoring.batch_size,
        tau: cfg.distill.tau,
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub student: ModelParams,
    pub report: TrainReport,
    /// The student before its first update, for rewinding.
    pub init: Checkpoint,
}

/// Samples a student from the configured strategy, checkpoints it, then
/// distills it from the dense teacher.
pub fn trial_distillation(cfg: &RunConfig, teacher: &ModelParams, data: &PreparedData) -> Result<Trial> {
    let expressive = match cfg.distill.student_init {
        StudentInit::PruneParams { .. } => {
            let p = expressiveness(&score_context(cfg, teacher, None, data))?;
            Some(ScoreReport::expressiveness_only(&p, cfg.scoring.grouping)?)
        }
        StudentInit::DropLayers { .. } => None,
    };
    let student = init_student(teacher, cfg.distill.student_init, expressive.as_ref())?;
    let init = Checkpoint {
        params: student,
        gates: None,
        rng: Rng::from_name(cfg.seed, seeds::DISTILL_SHUFFLE),
        config_digest: cfg.distill_digest()?,
    };
    let (student, report) = distill(
        teacher,
        &GateSet::ones(teacher),
        init.params.clone(),
        &data.train,
        &data.dev,
        &cfg.distill,
        init.rng.state(),
    )?;
    Ok(Trial { student, report, init })
}

#[derive(Debug, Clone)]
pub struct Sparsification {
    pub report: ScoreReport,
    /// One mask per grid sparsity, in grid order.
    pub masks: Vec<SparsityMask>,
}

/// Scores the teacher for expressiveness and friendliness toward the trial
/// student, blends at λ and ranks a mask for every grid sparsity.
pub fn parameter_sparsification(
    cfg: &RunConfig,
    teacher: &ModelParams,
    trial_student: &ModelParams,
    data: &PreparedData,
) -> Result<Sparsification> {
    let ctx = score_context(cfg, teacher, Some(trial_student), data);
    let report = match cfg.scoring.granularity {
        MaskKind::Structured => {
            let p = expressiveness(&ctx)?;
            let q = friendliness(&ctx)?;
            ScoreReport::from_tables(&p, &q, cfg.distill.lambda, cfg.scoring.grouping)?
        }
        MaskKind::Unstructured => unstructured_scores(&ctx, cfg.distill.lambda, cfg.scoring.grouping)?,
    };
    let masks = cfg
        .distill
        .grid
        .iter()
        .map(|&s| rank_mask(&report, s))
        .collect::<Result<_>>()?;
    Ok(Sparsification { report, masks })
}

/// The teacher as seen by the student: gates off for structured masks,
/// zeroed weights for unstructured ones.
pub fn sparse_teacher(teacher: &ModelParams, mask: &SparsityMask) -> Result<(ModelParams, GateSet)> {
    match mask.kind {
        MaskKind::Structured => Ok((teacher.clone(), GateSet::masked(teacher, mask)?)),
        MaskKind::Unstructured => {
            let t = apply_unstructured(teacher, mask)?;
            let g = GateSet::ones(&t);
            Ok((t, g))
        }
    }
}

/// Restores the exact trial initialization and data order, then distills
/// from the sparsified teacher.
pub fn actual_distillation(
    cfg: &RunConfig,
    teacher: &ModelParams,
    mask: &SparsityMask,
    init: &Checkpoint,
    data: &PreparedData,
) -> Result<(ModelParams, TrainReport)> {
    init.check_digest(&cfg.distill_digest()?)?;
    let (t, gates) = sparse_teacher(teacher, mask)?;
    distill(
        &t,
        &gates,
        init.params.clone(),
        &data.train,
        &data.dev,
        &cfg.distill,
        init.rng.state(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Mode {
    Grid,
    Auto,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActualRun {
    pub sparsity: f64,
    pub removed_heads: usize,
    pub removed_neurons: usize,
    pub removed_parameters: usize,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimings {
    pub trial: Duration,
    pub sparsify: Duration,
    pub actual: Duration,
}

/// Summary of one run. Timings are kept out of the serialized form so
/// identical runs produce identical documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub mode: Mode,
    pub config_digest: String,
    pub trial_dev_metric: f64,
    pub trial_report: TrainReport,
    pub init_hash: String,
    /// Absent for random masks, which need no scores.
    pub score_digest: Option<String>,
    pub auto: Option<AutoEstimate>,
    pub table: Vec<GridPoint>,
    pub actual: Vec<ActualRun>,
    pub chosen_sparsity: f64,
    pub final_dev_metric: f64,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub trial: Trial,
    pub scores: Option<ScoreReport>,
    /// Masks that were distilled from, in execution order.
    pub masks: Vec<SparsityMask>,
    /// Student of the chosen sparsity.
    pub student: ModelParams,
}

/// Best dev metric of a training run, or the metric of the untouched model
/// when no epoch ran.
pub fn settled_metric(report: &TrainReport, params: &ModelParams, dev: &Dataset) -> Result<f64> {
    match report.best_dev_metric {
        Some(m) => Ok(m),
        None => Ok(evaluate(params, None, dev)?.metric),
    }
}

fn removed_counts(mask: &SparsityMask) -> (usize, usize, usize) {
    (
        mask.count(UnitKind::Head),
        mask.count(UnitKind::Neuron),
        mask.count(UnitKind::Parameter),
    )
}

struct Searcher<'a> {
    cfg: &'a RunConfig,
    teacher: &'a ModelParams,
    init: &'a Checkpoint,
    data: &'a PreparedData,
    actual: Vec<ActualRun>,
    best: Option<(f64, f64, ModelParams)>,
}

impl Searcher<'_> {
    fn run(&mut self, mask: &SparsityMask) -> Result<f64> {
        let (removed_heads, removed_neurons, removed_parameters) = removed_counts(mask);
        let outcome = actual_distillation(self.cfg, self.teacher, mask, self.init, self.data);
        let mut record = ActualRun {
            sparsity: mask.sparsity,
            removed_heads,
            removed_neurons,
            removed_parameters,
            report: None,
            error: None,
        };
        let result = match outcome {
            Ok((student, report)) => {
                let m = settled_metric(&report, &student, &self.data.dev)?;
                let s = mask.sparsity;
                if self.best.as_ref().is_none_or(|(bs, bm, _)| m > *bm || (m == *bm && s > *bs)) {
                    self.best = Some((s, m, student));
                }
                record.report = Some(report);
                Ok(m)
            }
            Err(e) => {
                record.error = Some(e.to_string());
                Err(e)
            }
        };
        self.actual.push(record);
        result
    }
}

/// Runs trial distillation, sparsification and the actual distillations of
/// the chosen mode against a trained teacher.
pub fn run_stark(
    cfg: &RunConfig,
    data: &PreparedData,
    teacher: &ModelParams,
    mode: Mode,
) -> Result<PipelineRun> {
    cfg.validate()?;
    let t0 = Instant::now();
    let trial = trial_distillation(cfg, teacher, data)?;
    let trial_dev_metric = settled_metric(&trial.report, &trial.student, &data.dev)?;
    let trial_time = t0.elapsed();

    let t1 = Instant::now();
    let grid = &cfg.distill.grid;
    let (scores, candidate_masks, auto) = match mode {
        Mode::Random { seed } => {
            let units = match cfg.scoring.granularity {
                MaskKind::Structured => structured_units(teacher),
                MaskKind::Unstructured => parameter_units(teacher),
            };
            let masks = grid
                .iter()
                .enumerate()
                .map(|(i, &s)| random_mask(&units, s, derive_seed(seed, &format!("{}.{i}", seeds::RANDOM_MASK))))
                .collect::<Result<Vec<_>>>()?;
            (None, masks, None)
        }
        Mode::Grid => {
            let sp = parameter_sparsification(cfg, teacher, &trial.student, data)?;
            (Some(sp.report), sp.masks, None)
        }
        Mode::Auto => {
            let sp = parameter_sparsification(cfg, teacher, &trial.student, data)?;
            let kind = match cfg.scoring.granularity {
                MaskKind::Structured => cfg.scoring.auto_kind,
                MaskKind::Unstructured => UnitKind::Parameter,
            };
            let scores: Vec<f64> = sp.report.of_kind(kind).map(|u| u.i).collect();
            let profile = density_profile(&scores, cfg.scoring.bins)?;
            let range = (grid[0], grid[grid.len() - 1]);
            let estimate = auto_sparsity(&profile, range);
            let masks = match &estimate {
                AutoEstimate::Estimate { sparsity, .. } => {
                    let mut m = rank_mask(&sp.report, *sparsity)?;
                    m.provenance = Provenance::Auto {
                        lambda: sp.report.lambda,
                    };
                    vec![m]
                }
                AutoEstimate::Fallback { .. } => sp.masks,
            };
            (Some(sp.report), masks, Some(estimate))
        }
    };
    let sparsify_time = t1.elapsed();

    let t2 = Instant::now();
    let mut searcher = Searcher {
        cfg,
        teacher,
        init: &trial.init,
        data,
        actual: Vec::new(),
        best: None,
    };
    let sparsities: Vec<f64> = candidate_masks.iter().map(|m| m.sparsity).collect();
    let mut next = candidate_masks.iter();
    // Masks are consumed in grid order; `search` visits the same order.
    let result = if sparsities.len() == 1 && matches!(auto, Some(AutoEstimate::Estimate { .. })) {
        let mask = &candidate_masks[0];
        let m = searcher.run(mask)?;
        crate::sparsify::SearchResult {
            best: mask.sparsity,
            best_metric: m,
            table: vec![GridPoint {
                sparsity: mask.sparsity,
                metric: Some(m),
                error: None,
            }],
        }
    } else {
        search(&sparsities, |_| searcher.run(next.next().expect("one mask per grid point")))?
    };
    let actual_time = t2.elapsed();

    let (_, _, student) = searcher
        .best
        .take()
        .ok_or_else(|| Error::Contract("no actual distillation succeeded".into()))?;
    let report = PipelineReport {
        mode,
        config_digest: cfg.digest()?,
        trial_dev_metric,
        trial_report: trial.report.clone(),
        init_hash: trial.init.hash()?,
        score_digest: scores.as_ref().map(|s| s.digest()).transpose()?,
        auto,
        table: result.table,
        actual: searcher.actual,
        chosen_sparsity: result.best,
        final_dev_metric: result.best_metric,
        timings: StageTimings {
            trial: trial_time,
            sparsify: sparsify_time,
            actual: actual_time,
        },
    };
    Ok(PipelineRun {
        report,
        trial,
        scores,
        masks: candidate_masks,
        student,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotRow {
    pub sparsity: f64,
    pub trials: usize,
    pub mean_metric: f64,
    pub std_metric: f64,
    /// Mean over dev examples of the output-distribution variance.
    pub mean_variance: f64,
    pub std_variance: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Dev metric and mean output variance of a model.
pub fn metric_and_confidence(params: &ModelParams, dev: &Dataset) -> Result<(f64, f64)> {
    let eval = evaluate(params, None, dev)?;
    let variance = eval
        .logits
        .iter()
        .map(|z| {
            let mut p = z.clone();
            softmax_row(&mut p, 1.0);
            variance_confidence(&p)
        })
        .sum::<f64>()
        / eval.logits.len() as f64;
    Ok((eval.metric, variance))
}

/// Randomly zeroes a fraction of the teacher's prunable weights, `trials`
/// times per sparsity, and records the dev metric and output variance.
pub fn pilot_study(
    teacher: &ModelParams,
    dev: &Dataset,
    sparsities: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<PilotRow>> {
    if trials == 0 {
        return Err(Error::Parameter("pilot needs at least one trial".into()));
    }
    let units = parameter_units(teacher);
    let dense = metric_and_confidence(teacher, dev)?;
    sparsities
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (metrics, variances): (Vec<f64>, Vec<f64>) = (0..trials)
                .map(|t| {
                    if s == 0.0 {
                        return Ok(dense);
                    }
                    let mask_seed = derive_seed(seed, &format!("{}.{i}.{t}", seeds::PILOT));
                    let mask = random_mask(&units, s, mask_seed)?;
                    metric_and_confidence(&apply_unstructured(teacher, &mask)?, dev)
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let (mean_metric, std_metric) = mean_std(&metrics);
            let (mean_variance, std_variance) = mean_std(&variances);
            Ok(PilotRow {
                sparsity: s,
                trials,
                mean_metric,
                std_metric,
                mean_variance,
                std_variance,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub metric: f64,
}

/// Re-blends the scores at every λ and distills once per value at a fixed
/// sparsity, from the same rewound student.
pub fn lambda_sweep(
    cfg: &RunConfig,
    teacher: &ModelParams,
    scores: &ScoreReport,
    init: &Checkpoint,
    data: &PreparedData,
    lambdas: &[f64],
    sparsity: f64,
) -> Result<Vec<SweepPoint>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mask = rank_mask(&scores.with_lambda(lambda)?, sparsity)?;
            let (student, report) = actual_distillation(cfg, teacher, &mask, init, data)?;
            let metric = settled_metric(&report, &student, &data.dev)?;
            Ok(SweepPoint { lambda, metric })
        })
        .collect()
}
