//! `sparse-teacher`: runs each stage of the sparse-teacher procedure from a
//! JSON config and writes every artifact under one output directory.

mod artifacts;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sparse_teacher::checkpoint::Checkpoint;
use sparse_teacher::config::RunConfig;
use sparse_teacher::distill::TrainReport;
use sparse_teacher::model::ModelParams;
use sparse_teacher::pipeline::{
    self, actual_distillation, parameter_sparsification, pilot_study, prepare_data, run_stark,
    train_teacher, trial_distillation, Mode, PreparedData,
};
use sparse_teacher::rng::derive_seed;
use sparse_teacher::scoring::ScoreReport;
use sparse_teacher::sparsify::{export_density, rank_mask};
use sparse_teacher::units::{MaskKind, SparsityMask};
use sparse_teacher::Error;

use artifacts::Outputs;

#[derive(Parser)]
#[command(name = "sparse-teacher", version, about = "Distill students from sparsified teachers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Built-in defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Replaces the sparsity grid with this single value.
    #[arg(long)]
    sparsity: Option<f64>,
}

#[derive(Args, Clone)]
struct TeacherArg {
    /// Teacher checkpoint; defaults to `<out-dir>/teacher.strk`.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StarkMode {
    Grid,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the task loss.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a trial student from the dense teacher and save its init.
    Trial {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Score teacher heads and neurons against the trial student.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
        /// Trial student; defaults to `<out-dir>/trial_student.strk`.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Turn a score report into masks for every grid sparsity.
    Sparsify {
        #[command(flatten)]
        common: Common,
        /// Score report; defaults to `<out-dir>/scores.json`.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Rewind the trial init and distill from the masked teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
        /// Student init checkpoint; defaults to `<out-dir>/trial_init.strk`.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Mask JSON; the dense teacher is used when omitted.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Full pipeline with a grid search over ranked or random masks.
    Stark {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
        #[arg(long, value_enum, default_value = "grid")]
        mode: StarkMode,
        /// Seed of the random masks in random mode.
        #[arg(long, default_value_t = 0)]
        mask_seed: u64,
    },
    /// Full pipeline with one distillation at the estimated sparsity.
    Auto {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Random unstructured sparsification of the teacher: metric and confidence.
    Pilot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Compare plain KD with the pipeline variants found in the output directory.
    Report {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Finetune { .. } => "finetune",
            Command::Trial { .. } => "trial",
            Command::Score { .. } => "score",
            Command::Sparsify { .. } => "sparsify",
            Command::Distill { .. } => "distill",
            Command::Stark { .. } => "stark",
            Command::Auto { .. } => "auto",
            Command::Pilot { .. } => "pilot",
            Command::Report { .. } => "report",
        }
    }

    fn out_dir(&self) -> &Path {
        match self {
            Command::Finetune { common }
            | Command::Trial { common, .. }
            | Command::Score { common, .. }
            | Command::Sparsify { common, .. }
            | Command::Distill { common, .. }
            | Command::Stark { common, .. }
            | Command::Auto { common, .. }
            | Command::Pilot { common, .. } => &common.out_dir,
            Command::Report { out_dir } => out_dir,
        }
    }
}

/// Why a command failed, mapped onto the exit status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Missing(String),
    Stage(Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Stage(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "config",
            Failure::Missing(_) => "missing-input",
            Failure::Stage(_) => "stage",
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Missing(m) => f.write_str(m),
            Failure::Stage(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) | Error::Parameter(m) => Failure::Usage(m),
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Missing(e.to_string())
            }
            e => Failure::Stage(e),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

#[derive(Serialize)]
struct ErrorRecord<'a> {
    command: &'a str,
    exit_code: u8,
    kind: &'a str,
    message: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let name = cli.command.name();
    let out_dir = cli.command.out_dir().to_path_buf();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            let record = ErrorRecord {
                command: name,
                exit_code: f.code(),
                kind: f.kind(),
                message: f.to_string(),
            };
            if std::fs::create_dir_all(&out_dir).is_ok() {
                let path = out_dir.join(format!("error-{name}.json"));
                let _ = std::fs::write(path, serde_json::to_string_pretty(&record).unwrap_or_default());
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_config(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(Failure::Missing(format!("config {} not found", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(l) = common.lambda {
        cfg.distill.lambda = l;
    }
    if let Some(t) = common.tau {
        cfg.distill.tau = t;
    }
    if let Some(a) = common.alpha {
        cfg.distill.alpha = a;
    }
    if let Some(s) = common.sparsity {
        cfg.distill.grid = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Missing(format!("{what} {} not found", path.display())))
    }
}

fn teacher_path(arg: &TeacherArg, out: &Path) -> PathBuf {
    arg.teacher.clone().unwrap_or_else(|| out.join("teacher.strk"))
}

fn load_teacher(arg: &TeacherArg, out: &Path) -> Outcome<ModelParams> {
    let path = teacher_path(arg, out);
    require(&path, "teacher checkpoint")?;
    Ok(Checkpoint::load(&path)?.params)
}

/// Loads the teacher, training one first when none was given and the
/// default location is empty.
fn teacher_or_train(
    arg: &TeacherArg,
    cfg: &RunConfig,
    data: &PreparedData,
    out: &mut Outputs,
) -> Outcome<ModelParams> {
    let path = teacher_path(arg, out.dir());
    if arg.teacher.is_none() && !path.exists() {
        log::info!("no teacher at {}; training one", path.display());
        return finetune(cfg, data, out);
    }
    load_teacher(arg, out.dir())
}

fn finetune(cfg: &RunConfig, data: &PreparedData, out: &mut Outputs) -> Outcome<ModelParams> {
    let t = Instant::now();
    let (teacher, report) = train_teacher(cfg, data)?;
    out.time("finetune", t.elapsed());
    let ck = Checkpoint {
        params: teacher,
        gates: None,
        rng: sparse_teacher::rng::Rng::from_name(cfg.seed, pipeline::seeds::TEACHER_SHUFFLE),
        config_digest: cfg.distill_digest()?,
    };
    out.checkpoint("teacher.strk", &ck)?;
    out.text("teacher_report.jsonl", &report.to_jsonl()?)?;
    out.tsv("data/train.tsv", &data.train, &data.vocab)?;
    out.tsv("data/dev.tsv", &data.dev, &data.vocab)?;
    log::info!("teacher dev metric {:?}", report.best_dev_metric);
    Ok(ck.params)
}

fn write_report(out: &mut Outputs, name: &str, report: &TrainReport) -> Outcome<()> {
    out.text(name, &report.to_jsonl()?)?;
    Ok(())
}

fn write_scores(out: &mut Outputs, scores: &ScoreReport, bins: usize) -> Outcome<()> {
    out.json("scores.json", scores)?;
    out.text("scores.jsonl", &scores.to_jsonl()?)?;
    let dir = out.subdir("density")?;
    for path in export_density(scores, &dir, bins)? {
        out.record(&path);
    }
    Ok(())
}

fn run(command: Command) -> Outcome<()> {
    let name = command.name();
    match command {
        Command::Report { out_dir } => report::run(&out_dir),
        Command::Finetune { common } => {
            let cfg = load_config(&common)?;
            let mut out = Outputs::create(&common.out_dir, name, &cfg)?;
            let data = prepare_data(&cfg)?;
            finetune(&cfg, &data, &mut out)?;
            out.finish()
        }
        Command::Trial { common, teacher } => {
            let cfg = load_config(&common)?;
            let teacher = load_teacher(&teacher, &common.out_dir)?;
            let mut out = Outputs::create(&common.out_dir, name, &cfg)?;
            let data = prepare_data(&cfg)?;
            let t = Instant::now();
            let trial = trial_distillation(&cfg, &teacher, &data)?;
            out.time("trial", t.elapsed());
            out.checkpoint("trial_init.strk", &trial.init)?;
            let student = Checkpoint {
                params: trial.student,
                gates: None,
                rng: trial.init.rng.clone(),
                config_digest: trial.init.config_digest.clone(),
            };
            out.checkpoint("trial_student.strk", &student)?;
            write_report(&mut out, "trial_report.jsonl", &trial.report)?;
            out.finish()
        }
        Command::Score {
            common,
            teacher,
            student,
        } => {
            let cfg = load_config(&common)?;
            let teacher = load_teacher(&teacher, &common.out_dir)?;
            let student_path = student.unwrap_or_else(|| common.out_dir.join("trial_student.strk"));
            require(&student_path, "trial student")?;
            let student = Checkpoint::load(&student_path)?.params;
            let mut out = Outputs::create(&common.out_dir, name, &cfg)?;
            let data = prepare_data(&cfg)?;
            let t = Instant::now();
            let sp = parameter_sparsification(&cfg, &teacher, &student, &data)?;
            out.time("score", t.elapsed());
            write_scores(&mut out, &sp.report, cfg.scoring.bins)?;
            out.finish()
        }
        Command::Sparsify { common, scores } => {
            let cfg = load_config(&common)?;
            let path = scores.unwrap_or_else(|| common.out_dir.join("scores.json"));
            require(&path, "score report")?;
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::Stage(Error::Io {
                path: path.clone(),
                source: e,
            }))?;
            let report: ScoreReport = serde_json::from_str(&text).map_err(Error::from)?;
            let report = report.with_lambda(cfg.distill.lambda)?;
            let mut out = Outputs::create(&common.out_dir, name, &cfg)?;
            for (i, &s) in cfg.distill.grid.iter().enumerate() {
                let mask = rank_mask(&report, s)?;
                out.json(&format!("masks/mask-{i}.json"), &mask)?;
            }
            out.finish()
        }
        Command::Distill {
            common,
            teacher,
            init,
            mask,
        } => {
            let cfg = load_config(&common)?;
            let teacher = load_teacher(&teacher, &common.out_dir)?;
            let init_path = init.unwrap_or_else(|| common.out_dir.join("trial_init.strk"));
            require(&init_path, "student init checkpoint")?;
            let init = Checkpoint::load(&init_path)?;
            let mask = match mask {
                Some(p) => {
                    require(&p, "mask")?;
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Failure::Stage(Error::Io { path: p.clone(), source: e }))?;
                    serde_json::from_str::<SparsityMask>(&text).map_err(Error::from)?
                }
                None => SparsityMask::empty(MaskKind::Structured),
            };
            let mut out = Outputs::create(&common.out_dir, name, &cfg)?;
            let data = prepare_data(&cfg)?;
            let t = Instant::now();
            let (student, report) = actual_distillation(&cfg, &teacher, &mask, &init, &data)?;
            out.time("distill", t.elapsed());
            let ck = Checkpoint {
                params: student,
                gates: None,
                rng: init.rng.clone(),
                config_digest: init.config_digest.clone(),
            };
            out.checkpoint("student.strk", &ck)?;
            write_report(&mut out, "distill_report.jsonl", &report)?;
            out.finish()
        }
        Command::Stark {
            common,
            teacher,
            mode,
            mask_seed,
        } => {
            let mode = match mode {
                StarkMode::Grid => Mode::Grid,
                StarkMode::Random => Mode::Random { seed: mask_seed },
            };
            run_pipeline(common, teacher, mode)
        }
        Command::Auto { common, teacher } => run_pipeline(common, teacher, Mode::Auto),
        Command::Pilot { common, teacher } => {
            let cfg = load_config(&common)?;
            let teacher = load_teacher(&teacher, &common.out_dir)?;
            let mut out = Outputs::create(&common.out_dir, name, &cfg)?;
            let data = prepare_data(&cfg)?;
            let t = Instant::now();
            let seed = derive_seed(cfg.seed, pipeline::seeds::PILOT);
            out.seed(pipeline::seeds::PILOT);
            let rows = pilot_study(&teacher, &data.dev, &cfg.pilot.sparsities, cfg.pilot.trials, seed)?;
            out.time("pilot", t.elapsed());
            out.json("pilot.json", &rows)?;
            let mut csv = String::from("sparsity,trials,mean_metric,std_metric,mean_variance,std_variance\n");
            for r in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.sparsity, r.trials, r.mean_metric, r.std_metric, r.mean_variance, r.std_variance
                ));
            }
            out.text("pilot.csv", &csv)?;
            out.finish()
        }
    }
}

fn mode_tag(mode: Mode) -> &'static str {
    match mode {
        Mode::Grid => "grid",
        Mode::Auto => "auto",
        Mode::Random { .. } => "random",
    }
}

fn run_pipeline(common: Common, teacher: TeacherArg, mode: Mode) -> Outcome<()> {
    let cfg = load_config(&common)?;
    if let Some(p) = &teacher.teacher {
        require(p, "teacher checkpoint")?;
    }
    let tag = mode_tag(mode);
    let command = match mode {
        Mode::Auto => "auto".to_string(),
        _ => format!("stark-{tag}"),
    };
    let mut out = Outputs::create(&common.out_dir, &command, &cfg)?;
    let data = prepare_data(&cfg)?;
    let teacher = teacher_or_train(&teacher, &cfg, &data, &mut out)?;
    let run = run_stark(&cfg, &data, &teacher, mode)?;
    let t = &run.report.timings;
    out.time("trial", t.trial);
    out.time("sparsify", t.sparsify);
    out.time("actual", t.actual);
    out.checkpoint("trial_init.strk", &run.trial.init)?;
    write_report(&mut out, "trial_report.jsonl", &run.trial.report)?;
    if let Some(scores) = &run.scores {
        write_scores(&mut out, scores, cfg.scoring.bins)?;
    }
    for (i, (mask, actual)) in run.masks.iter().zip(&run.report.actual).enumerate() {
        out.json(&format!("masks/{tag}-{i}.json"), mask)?;
        if let Some(r) = &actual.report {
            write_report(&mut out, &format!("reports/{tag}-{i}.jsonl"), r)?;
        }
    }
    let student = Checkpoint {
        params: run.student,
        gates: None,
        rng: run.trial.init.rng.clone(),
        config_digest: run.trial.init.config_digest.clone(),
    };
    out.checkpoint(&format!("student-{tag}.strk"), &student)?;
    out.text(&format!("pipeline-{tag}.json"), &run.report.to_json()?)?;
    log::info!(
        "{tag}: trial {:.4}, chosen sparsity {} -> {:.4}",
        run.report.trial_dev_metric,
        run.report.chosen_sparsity,
        run.report.final_dev_metric
    );
    out.finish()
}
