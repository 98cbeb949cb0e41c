//! Subcommand bodies. Each validates the resolved config, does its work in
//! memory, and only then writes artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lcr2s::data::{generate_with_holdout, load_features, save_features, Dataset};
use lcr2s::eval::{evaluate, EvalFeatures, MetricsReport};
use lcr2s::gradsuite::{run_suite, TargetReport, TARGETS};
use lcr2s::training::{
    train_student, train_teacher, Checkpoint, EpochRecord, Stage, StudentParams, TeacherParams,
};
use lcr2s::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const TRAIN_FEATURES: &str = "train.lcrf";
pub const EVAL_FEATURES: &str = "eval.lcrf";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Training and evaluation sets: files when configured, otherwise the
/// synthetic split.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), Error> {
    let synthetic = || generate_with_holdout(&cfg.synthetic(), cfg.data.holdout_identities);
    match (&cfg.data.train_path, &cfg.data.eval_path) {
        (Some(t), Some(e)) => Ok((load_features(t)?, load_features(e)?)),
        (Some(t), None) => Ok((load_features(t)?, synthetic()?.1)),
        (None, Some(e)) => Ok((synthetic()?.0, load_features(e)?)),
        (None, None) => synthetic(),
    }
}

/// The resolved config with its hash and seed, stored next to outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

fn snapshot(cfg: &RunConfig) -> String {
    let s = ConfigSnapshot {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    serde_json::to_string_pretty(&s).expect("snapshot serializes") + "\n"
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config_hash: String,
    pub seed: u64,
    pub train_instances: usize,
    pub train_pairs: usize,
    pub eval_instances: usize,
    pub eval_pairs: usize,
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary, Error> {
    cfg.validate()?;
    let (train, test) = generate_with_holdout(&cfg.synthetic(), cfg.data.holdout_identities)?;
    let summary = SynthSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        train_instances: train.instances().len(),
        train_pairs: train.pairs().len(),
        eval_instances: test.instances().len(),
        eval_pairs: test.pairs().len(),
    };
    ensure_dir(out)?;
    save_features(&train, out.join(TRAIN_FEATURES))?;
    save_features(&test, out.join(EVAL_FEATURES))?;
    write(
        &out.join("synth.json"),
        serde_json::to_string_pretty(&summary).expect("serializes") + "\n",
    )?;
    write(&out.join("synth_config.json"), snapshot(cfg))?;
    Ok(summary)
}

/// CSV with a provenance comment line.
pub fn trace_csv(cfg: &RunConfig, trace: &[EpochRecord]) -> String {
    let mut s = format!(
        "# config_hash={} seed={}\nepoch,mean_loss,lr\n",
        cfg.hash(),
        cfg.seed
    );
    for r in trace {
        writeln!(s, "{},{},{}", r.epoch, r.mean_loss, r.lr).expect("string write");
    }
    s
}

pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochRecord>,
}

impl StageRun {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.mean_loss)
    }
}

pub fn run_teacher(cfg: &RunConfig, train: &Dataset) -> Result<StageRun, Error> {
    let out = train_teacher(train, &cfg.train_config())?;
    Ok(StageRun {
        checkpoint: Checkpoint::from_teacher(&out.params, &cfg.hash(), cfg.seed),
        trace: out.trace,
    })
}

pub fn run_student(
    cfg: &RunConfig,
    train: &Dataset,
    teacher: &TeacherParams,
) -> Result<StageRun, Error> {
    let out = train_student(train, teacher, &cfg.train_config())?;
    Ok(StageRun {
        checkpoint: Checkpoint::from_student(&out.params, &cfg.hash(), cfg.seed),
        trace: out.trace,
    })
}

fn write_stage(cfg: &RunConfig, out: &Path, run: &StageRun) -> Result<PathBuf, Error> {
    let (ckpt, name) = match run.checkpoint.stage {
        Stage::Teacher => (TEACHER_CKPT, "teacher"),
        Stage::Student => (STUDENT_CKPT, "student"),
    };
    ensure_dir(out)?;
    let path = out.join(ckpt);
    run.checkpoint.save(&path)?;
    write(
        &out.join(format!("{name}_trace.csv")),
        trace_csv(cfg, &run.trace),
    )?;
    write(&out.join(format!("{name}_config.json")), snapshot(cfg))?;
    Ok(path)
}

pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<StageRun, Error> {
    cfg.validate()?;
    let (train, _) = datasets(cfg)?;
    let run = run_teacher(cfg, &train)?;
    write_stage(cfg, out, &run)?;
    Ok(run)
}

pub fn load_teacher(path: &Path) -> Result<TeacherParams, Error> {
    Checkpoint::load(path)?.teacher()
}

pub fn cmd_train_student(
    cfg: &RunConfig,
    teacher_ckpt: Option<&Path>,
    out: &Path,
) -> Result<StageRun, CliError> {
    let Some(teacher_ckpt) = teacher_ckpt else {
        return Err(CliError::Usage(
            "train-student needs --teacher-ckpt PATH".into(),
        ));
    };
    cfg.validate()?;
    let teacher = load_teacher(teacher_ckpt)?;
    let (train, _) = datasets(cfg)?;
    let run = run_student(cfg, &train, &teacher)?;
    write_stage(cfg, out, &run)?;
    Ok(run)
}

/// Encoders to evaluate: a student's, or a teacher's without its fusion.
pub fn encoders_of(ckpt: &Checkpoint) -> Result<StudentParams, Error> {
    match ckpt.stage {
        Stage::Student => ckpt.student(),
        Stage::Teacher => Ok(StudentParams::from_teacher(&ckpt.teacher()?)),
    }
}

pub fn run_eval(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    test: &Dataset,
) -> Result<MetricsReport, Error> {
    let p = encoders_of(ckpt)?;
    evaluate(&p.image, &p.text, test, cfg.eval.features)
}

/// The structured metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_stage: Stage,
    /// Hash of the config that trained the checkpoint.
    pub checkpoint_config_hash: String,
    pub features: EvalFeatures,
    pub metrics: MetricsReport,
}

impl MetricsFile {
    pub fn to_flat(&self) -> String {
        format!(
            "config_hash={}\nseed={}\ncheckpoint_stage={}\ncheckpoint_config_hash={}\n{}",
            self.config_hash,
            self.seed,
            self.checkpoint_stage,
            self.checkpoint_config_hash,
            self.metrics.to_flat()
        )
    }
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>, out: &Path) -> Result<MetricsFile, CliError> {
    let Some(ckpt) = ckpt else {
        return Err(CliError::Usage("eval needs --ckpt PATH".into()));
    };
    cfg.validate()?;
    let ckpt = Checkpoint::load(ckpt)?;
    let (_, test) = datasets(cfg)?;
    let metrics = run_eval(cfg, &ckpt, &test)?;
    let report = MetricsFile {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        checkpoint_stage: ckpt.stage,
        checkpoint_config_hash: ckpt.config_hash.clone(),
        features: cfg.eval.features,
        metrics,
    };
    ensure_dir(out)?;
    write(
        &out.join("metrics.json"),
        serde_json::to_string_pretty(&report).expect("serializes") + "\n",
    )?;
    write(&out.join("metrics.txt"), report.to_flat())?;
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradcheckFile {
    pub config_hash: String,
    pub seed: u64,
    pub corrupted: bool,
    pub targets: Vec<GradcheckRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub target: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl From<TargetReport> for GradcheckRow {
    fn from(r: TargetReport) -> Self {
        GradcheckRow {
            target: r.target,
            instances: r.instances,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        }
    }
}

/// Runs the suite and writes its report; failing targets are reported in
/// the result, not as an error.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    targets: &[String],
    corrupt: bool,
    out: &Path,
) -> Result<GradcheckFile, Error> {
    cfg.validate()?;
    let chosen: Vec<&str> = if targets.is_empty() {
        TARGETS.to_vec()
    } else {
        targets.iter().map(String::as_str).collect()
    };
    if let Some(bad) = chosen.iter().find(|t| !TARGETS.contains(t)) {
        return Err(Error::Config(format!(
            "unknown gradcheck target {bad:?}; known: {}",
            TARGETS.join(", ")
        )));
    }
    let reports = run_suite(&chosen, cfg.seed, corrupt)?;
    let file = GradcheckFile {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        corrupted: corrupt,
        targets: reports.into_iter().map(GradcheckRow::from).collect(),
    };
    ensure_dir(out)?;
    write(
        &out.join("gradcheck.json"),
        serde_json::to_string_pretty(&file).expect("serializes") + "\n",
    )?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_text: usize,
    pub k_image: usize,
    pub config_hash: String,
    pub teacher_final_loss: f64,
    pub student_final_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepFile {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

fn cell_config(cfg: &RunConfig, kt: usize, kv: usize) -> RunConfig {
    let mut c = cfg.clone();
    c.train.support.k_text = kt;
    c.train.support.k_image = kv;
    c
}

pub fn cell_dir(out: &Path, kt: usize, kv: usize) -> PathBuf {
    out.join(format!("kt{kt}_kv{kv}"))
}

struct Cell {
    cfg: RunConfig,
    teacher: StageRun,
    student: StageRun,
    metrics: MetricsReport,
}

fn run_cell(cfg: RunConfig, train: &Dataset, test: &Dataset) -> Result<Cell, Error> {
    let teacher = run_teacher(&cfg, train)?;
    let student = run_student(&cfg, train, &teacher.checkpoint.teacher()?)?;
    let metrics = run_eval(&cfg, &student.checkpoint, test)?;
    Ok(Cell {
        cfg,
        teacher,
        student,
        metrics,
    })
}

/// Full teacher, student and eval pipeline per `(k_text, k_image)` cell.
/// Up to `threads` cells run at once; results do not depend on it.
pub fn cmd_sweep_support(
    cfg: &RunConfig,
    kt_list: &[usize],
    kv_list: &[usize],
    threads: usize,
    out: &Path,
) -> Result<SweepFile, Error> {
    if kt_list.is_empty() || kv_list.is_empty() {
        return Err(Error::Config("sweep lists must be non-empty".into()));
    }
    let configs: Vec<RunConfig> = kt_list
        .iter()
        .flat_map(|&kt| kv_list.iter().map(move |&kv| (kt, kv)))
        .map(|(kt, kv)| cell_config(cfg, kt, kv))
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let (train, test) = datasets(cfg)?;
    let mut cells = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(threads.max(1)) {
        let done: Vec<Result<Cell, Error>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|c| {
                    let (train, test) = (&train, &test);
                    s.spawn(move || run_cell(c.clone(), train, test))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep cell panicked"))
                .collect()
        });
        for c in done {
            cells.push(c?);
        }
    }
    for c in &cells {
        let dir = cell_dir(out, c.cfg.train.support.k_text, c.cfg.train.support.k_image);
        write_stage(&c.cfg, &dir, &c.teacher)?;
        write_stage(&c.cfg, &dir, &c.student)?;
    }
    let rows: Vec<SweepRow> = cells
        .iter()
        .map(|c| SweepRow {
            k_text: c.cfg.train.support.k_text,
            k_image: c.cfg.train.support.k_image,
            config_hash: c.cfg.hash(),
            teacher_final_loss: c.teacher.final_loss(),
            student_final_loss: c.student.final_loss(),
            metrics: c.metrics,
        })
        .collect();
    let file = SweepFile {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows,
    };
    let mut csv = format!(
        "# config_hash={} seed={}\nk_text,k_image,rank1,rank5,rank10,map,teacher_final_loss,student_final_loss\n",
        file.config_hash, file.seed
    );
    for r in &file.rows {
        let m = &r.metrics;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.k_text,
            r.k_image,
            m.rank1,
            m.rank5,
            m.rank10,
            m.map,
            r.teacher_final_loss,
            r.student_final_loss
        )
        .expect("string write");
    }
    write(&out.join("sweep.csv"), csv)?;
    write(
        &out.join("sweep.json"),
        serde_json::to_string_pretty(&file).expect("serializes") + "\n",
    )?;
    Ok(file)
}
