//! Argument parsing and dispatch for the `lcr2s` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use crate::commands::{self, SweepRow};
use crate::{threads_from_env, CliError, RunConfig};
use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "lcr2s",
    version,
    about = "Teacher-student cross-modal identity matching lab"
)]
struct Cli {
    /// JSON config file; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (data synthesis and every training stream).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Dot-path override, e.g. `--set train.teacher.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for data.synthetic.n_identities.
    #[arg(long, global = true)]
    n_identities: Option<usize>,
    /// Distillation terms: baseline, or any of t, i, r (e.g. tir).
    #[arg(long, global = true)]
    kd_mode: Option<String>,
    /// Fusion strategy: mhaf, mean or cross-attention.
    #[arg(long, global = true)]
    fusion: Option<String>,
    /// Share one fusion module between modalities.
    #[arg(long, global = true)]
    mhaf_shared: Option<bool>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic training and holdout feature files.
    Synth,
    /// Train the teacher; writes a checkpoint, a loss trace and the config.
    TrainTeacher {
        /// Training feature file (default: synthetic).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the student against a frozen teacher.
    TrainStudent {
        #[arg(long)]
        teacher_ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: texts query the image gallery.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluation feature file (default: synthetic holdout).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Comma-separated subset of targets.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Full pipeline per support-set size.
    SweepSupport {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        kt_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        kv_list: Vec<usize>,
    },
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::from_file(p).map_err(CliError::from)?,
        None => RunConfig::default(),
    };
    let mut sets = cli.sets.clone();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push(format!("{key}={v}"));
        }
    };
    flag("seed", cli.seed.map(|s| s.to_string()));
    flag(
        "data.synthetic.n_identities",
        cli.n_identities.map(|n| n.to_string()),
    );
    flag(
        "train.student.kd_mode",
        cli.kd_mode.as_ref().map(|m| format!("{m:?}")),
    );
    flag(
        "train.model.mhaf.fusion",
        cli.fusion.as_ref().map(|f| format!("{f:?}")),
    );
    flag(
        "train.model.mhaf.shared",
        cli.mhaf_shared.map(|b| b.to_string()),
    );
    match &cli.command {
        Command::TrainTeacher { data: Some(p) } | Command::TrainStudent { data: Some(p), .. } => {
            sets.push(format!("data.train_path={:?}", p.display().to_string()));
        }
        Command::Eval { data: Some(p), .. } => {
            sets.push(format!("data.eval_path={:?}", p.display().to_string()));
        }
        _ => {}
    }
    let cfg = base.with_overrides(&sets).map_err(CliError::from)?;
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

fn print_rows(rows: &[SweepRow]) {
    println!("k_text k_image   rank1   rank5  rank10     map");
    for r in rows {
        let m = &r.metrics;
        println!(
            "{:>6} {:>7} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.k_text, r.k_image, m.rank1, m.rank5, m.rank10, m.map
        );
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli)?;
    let out = cli.out.as_path();
    println!("config_hash={} seed={}", cfg.hash(), cfg.seed);
    match &cli.command {
        Command::Synth => {
            let s = commands::synth(&cfg, out).map_err(CliError::from)?;
            println!(
                "train: {} instances, {} pairs; eval: {} instances, {} pairs",
                s.train_instances, s.train_pairs, s.eval_instances, s.eval_pairs
            );
            println!("wrote {}", out.join(commands::TRAIN_FEATURES).display());
            println!("wrote {}", out.join(commands::EVAL_FEATURES).display());
        }
        Command::TrainTeacher { .. } => {
            let r = commands::cmd_train_teacher(&cfg, out).map_err(CliError::from)?;
            println!("teacher final mean loss {}", r.final_loss());
            println!("wrote {}", out.join(commands::TEACHER_CKPT).display());
        }
        Command::TrainStudent { teacher_ckpt, .. } => {
            let r = commands::cmd_train_student(&cfg, teacher_ckpt.as_deref(), out)?;
            println!("student final mean loss {}", r.final_loss());
            println!("wrote {}", out.join(commands::STUDENT_CKPT).display());
        }
        Command::Eval { ckpt, .. } => {
            let r = commands::cmd_eval(&cfg, ckpt.as_deref(), out)?;
            print!("{}", r.metrics.to_flat());
        }
        Command::Gradcheck {
            targets,
            corrupt_gradient,
        } => {
            let r = commands::cmd_gradcheck(&cfg, targets, *corrupt_gradient, out)
                .map_err(CliError::from)?;
            println!(
                "{:<12} {:>9} {:>14}  result",
                "target", "instances", "max_rel_error"
            );
            for t in &r.targets {
                let verdict = if t.passed { "pass" } else { "FAIL" };
                println!(
                    "{:<12} {:>9} {:>14.3e}  {verdict}",
                    t.target, t.instances, t.max_rel_error
                );
            }
            let failed: Vec<&str> = r
                .targets
                .iter()
                .filter(|t| !t.passed)
                .map(|t| t.target.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(CliError::GradCheck(failed.join(", ")).into());
            }
        }
        Command::SweepSupport { kt_list, kv_list } => {
            let threads = threads_from_env()?;
            let r = commands::cmd_sweep_support(&cfg, kt_list, kv_list, threads, out)
                .map_err(CliError::from)?;
            print_rows(&r.rows);
            println!("wrote {}", out.join("sweep.csv").display());
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = threads_from_env().context("reading the environment") {
        eprintln!("error: {e:#}");
        return 1;
    }
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.downcast_ref::<CliError>().map_or(1, CliError::exit_code)
        }
    }
}
