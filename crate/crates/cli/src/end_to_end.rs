//! End-to-end behavior of the subcommands, through the command functions
//! and the argument parser.

use std::ffi::OsString;
use std::path::Path;

use lcr2s::data::load_features;
use lcr2s::eval::evaluate;
use lcr2s::training::{rng_for, Checkpoint, RngStream, StudentParams};

use crate::app::run_cli;
use crate::commands::{self, MetricsFile};
use crate::RunConfig;

/// Runs the command line in-process and returns its exit code.
fn cli<A: AsRef<std::ffi::OsStr>>(args: &[A]) -> u8 {
    let mut argv = vec![OsString::from("lcr2s")];
    argv.extend(args.iter().map(|a| a.as_ref().to_os_string()));
    run_cli(argv)
}

fn tiny() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            "data.synthetic.n_identities=8",
            "data.synthetic.input_dim=12",
            "data.holdout_identities=4",
            "train.model.d=8",
            "train.model.d1=6",
            "train.model.mhaf.heads=2",
            "train.sampler.p=4",
            "train.sampler.k=2",
            "train.teacher.epochs=2",
            "train.teacher.decay_epochs=[1]",
            "train.student.epochs=2",
            "train.student.decay_epochs=[1]",
        ])
        .unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

#[test]
fn synth_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let s = commands::synth(&RunConfig::default(), dir.path()).unwrap();
    assert_eq!(s.train_pairs, 64 * 4);
    let ds = load_features(dir.path().join(commands::TRAIN_FEATURES)).unwrap();
    assert_eq!(ds.pairs().len(), 64 * 4);

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(
            cli(&[
                OsString::from("synth"),
                "--seed".into(),
                "7".into(),
                "--out".into(),
                out.into()
            ]),
            0
        );
    }
    for f in [
        commands::TRAIN_FEATURES,
        commands::EVAL_FEATURES,
        "synth.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn invalid_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let out = out.to_str().unwrap();
    assert_eq!(cli(&["synth", "--n-identities", "0", "--out", out]), 1);
    assert_eq!(
        cli(&[
            "train-teacher",
            "--set",
            "train.model.mhaf.heads=7",
            "--out",
            out
        ]),
        1
    );
    assert_eq!(cli(&["synth", "--set", "data.colour=1", "--out", out]), 1);
    assert_eq!(cli(&["synth", "--frobnicate"]), 1);
    assert!(!Path::new(out).exists());
}

#[test]
fn student_needs_teacher_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        cli(&[
            OsString::from("train-student"),
            "--out".into(),
            dir.path().into()
        ]),
        1
    );
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn flags_select_ablation_rows() {
    let d = RunConfig::default();
    assert_eq!(d.train.model.mhaf.heads, 16);
    assert_eq!((d.train.support.k_text, d.train.support.k_image), (1, 1));
    assert_eq!(d.train.weights.lambda1, 1.0);
    for mode in ["baseline", "t", "i", "r", "tr", "ir", "ti", "tir"] {
        let c = d
            .with_overrides(&[format!("train.student.kd_mode={mode}")])
            .unwrap();
        assert_eq!(c.train.student.kd_mode.to_string(), mode);
    }
    for fusion in ["mean", "cross-attention", "mhaf"] {
        let c = d
            .with_overrides(&[
                format!("train.model.mhaf.fusion={fusion}"),
                "train.model.mhaf.shared=false".into(),
            ])
            .unwrap();
        assert!(!c.train.model.mhaf.shared);
        assert_eq!(
            serde_json::to_value(c.train.model.mhaf.fusion).unwrap(),
            fusion
        );
    }
    assert!(d.with_overrides(&["train.student.kd_mode=tt"]).is_err());
}

#[test]
fn pipeline_through_binary_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let run = |out: &Path| {
        let go = |args: &[&str]| {
            let mut argv = vec![
                OsString::from("--config"),
                cfg.clone().into(),
                "--out".into(),
                out.into(),
            ];
            argv.extend(args.iter().map(OsString::from));
            assert_eq!(cli(&argv), 0, "{args:?}");
        };
        go(&["train-teacher"]);
        let teacher = out.join(commands::TEACHER_CKPT);
        go(&[
            "train-student",
            "--kd-mode",
            "tir",
            "--teacher-ckpt",
            teacher.to_str().unwrap(),
        ]);
        let student = out.join(commands::STUDENT_CKPT);
        go(&["eval", "--ckpt", student.to_str().unwrap()]);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    for f in [
        "teacher.ckpt",
        "student.ckpt",
        "teacher_trace.csv",
        "student_trace.csv",
        "metrics.json",
        "metrics.txt",
        "student_config.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let hash = tiny()
        .with_overrides(&["train.student.kd_mode=tir"])
        .unwrap()
        .hash();
    let trace = std::fs::read_to_string(a.join("student_trace.csv")).unwrap();
    assert!(trace.starts_with(&format!(
        "# config_hash={hash} seed=0\nepoch,mean_loss,lr\n"
    )));
    assert_eq!(trace.lines().count(), 2 + 2);
    let report: MetricsFile =
        serde_json::from_str(&std::fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.config_hash, tiny().hash());
    assert_eq!(report.checkpoint_config_hash, hash);
    assert_eq!(
        serde_json::from_str::<MetricsFile>(&serde_json::to_string(&report).unwrap()).unwrap(),
        report
    );
    assert_eq!(
        Checkpoint::load(a.join("student.ckpt"))
            .unwrap()
            .config_hash,
        hash
    );
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = rng_for(0, RngStream::StudentInit);
    let s = StudentParams::init(&mut rng, 5, 4, 8).unwrap();
    let ck = dir.path().join("s.ckpt");
    Checkpoint::from_student(&s, "x", 0).save(&ck).unwrap();
    let eval = [
        OsString::from("eval"),
        "--ckpt".into(),
        ck.clone().into(),
        "--out".into(),
        dir.path().into(),
    ];
    assert_eq!(cli(&eval), 1);
    assert!(!dir.path().join("metrics.json").exists());

    std::fs::write(&ck, b"LCR2S-CKPT 1\nstage teacher\n").unwrap();
    assert_eq!(cli(&eval), 3);
    assert_eq!(
        cli(&[OsString::from("eval"), "--out".into(), dir.path().into()]),
        1
    );
}

#[test]
fn random_student_is_near_chance() {
    let cfg = RunConfig::default();
    let (_, test) = commands::datasets(&cfg).unwrap();
    let chance = 1.0 / cfg.data.holdout_identities as f64;
    let mut total = 0.0;
    for seed in 0..5 {
        let mut rng = rng_for(seed, RngStream::StudentInit);
        let s = StudentParams::init(&mut rng, 32, 32, 64).unwrap();
        total += evaluate(&s.image, &s.text, &test, cfg.eval.features)
            .unwrap()
            .rank1;
    }
    let mean = total / 5.0;
    assert!(
        mean > chance / 3.0 && mean < chance * 3.0,
        "mean rank1 {mean}, chance {chance}"
    );
}

#[test]
fn gradcheck_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(cli(&["gradcheck", "--targets", "cmpm", "--out", out]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap())
            .unwrap();
    let targets = report["targets"].as_array().unwrap();
    assert_eq!(targets.len(), 1);
    assert_eq!(targets[0]["target"], "cmpm");

    assert_eq!(
        cli(&[
            "gradcheck",
            "--targets",
            "cmpm",
            "--corrupt-gradient",
            "--out",
            out
        ]),
        2
    );
    assert_eq!(cli(&["gradcheck", "--targets", "nope", "--out", out]), 1);
}

#[test]
fn sweep_cells_match_standalone_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let sweep = commands::cmd_sweep_support(&cfg, &[0, 1, 2, 3], &[1], 2, dir.path()).unwrap();
    assert_eq!(sweep.rows.len(), 4);
    assert!(sweep
        .rows
        .iter()
        .all(|r| r.teacher_final_loss.is_finite() && r.student_final_loss.is_finite()));

    // Same table with another thread count.
    let again =
        commands::cmd_sweep_support(&cfg, &[0, 1, 2, 3], &[1], 1, &dir.path().join("again"))
            .unwrap();
    assert_eq!(again.rows, sweep.rows);

    // The default cell is the standalone pipeline.
    let solo = dir.path().join("solo");
    commands::cmd_train_teacher(&cfg, &solo).unwrap();
    commands::cmd_train_student(&cfg, Some(&solo.join(commands::TEACHER_CKPT)), &solo).unwrap();
    let report = commands::cmd_eval(&cfg, Some(&solo.join(commands::STUDENT_CKPT)), &solo).unwrap();
    let cell = &sweep.rows[1];
    assert_eq!((cell.k_text, cell.k_image), (1, 1));
    assert_eq!(cell.config_hash, cfg.hash());
    assert_eq!(cell.metrics, report.metrics);
    let cell_dir = commands::cell_dir(dir.path(), 1, 1);
    for f in ["teacher.ckpt", "student.ckpt", "student_trace.csv"] {
        assert_eq!(
            std::fs::read(cell_dir.join(f)).unwrap(),
            std::fs::read(solo.join(f)).unwrap(),
            "{f}"
        );
    }
}
