//! The gradient suite: every loss, the fusion module and the encoders checked
//! against central differences on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoders::{init_encoder_with, EncoderVars};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_hooked, GradCheckReport, DEFAULT_STEP};
use crate::losses::{
    cmpm_loss, cr_loss, cross_stage_cmpm, kd_feature_loss, kd_relation_loss, multi_stage_cmpm,
    ranking_loss, student_loss, student_ms_cmpm, teacher_loss, CmpmConfig, KdMode, LossWeights,
    StudentFeatures, TeacherFeatures,
};
use crate::mhaf::{init_mhaf, AttentionScale, MhafVars};
use crate::tensor::{Tape, Tensor, Var};

/// Relative-error threshold for a pass.
pub const TOLERANCE: f64 = 1e-4;

/// Random instances per target.
pub const INSTANCES: usize = 3;

pub const TARGETS: [&str; 12] = [
    "cmpm",
    "ranking",
    "multi_stage",
    "cross_stage",
    "teacher",
    "student_ms",
    "kd_feature",
    "kd_relation",
    "student",
    "cr",
    "mhaf",
    "encode",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetReport {
    pub target: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("sized")
}

/// Instance shapes: batch size, low width, high width, head count.
fn shape_of(instance: usize) -> (usize, usize, usize, usize) {
    [(4, 3, 4, 1), (6, 5, 8, 2), (8, 6, 16, 4)][instance % 3]
}

/// Each identity appears twice, so every row has positives and negatives.
fn labels(n: usize) -> Vec<u32> {
    (0..n as u32).map(|i| i / 2).collect()
}

fn teacher<'t>(v: &[Var<'t>]) -> TeacherFeatures<'t> {
    TeacherFeatures {
        vl: v[0],
        vh: v[1],
        vr: v[2],
        tl: v[3],
        th: v[4],
        tr: v[5],
    }
}

fn student<'t>(v: &[Var<'t>]) -> StudentFeatures<'t> {
    StudentFeatures {
        vl: v[0],
        vh: v[1],
        tl: v[2],
        th: v[3],
    }
}

fn constants<'t>(tape: &'t Tape, ts: &[Tensor]) -> Vec<Var<'t>> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

/// Checks one instance of `target`. With `corrupt`, the analytic gradient is
/// perturbed before comparison, which must make the check fail.
pub fn check_instance(
    target: &str,
    seed: u64,
    instance: usize,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance as u64 + 1);
    let (n, d1, d, heads) = shape_of(instance);
    let y = labels(n);
    let cfg = CmpmConfig::default();
    let w = LossWeights::default();
    let hook = |g: &mut [Tensor]| {
        if corrupt {
            let v = &mut g[0].data_mut()[0];
            *v += 0.1 * (1.0 + v.abs());
        }
    };
    let h = DEFAULT_STEP;
    let pair = |rng: &mut ChaCha8Rng| vec![random(rng, n, d), random(rng, n, d)];
    let teacher_inputs = |rng: &mut ChaCha8Rng| {
        vec![
            random(rng, n, d1),
            random(rng, n, d),
            random(rng, n, d),
            random(rng, n, d1),
            random(rng, n, d),
            random(rng, n, d),
        ]
    };
    let student_inputs = |rng: &mut ChaCha8Rng| {
        vec![
            random(rng, n, d1),
            random(rng, n, d),
            random(rng, n, d1),
            random(rng, n, d),
        ]
    };
    match target {
        "cmpm" => finite_diff_check_hooked(
            |_, v| cmpm_loss(v[0], v[1], &y, &cfg),
            &pair(&mut rng),
            h,
            hook,
        ),
        "ranking" => finite_diff_check_hooked(
            |_, v| ranking_loss(v[0], v[1], &y, w.alpha),
            &pair(&mut rng),
            h,
            hook,
        ),
        "multi_stage" => finite_diff_check_hooked(
            |_, v| multi_stage_cmpm(&teacher(v), &y, &cfg),
            &teacher_inputs(&mut rng),
            h,
            hook,
        ),
        "cross_stage" => finite_diff_check_hooked(
            |_, v| cross_stage_cmpm(&teacher(v), &y, &cfg),
            &teacher_inputs(&mut rng),
            h,
            hook,
        ),
        "teacher" => finite_diff_check_hooked(
            |_, v| teacher_loss(&teacher(v), &y, &w, &cfg, false),
            &teacher_inputs(&mut rng),
            h,
            hook,
        ),
        "cr" => finite_diff_check_hooked(
            |_, v| cr_loss(&teacher(v)),
            &teacher_inputs(&mut rng),
            h,
            hook,
        ),
        "student_ms" => finite_diff_check_hooked(
            |_, v| student_ms_cmpm(&student(v), &y, &cfg),
            &student_inputs(&mut rng),
            h,
            hook,
        ),
        "kd_feature" | "kd_relation" | "student" => {
            // Teacher features are fixed; only the student side is perturbed.
            let fixed = teacher_inputs(&mut rng);
            let inputs = student_inputs(&mut rng);
            finite_diff_check_hooked(
                |tape, v| {
                    let t = teacher(&constants(tape, &fixed));
                    let s = student(v);
                    match target {
                        "kd_feature" => kd_feature_loss(&s, &t),
                        "kd_relation" => kd_relation_loss(&s, &t),
                        _ => student_loss(&s, Some(&t), &y, &w, KdMode::ALL, &cfg),
                    }
                },
                &inputs,
                h,
                hook,
            )
        }
        "mhaf" => {
            let p = init_mhaf(&mut rng, d, heads)?;
            let mut inputs = vec![random(&mut rng, 3, d)];
            inputs.extend(p.tensors().iter().map(|(_, t)| (*t).clone()));
            let weight = random(&mut rng, 1, d).reshape(&[d])?;
            finite_diff_check_hooked(
                |tape, v| {
                    let m = MhafVars {
                        heads,
                        wx: v[1],
                        wy: v[2],
                        wz: v[3],
                        fc_w: v[4],
                        fc_b: v[5],
                    };
                    m.fuse(v[0], AttentionScale::SqrtD)?
                        .mul(tape.constant(weight.clone()))?
                        .sum()
                },
                &inputs,
                h,
                hook,
            )
        }
        "encode" => {
            let input_dim = d1 + 1;
            let p = init_encoder_with(&mut rng, input_dim, d1, d)?;
            let mut inputs = vec![random(&mut rng, n, input_dim)];
            inputs.extend(p.tensors().iter().map(|(_, t)| (*t).clone()));
            let (wl, wh) = (random(&mut rng, n, d1), random(&mut rng, n, d));
            finite_diff_check_hooked(
                |tape, v| {
                    let enc = EncoderVars {
                        w1: v[1],
                        b1: v[2],
                        w2: v[3],
                        b2: v[4],
                    };
                    let s = enc.encode(v[0])?;
                    let low = s.low.mul(tape.constant(wl.clone()))?.sum()?;
                    s.high.mul(tape.constant(wh.clone()))?.sum()?.add(low)
                },
                &inputs,
                h,
                hook,
            )
        }
        other => Err(Error::Config(format!(
            "unknown gradcheck target {other:?}; known: {}",
            TARGETS.join(", ")
        ))),
    }
}

/// Worst relative error of `target` over [`INSTANCES`] instances.
pub fn check_target(target: &str, seed: u64, corrupt: bool) -> Result<TargetReport> {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        worst = worst.max(check_instance(target, seed, i, corrupt)?.max_rel_error);
    }
    Ok(TargetReport {
        target: target.to_string(),
        instances: INSTANCES,
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    })
}

pub fn run_suite(targets: &[&str], seed: u64, corrupt: bool) -> Result<Vec<TargetReport>> {
    targets
        .iter()
        .map(|t| check_target(t, seed, corrupt))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_target() {
        assert!(matches!(
            check_target("nope", 0, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corruption_is_caught() {
        let r = check_target("cmpm", 0, true).unwrap();
        assert!(!r.passed, "{r:?}");
    }
}
