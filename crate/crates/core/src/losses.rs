//! Training objectives. Every loss builds on a [`Tape`](crate::Tape) and
//! returns a one-element [`Var`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmpmConfig {
    /// Guard added to the target distribution inside the log.
    pub epsilon: f64,
    /// Normalize the query side as well as the key side.
    pub normalize_both: bool,
}

impl Default for CmpmConfig {
    fn default() -> Self {
        CmpmConfig {
            epsilon: 1e-8,
            normalize_both: false,
        }
    }
}

impl CmpmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "cmpm epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Cross-stage weight in the teacher objective.
    pub lambda1: f64,
    /// Student CMPM weight.
    pub lambda2: f64,
    /// Distillation weight.
    pub lambda3: f64,
    /// Ranking margin.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.9,
            lambda3: 1.0,
            alpha: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("alpha", self.alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Teacher embeddings of one batch: low, high and enriched stages.
#[derive(Clone, Copy, Debug)]
pub struct TeacherFeatures<'t> {
    pub vl: Var<'t>,
    pub vh: Var<'t>,
    pub vr: Var<'t>,
    pub tl: Var<'t>,
    pub th: Var<'t>,
    pub tr: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct StudentFeatures<'t> {
    pub vl: Var<'t>,
    pub vh: Var<'t>,
    pub tl: Var<'t>,
    pub th: Var<'t>,
}

/// Which distillation terms the student objective includes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct KdMode {
    /// Text feature distillation `MSE(Th_s, Tr)`.
    pub text: bool,
    /// Image feature distillation `MSE(Vh_s, Vr)`.
    pub image: bool,
    /// Relation distillation.
    pub relation: bool,
}

impl KdMode {
    pub const BASELINE: KdMode = KdMode {
        text: false,
        image: false,
        relation: false,
    };
    pub const ALL: KdMode = KdMode {
        text: true,
        image: true,
        relation: true,
    };

    pub fn needs_teacher(&self) -> bool {
        self.text || self.image || self.relation
    }

    /// Every mode in table order.
    pub fn variants() -> [KdMode; 8] {
        ["baseline", "t", "i", "r", "tr", "ir", "ti", "tir"].map(|s| s.parse().expect("valid name"))
    }
}

impl fmt::Display for KdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.needs_teacher() {
            return f.write_str("baseline");
        }
        for (on, c) in [(self.text, 't'), (self.image, 'i'), (self.relation, 'r')] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for KdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "baseline" {
            return Ok(KdMode::BASELINE);
        }
        let mut mode = KdMode::BASELINE;
        for c in s.chars() {
            let flag = match c {
                't' => &mut mode.text,
                'i' => &mut mode.image,
                'r' => &mut mode.relation,
                _ => return Err(Error::Config(format!("unknown kd mode {s:?}"))),
            };
            if std::mem::replace(flag, true) {
                return Err(Error::Config(format!("kd mode {s:?} repeats {c:?}")));
            }
        }
        if s.is_empty() {
            return Err(Error::Config("empty kd mode".into()));
        }
        Ok(mode)
    }
}

impl Serialize for KdMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for KdMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn rows_of(op: &'static str, v: Var<'_>) -> Result<(usize, usize)> {
    match v.shape()[..] {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(
            op,
            format!("expected a matrix, got shape {s:?}"),
        )),
    }
}

fn check_pair(op: &'static str, v: Var<'_>, t: Var<'_>, labels: Option<&[u32]>) -> Result<usize> {
    let (n, k) = rows_of(op, v)?;
    let (nt, kt) = rows_of(op, t)?;
    if (n, k) != (nt, kt) {
        return Err(Error::dim(op, format!("shapes [{n}x{k}] and [{nt}x{kt}]")));
    }
    if n == 0 {
        return Err(Error::Contract(format!("{op} needs a nonempty batch")));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::dim(op, format!("{} labels for {n} rows", l.len())));
        }
    }
    Ok(n)
}

/// One CMPM direction: KL(p_i ‖ q_i) averaged over queries, where `p_i` is
/// the softmax over `query_i · key_jᵀ` with unit-norm keys.
fn cmpm_direction<'t>(
    query: Var<'t>,
    key: Var<'t>,
    labels: &[u32],
    cfg: &CmpmConfig,
) -> Result<Var<'t>> {
    let n = labels.len();
    let query = if cfg.normalize_both {
        query.l2_normalize_rows()?
    } else {
        query
    };
    let log_p = query
        .matmul_nt(key.l2_normalize_rows()?)?
        .log_softmax_rows()?;
    let mut log_q = Vec::with_capacity(n * n);
    for &li in labels {
        let matches = labels.iter().filter(|&&lj| lj == li).count() as f64;
        log_q.extend(labels.iter().map(|&lj| {
            let q = if lj == li { 1.0 / matches } else { 0.0 };
            (q + cfg.epsilon).ln()
        }));
    }
    let log_q = query.tape().constant(Tensor::matrix(n, n, log_q)?);
    log_p
        .exp()?
        .mul(log_p.sub(log_q)?)?
        .sum()?
        .scale(1.0 / n as f64)
}

/// Cross-modal projection matching: image-to-text plus text-to-image.
pub fn cmpm_loss<'t>(v: Var<'t>, t: Var<'t>, labels: &[u32], cfg: &CmpmConfig) -> Result<Var<'t>> {
    check_pair("cmpm_loss", v, t, Some(labels))?;
    cfg.validate()?;
    cmpm_direction(v, t, labels, cfg)?.add(cmpm_direction(t, v, labels, cfg)?)
}

/// Bidirectional hinge on cosine similarity against the hardest in-batch
/// negative, summed over anchors.
pub fn ranking_loss<'t>(v: Var<'t>, t: Var<'t>, labels: &[u32], alpha: f64) -> Result<Var<'t>> {
    let n = check_pair("ranking_loss", v, t, Some(labels))?;
    let s = v.l2_normalize_rows()?.matmul_nt(t.l2_normalize_rows()?)?;
    let diag: Vec<usize> = (0..n).collect();
    let mut total = None;
    for sim in [s, s.transpose()?] {
        let values = sim.value();
        let mut hardest = Vec::with_capacity(n);
        for i in 0..n {
            let neg = (0..n)
                .filter(|&j| labels[j] != labels[i])
                .fold(None, |best: Option<usize>, j| match best {
                    Some(b) if values.get(i, b) >= values.get(i, j) => Some(b),
                    _ => Some(j),
                })
                .ok_or_else(|| {
                    Error::Contract(format!(
                        "ranking_loss: anchor {i} has no negative in the batch"
                    ))
                })?;
            hardest.push(neg);
        }
        let pos = sim.pick_per_row(&diag)?;
        let neg = sim.pick_per_row(&hardest)?;
        let term = neg
            .sub(pos)?
            .add(v.tape().constant(Tensor::filled(&[n], alpha)))?
            .relu()?
            .sum()?;
        total = Some(match total {
            None => term,
            Some(acc) => term.add(acc)?,
        });
    }
    Ok(total.expect("two directions"))
}

fn check_teacher(f: &TeacherFeatures<'_>, labels: Option<&[u32]>) -> Result<usize> {
    let n = check_pair("teacher features", f.vl, f.tl, labels)?;
    check_pair("teacher features", f.vh, f.th, labels)?;
    check_pair("teacher features", f.vr, f.tr, labels)?;
    check_pair("teacher features", f.vh, f.vr, labels)?;
    Ok(n)
}

fn check_student(s: &StudentFeatures<'_>, labels: Option<&[u32]>) -> Result<usize> {
    let n = check_pair("student features", s.vl, s.tl, labels)?;
    check_pair("student features", s.vh, s.th, labels)?;
    Ok(n)
}

pub fn multi_stage_cmpm<'t>(
    f: &TeacherFeatures<'t>,
    labels: &[u32],
    cfg: &CmpmConfig,
) -> Result<Var<'t>> {
    check_teacher(f, Some(labels))?;
    cmpm_loss(f.vl, f.tl, labels, cfg)?
        .add(cmpm_loss(f.vh, f.th, labels, cfg)?)?
        .add(cmpm_loss(f.vr, f.tr, labels, cfg)?)
}

pub fn cross_stage_cmpm<'t>(
    f: &TeacherFeatures<'t>,
    labels: &[u32],
    cfg: &CmpmConfig,
) -> Result<Var<'t>> {
    check_teacher(f, Some(labels))?;
    cmpm_loss(f.vh, f.tr, labels, cfg)?.add(cmpm_loss(f.vr, f.th, labels, cfg)?)
}

/// `(1/N)·‖A·Bᵀ − C·Dᵀ‖_F²`
fn similarity_gap<'t>(a: Var<'t>, b: Var<'t>, c: Var<'t>, d: Var<'t>) -> Result<Var<'t>> {
    let n = a.shape()[0];
    a.matmul_nt(b)?
        .sub(c.matmul_nt(d)?)?
        .square()?
        .sum()?
        .scale(1.0 / n as f64)
}

/// Gap between single-view and enriched cross-modal similarity matrices.
pub fn cr_loss<'t>(f: &TeacherFeatures<'t>) -> Result<Var<'t>> {
    check_teacher(f, None)?;
    similarity_gap(f.vh, f.th, f.vr, f.tr)
}

/// Multi-stage plus `λ1`-weighted cross-stage CMPM, optionally plus `cr_loss`.
pub fn teacher_loss<'t>(
    f: &TeacherFeatures<'t>,
    labels: &[u32],
    w: &LossWeights,
    cfg: &CmpmConfig,
    with_cr: bool,
) -> Result<Var<'t>> {
    let loss = multi_stage_cmpm(f, labels, cfg)?
        .add(cross_stage_cmpm(f, labels, cfg)?.scale(w.lambda1)?)?;
    if with_cr {
        loss.add(cr_loss(f)?)
    } else {
        Ok(loss)
    }
}

pub fn student_ms_cmpm<'t>(
    s: &StudentFeatures<'t>,
    labels: &[u32],
    cfg: &CmpmConfig,
) -> Result<Var<'t>> {
    check_student(s, Some(labels))?;
    cmpm_loss(s.vl, s.tl, labels, cfg)?.add(cmpm_loss(s.vh, s.th, labels, cfg)?)
}

fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.sub(b)?.square()?.mean()
}

fn check_kd(s: &StudentFeatures<'_>, t: &TeacherFeatures<'_>) -> Result<()> {
    check_pair("kd", s.vh, t.vr, None)?;
    check_pair("kd", s.th, t.tr, None)?;
    Ok(())
}

/// `MSE(Vh_s, Vr) + MSE(Th_s, Tr)`; teacher features are detached.
pub fn kd_feature_loss<'t>(s: &StudentFeatures<'t>, t: &TeacherFeatures<'t>) -> Result<Var<'t>> {
    check_kd(s, t)?;
    mse(s.vh, t.vr.detach())?.add(mse(s.th, t.tr.detach())?)
}

/// `(1/N)·‖Vh_s·Th_sᵀ − Vr·Trᵀ‖_F²`; teacher features are detached.
pub fn kd_relation_loss<'t>(s: &StudentFeatures<'t>, t: &TeacherFeatures<'t>) -> Result<Var<'t>> {
    check_kd(s, t)?;
    similarity_gap(s.vh, s.th, t.vr.detach(), t.tr.detach())
}

/// `λ2·student CMPM + λ3·(selected distillation terms)`. The teacher may be
/// absent only when `mode` selects no distillation.
pub fn student_loss<'t>(
    s: &StudentFeatures<'t>,
    teacher: Option<&TeacherFeatures<'t>>,
    labels: &[u32],
    w: &LossWeights,
    mode: KdMode,
    cfg: &CmpmConfig,
) -> Result<Var<'t>> {
    let base = student_ms_cmpm(s, labels, cfg)?.scale(w.lambda2)?;
    if !mode.needs_teacher() {
        return Ok(base);
    }
    let t =
        teacher.ok_or_else(|| Error::Contract(format!("kd mode {mode} needs teacher features")))?;
    check_kd(s, t)?;
    let mut terms = Vec::new();
    if mode.image {
        terms.push(mse(s.vh, t.vr.detach())?);
    }
    if mode.text {
        terms.push(mse(s.th, t.tr.detach())?);
    }
    if mode.relation {
        terms.push(kd_relation_loss(s, t)?);
    }
    let mut kd = terms[0];
    for term in &terms[1..] {
        kd = kd.add(*term)?;
    }
    base.add(kd.scale(w.lambda3)?)
}
