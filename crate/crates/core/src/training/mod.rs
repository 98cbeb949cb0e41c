//! Staged training: the teacher (encoders and fusion) first, then a student
//! (encoders only) distilled from the frozen teacher.

mod checkpoint;
mod model;
mod optim;

pub use checkpoint::{Checkpoint, Stage, CHECKPOINT_MAGIC};
pub use model::{ParamGroup, StudentParams, StudentVars, TeacherParams, TeacherVars};
pub use optim::{adam_step, lr_at, AdamState, LrSchedule, ADAM_EPS, BETA1, BETA2};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_support_set, sample_pk_batch, Batch, Dataset, Modality, SamplerConfig, SupportMode,
};
use crate::error::{Error, Result};
use crate::losses::{student_loss, teacher_loss, CmpmConfig, KdMode, LossWeights};
use crate::mhaf::MhafConfig;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Low-stage width.
    pub d1: usize,
    /// High-stage and fused width.
    pub d: usize,
    pub mhaf: MhafConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d1: 32,
            d: 64,
            mhaf: MhafConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Fresh support members for every batch row.
    #[default]
    Step,
    /// One draw per pair, kept for a whole epoch.
    Epoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupportConfig {
    pub k_text: usize,
    pub k_image: usize,
    pub mode: SupportMode,
    pub resample: Resample,
}

impl Default for SupportConfig {
    fn default() -> Self {
        SupportConfig {
            k_text: 1,
            k_image: 1,
            mode: SupportMode::ExcludeSelf,
            resample: Resample::Step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherStage {
    pub epochs: usize,
    pub lr_image: f64,
    pub lr_text: f64,
    pub lr_fusion: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Add the single-view/enriched similarity regularizer.
    pub with_cr: bool,
}

impl Default for TeacherStage {
    fn default() -> Self {
        TeacherStage {
            epochs: 30,
            lr_image: 1e-3,
            lr_text: 1e-3,
            lr_fusion: 1e-3,
            warmup_epochs: 1,
            decay_epochs: vec![15, 20, 25],
            decay_factor: 0.1,
            with_cr: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentStage {
    pub epochs: usize,
    pub lr_image: f64,
    pub lr_text: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub kd_mode: KdMode,
    /// Start from the teacher's encoder weights instead of a fresh draw.
    pub init_from_teacher: bool,
}

impl Default for StudentStage {
    fn default() -> Self {
        StudentStage {
            epochs: 30,
            lr_image: 1e-4,
            lr_text: 1e-3,
            warmup_epochs: 1,
            decay_epochs: vec![15, 23],
            decay_factor: 0.1,
            kd_mode: KdMode::ALL,
            init_from_teacher: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Set by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub weights: LossWeights,
    pub cmpm: CmpmConfig,
    pub support: SupportConfig,
    pub teacher: TeacherStage,
    pub student: StudentStage,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model.d1 == 0 || self.model.d == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        self.model.mhaf.validate(self.model.d)?;
        if self.sampler.p == 0 || self.sampler.k == 0 {
            return Err(Error::Config("sampler P and K must be at least 1".into()));
        }
        self.weights.validate()?;
        self.cmpm.validate()?;
        self.teacher_schedule(1).validate()?;
        self.student_schedule(1).validate()?;
        Ok(())
    }

    /// Unit-base schedule; group rates multiply it.
    pub fn teacher_schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: 1.0,
            warmup_steps: self.teacher.warmup_epochs * steps_per_epoch,
            decay_epochs: self.teacher.decay_epochs.clone(),
            decay_factor: self.teacher.decay_factor,
        }
    }

    pub fn student_schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            base_lr: 1.0,
            warmup_steps: self.student.warmup_epochs * steps_per_epoch,
            decay_epochs: self.student.decay_epochs.clone(),
            decay_factor: self.student.decay_factor,
        }
    }

    fn student_uses_teacher(&self) -> bool {
        self.student.kd_mode.needs_teacher() && self.weights.lambda3 != 0.0
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub enum RngStream {
    TeacherInit = 1,
    TeacherBatches = 2,
    TeacherSupport = 3,
    StudentInit = 4,
    StudentBatches = 5,
    StudentSupport = 6,
}

pub fn rng_for(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Text-encoder learning rate at the epoch's last step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub trace: Vec<EpochRecord>,
}

pub fn steps_per_epoch(ds: &Dataset, sampler: &SamplerConfig) -> usize {
    ds.pairs().len().div_ceil(sampler.batch_size()).max(1)
}

/// Support members for each pair, drawn once per epoch.
type SupportCache = Vec<(Vec<usize>, Vec<usize>)>;

fn check_support(ds: &Dataset, cfg: &SupportConfig) -> Result<()> {
    if cfg.mode != SupportMode::ExcludeSelf {
        return Ok(());
    }
    for (modality, k) in [(Modality::Text, cfg.k_text), (Modality::Image, cfg.k_image)] {
        if k == 0 {
            continue;
        }
        for id in ds.identities() {
            let own = ds.pairs_of(id);
            let count = ds
                .instances()
                .iter()
                .filter(|i| i.identity == id && i.modality == modality)
                .count();
            if count < 2 {
                return Err(Error::Support(format!(
                    "identity {id} has {count} {modality:?} instance(s) over {} pair(s); \
                     exclude_self support sets need at least 2 (use duplicate_self)",
                    own.len()
                )));
            }
        }
    }
    Ok(())
}

fn draw_for_pair(
    ds: &Dataset,
    pair: usize,
    cfg: &SupportConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let text = build_support_set(ds, pair, Modality::Text, cfg.k_text, cfg.mode, rng)?.members;
    let image = build_support_set(ds, pair, Modality::Image, cfg.k_image, cfg.mode, rng)?.members;
    Ok((text, image))
}

fn draw_supports(
    ds: &Dataset,
    batch: &Batch,
    cfg: &SupportConfig,
    cache: Option<&SupportCache>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut text = Vec::with_capacity(batch.len() * cfg.k_text);
    let mut image = Vec::with_capacity(batch.len() * cfg.k_image);
    for &p in &batch.pair_indices {
        let (t, i) = match cache {
            Some(c) => c[p].clone(),
            None => draw_for_pair(ds, p, cfg, rng)?,
        };
        text.extend(t);
        image.extend(i);
    }
    Ok((text, image))
}

fn fill_cache(ds: &Dataset, cfg: &SupportConfig, rng: &mut ChaCha8Rng) -> Result<SupportCache> {
    (0..ds.pairs().len())
        .map(|p| draw_for_pair(ds, p, cfg, rng))
        .collect()
}

fn check_finite(step: usize, loss: f64, grads: &[Tensor]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss} at step {step}")));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "gradient of parameter {k} is non-finite at step {step}"
        )));
    }
    Ok(())
}

fn group_lrs(groups: &[ParamGroup], factor: f64, image: f64, text: f64, fusion: f64) -> Vec<f64> {
    groups
        .iter()
        .map(|g| {
            factor
                * match g {
                    ParamGroup::Image => image,
                    ParamGroup::Text => text,
                    ParamGroup::Fusion => fusion,
                }
        })
        .collect()
}

pub struct TeacherTrainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    params: TeacherParams,
    adam: AdamState,
    batches: ChaCha8Rng,
    support: ChaCha8Rng,
    cache: Option<SupportCache>,
    step: usize,
}

impl<'a> TeacherTrainer<'a> {
    pub fn new(ds: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_support(ds, &cfg.support)?;
        let mut init = rng_for(cfg.seed, RngStream::TeacherInit);
        let params = TeacherParams::init(
            &mut init,
            ds.input_dim(),
            cfg.model.d1,
            cfg.model.d,
            &cfg.model.mhaf,
        )?;
        let adam = AdamState::new(params.named().into_iter().map(|(_, t)| t));
        Ok(TeacherTrainer {
            ds,
            cfg,
            params,
            adam,
            batches: rng_for(cfg.seed, RngStream::TeacherBatches),
            support: rng_for(cfg.seed, RngStream::TeacherSupport),
            cache: None,
            step: 0,
        })
    }

    pub fn params(&self) -> &TeacherParams {
        &self.params
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        sample_pk_batch(self.ds, &self.cfg.sampler, &mut self.batches)
    }

    /// Redraws the per-epoch support cache when epoch resampling is on.
    pub fn begin_epoch(&mut self) -> Result<()> {
        if self.cfg.support.resample == Resample::Epoch {
            self.cache = Some(fill_cache(self.ds, &self.cfg.support, &mut self.support)?);
        }
        Ok(())
    }

    /// One optimization step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch, lr_factor: f64) -> Result<f64> {
        let cfg = self.cfg;
        let (st, si) = draw_supports(
            self.ds,
            batch,
            &cfg.support,
            self.cache.as_ref(),
            &mut self.support,
        )?;
        let tape = Tape::new();
        let vars = self.params.bind(&tape, true);
        let feats = vars.forward(self.ds, batch, &st, &si, &cfg.model.mhaf)?;
        let loss = teacher_loss(
            &feats,
            &batch.labels,
            &cfg.weights,
            &cfg.cmpm,
            cfg.teacher.with_cr,
        )?;
        let value = loss.item()?;
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.vars().into_iter().map(|v| g.wrt(v)).collect();
        check_finite(self.step, value, &grads)?;
        let t = &cfg.teacher;
        let lrs = group_lrs(
            &self.params.groups(),
            lr_factor,
            t.lr_image,
            t.lr_text,
            t.lr_fusion,
        );
        adam_step(&mut self.params.tensors_mut(), &grads, &mut self.adam, &lrs)?;
        self.step += 1;
        Ok(value)
    }

    pub fn run(mut self) -> Result<TrainOutcome<TeacherParams>> {
        let spe = steps_per_epoch(self.ds, &self.cfg.sampler);
        let schedule = self.cfg.teacher_schedule(spe);
        let mut trace = Vec::with_capacity(self.cfg.teacher.epochs);
        for epoch in 0..self.cfg.teacher.epochs {
            self.begin_epoch()?;
            let mut total = 0.0;
            let mut factor = 0.0;
            for s in 0..spe {
                factor = lr_at(&schedule, epoch, s, spe);
                let batch = self.sample_batch()?;
                total += self.step(&batch, factor)?;
            }
            trace.push(EpochRecord {
                epoch,
                mean_loss: total / spe as f64,
                lr: factor * self.cfg.teacher.lr_text,
            });
        }
        Ok(TrainOutcome {
            params: self.params,
            trace,
        })
    }
}

pub fn train_teacher(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<TeacherParams>> {
    TeacherTrainer::new(ds, cfg)?.run()
}

fn check_teacher_dims(teacher: &TeacherParams, ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let have = (teacher.input_dim(), teacher.d1(), teacher.d());
    let want = (ds.input_dim(), cfg.model.d1, cfg.model.d);
    if have != want {
        return Err(Error::Config(format!(
            "teacher dims (input, d1, d) = {have:?} do not match dataset/config {want:?}"
        )));
    }
    if teacher.mhaf.heads != cfg.model.mhaf.heads
        || teacher.text_mhaf.is_none() != cfg.model.mhaf.shared
    {
        return Err(Error::Config(format!(
            "teacher fusion ({} heads, shared={}) does not match config ({} heads, shared={})",
            teacher.mhaf.heads,
            teacher.text_mhaf.is_none(),
            cfg.model.mhaf.heads,
            cfg.model.mhaf.shared
        )));
    }
    Ok(())
}

pub struct StudentTrainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    teacher: &'a TeacherParams,
    params: StudentParams,
    adam: AdamState,
    batches: ChaCha8Rng,
    support: ChaCha8Rng,
    cache: Option<SupportCache>,
    step: usize,
}

impl<'a> StudentTrainer<'a> {
    pub fn new(ds: &'a Dataset, teacher: &'a TeacherParams, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_teacher_dims(teacher, ds, cfg)?;
        if cfg.student_uses_teacher() {
            check_support(ds, &cfg.support)?;
        }
        let params = if cfg.student.init_from_teacher {
            StudentParams::from_teacher(teacher)
        } else {
            let mut init = rng_for(cfg.seed, RngStream::StudentInit);
            StudentParams::init(&mut init, ds.input_dim(), cfg.model.d1, cfg.model.d)?
        };
        let adam = AdamState::new(params.named().into_iter().map(|(_, t)| t));
        Ok(StudentTrainer {
            ds,
            cfg,
            teacher,
            params,
            adam,
            batches: rng_for(cfg.seed, RngStream::StudentBatches),
            support: rng_for(cfg.seed, RngStream::StudentSupport),
            cache: None,
            step: 0,
        })
    }

    pub fn params(&self) -> &StudentParams {
        &self.params
    }

    pub fn sample_batch(&mut self) -> Result<Batch> {
        sample_pk_batch(self.ds, &self.cfg.sampler, &mut self.batches)
    }

    pub fn begin_epoch(&mut self) -> Result<()> {
        if self.cfg.support.resample == Resample::Epoch && self.cfg.student_uses_teacher() {
            self.cache = Some(fill_cache(self.ds, &self.cfg.support, &mut self.support)?);
        }
        Ok(())
    }

    pub fn step(&mut self, batch: &Batch, lr_factor: f64) -> Result<f64> {
        let cfg = self.cfg;
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let student = vars.forward(batch)?;
        let teacher = if cfg.student_uses_teacher() {
            let (st, si) = draw_supports(
                self.ds,
                batch,
                &cfg.support,
                self.cache.as_ref(),
                &mut self.support,
            )?;
            let frozen = self.teacher.bind(&tape, false);
            Some(frozen.forward(self.ds, batch, &st, &si, &cfg.model.mhaf)?)
        } else {
            None
        };
        let mode = if cfg.student_uses_teacher() {
            cfg.student.kd_mode
        } else {
            KdMode::BASELINE
        };
        let loss = student_loss(
            &student,
            teacher.as_ref(),
            &batch.labels,
            &cfg.weights,
            mode,
            &cfg.cmpm,
        )?;
        let value = loss.item()?;
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.vars().into_iter().map(|v| g.wrt(v)).collect();
        check_finite(self.step, value, &grads)?;
        let s = &cfg.student;
        let lrs = group_lrs(&self.params.groups(), lr_factor, s.lr_image, s.lr_text, 0.0);
        adam_step(&mut self.params.tensors_mut(), &grads, &mut self.adam, &lrs)?;
        self.step += 1;
        Ok(value)
    }

    pub fn run(mut self) -> Result<TrainOutcome<StudentParams>> {
        let spe = steps_per_epoch(self.ds, &self.cfg.sampler);
        let schedule = self.cfg.student_schedule(spe);
        let mut trace = Vec::with_capacity(self.cfg.student.epochs);
        for epoch in 0..self.cfg.student.epochs {
            self.begin_epoch()?;
            let mut total = 0.0;
            let mut factor = 0.0;
            for s in 0..spe {
                factor = lr_at(&schedule, epoch, s, spe);
                let batch = self.sample_batch()?;
                total += self.step(&batch, factor)?;
            }
            trace.push(EpochRecord {
                epoch,
                mean_loss: total / spe as f64,
                lr: factor * self.cfg.student.lr_text,
            });
        }
        Ok(TrainOutcome {
            params: self.params,
            trace,
        })
    }
}

/// Trains a student against a frozen teacher. The teacher is only borrowed,
/// so its parameters cannot change.
pub fn train_student(
    ds: &Dataset,
    teacher: &TeacherParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<StudentParams>> {
    StudentTrainer::new(ds, teacher, cfg)?.run()
}
