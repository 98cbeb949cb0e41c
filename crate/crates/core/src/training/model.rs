//! Teacher and student parameter bundles and their forward passes.

use rand::Rng;

use crate::data::{Batch, Dataset, Modality};
use crate::encoders::{init_encoder_with, EncoderParams, EncoderVars, StageVars};
use crate::error::{Error, Result};
use crate::losses::{StudentFeatures, TeacherFeatures};
use crate::mhaf::{init_mhaf, MhafConfig, MhafParams, MhafVars};
use crate::tensor::{Tape, Tensor, Var};

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Image,
    Text,
    Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams {
    pub image: EncoderParams,
    pub text: EncoderParams,
    /// Fuses images, and texts too when `text_mhaf` is absent.
    pub mhaf: MhafParams,
    /// Text-specific fusion module when fusion is not shared.
    pub text_mhaf: Option<MhafParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentParams {
    pub image: EncoderParams,
    pub text: EncoderParams,
}

fn prefixed<'a>(
    prefix: &str,
    items: impl IntoIterator<Item = (&'static str, &'a Tensor)>,
) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

impl TeacherParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        input_dim: usize,
        d1: usize,
        d: usize,
        mhaf: &MhafConfig,
    ) -> Result<Self> {
        mhaf.validate(d)?;
        let image = init_encoder_with(rng, input_dim, d1, d)?;
        let text = init_encoder_with(rng, input_dim, d1, d)?;
        let shared = init_mhaf(rng, d, mhaf.heads)?;
        let text_mhaf = if mhaf.shared {
            None
        } else {
            Some(init_mhaf(rng, d, mhaf.heads)?)
        };
        Ok(TeacherParams {
            image,
            text,
            mhaf: shared,
            text_mhaf,
        })
    }

    /// Named tensors in a fixed order shared by checkpoints and the optimizer.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("image", self.image.tensors());
        out.extend(prefixed("text", self.text.tensors()));
        match &self.text_mhaf {
            None => out.extend(prefixed("mhaf", self.mhaf.tensors())),
            Some(t) => {
                out.extend(prefixed("mhaf_image", self.mhaf.tensors()));
                out.extend(prefixed("mhaf_text", t.tensors()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.image.tensors_mut());
        out.extend(self.text.tensors_mut());
        out.extend(self.mhaf.tensors_mut());
        if let Some(t) = &mut self.text_mhaf {
            out.extend(t.tensors_mut());
        }
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let fusion = if self.text_mhaf.is_some() { 10 } else { 5 };
        let mut g = vec![ParamGroup::Image; 4];
        g.extend([ParamGroup::Text; 4]);
        g.extend(std::iter::repeat_n(ParamGroup::Fusion, fusion));
        g
    }

    pub fn input_dim(&self) -> usize {
        self.image.input_dim()
    }

    pub fn d1(&self) -> usize {
        self.image.d1()
    }

    pub fn d(&self) -> usize {
        self.image.d()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> TeacherVars<'t> {
        let image_mhaf = self.mhaf.bind(tape, trainable);
        TeacherVars {
            image: self.image.bind(tape, trainable),
            text: self.text.bind(tape, trainable),
            image_mhaf,
            text_mhaf: self.text_mhaf.as_ref().map(|m| m.bind(tape, trainable)),
        }
    }
}

impl StudentParams {
    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, d1: usize, d: usize) -> Result<Self> {
        Ok(StudentParams {
            image: init_encoder_with(rng, input_dim, d1, d)?,
            text: init_encoder_with(rng, input_dim, d1, d)?,
        })
    }

    /// Copies the teacher's encoders.
    pub fn from_teacher(t: &TeacherParams) -> Self {
        StudentParams {
            image: t.image.clone(),
            text: t.text.clone(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("image", self.image.tensors());
        out.extend(prefixed("text", self.text.tensors()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.image.tensors_mut());
        out.extend(self.text.tensors_mut());
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Image; 4];
        g.extend([ParamGroup::Text; 4]);
        g
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> StudentVars<'t> {
        StudentVars {
            image: self.image.bind(tape, true),
            text: self.text.bind(tape, true),
        }
    }
}

pub struct TeacherVars<'t> {
    pub image: EncoderVars<'t>,
    pub text: EncoderVars<'t>,
    pub image_mhaf: MhafVars<'t>,
    pub text_mhaf: Option<MhafVars<'t>>,
}

impl<'t> TeacherVars<'t> {
    /// Leaves in the order of [`TeacherParams::named`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = self.image.vars().to_vec();
        out.extend(self.text.vars());
        out.extend(self.image_mhaf.vars());
        if let Some(t) = &self.text_mhaf {
            out.extend(t.vars());
        }
        out
    }

    /// Encodes anchors together with their support members and fuses them.
    ///
    /// `support_*` hold `k` instance indices per batch row, row after row.
    pub fn forward(
        &self,
        ds: &Dataset,
        batch: &Batch,
        support_text: &[usize],
        support_image: &[usize],
        mhaf: &MhafConfig,
    ) -> Result<TeacherFeatures<'t>> {
        let tape = self.image.w1.tape();
        let anchors = |m| -> Vec<usize> {
            batch
                .pair_indices
                .iter()
                .map(|&p| ds.pair_instance(p, m))
                .collect()
        };
        let (vl, vh, vr) = fuse_modality(
            tape,
            &self.image,
            &self.image_mhaf,
            ds,
            &anchors(Modality::Image),
            support_image,
            mhaf,
        )?;
        let text_mhaf = self.text_mhaf.as_ref().unwrap_or(&self.image_mhaf);
        let (tl, th, tr) = fuse_modality(
            tape,
            &self.text,
            text_mhaf,
            ds,
            &anchors(Modality::Text),
            support_text,
            mhaf,
        )?;
        Ok(TeacherFeatures {
            vl,
            vh,
            vr,
            tl,
            th,
            tr,
        })
    }
}

type Stages<'t> = (Var<'t>, Var<'t>, Var<'t>);

fn fuse_modality<'t>(
    tape: &'t Tape,
    enc: &EncoderVars<'t>,
    fusion: &MhafVars<'t>,
    ds: &Dataset,
    anchors: &[usize],
    members: &[usize],
    cfg: &MhafConfig,
) -> Result<Stages<'t>> {
    let n = anchors.len();
    if n == 0 || !members.len().is_multiple_of(n) {
        return Err(Error::dim(
            "teacher forward",
            format!("{} support members for {n} anchors", members.len()),
        ));
    }
    let k = members.len() / n;
    let group = k + 1;
    let mut rows = Vec::with_capacity(n * group);
    for (g, &a) in anchors.iter().enumerate() {
        rows.push(a);
        rows.extend_from_slice(&members[g * k..(g + 1) * k]);
    }
    let StageVars { low, high } = enc.encode(tape.constant(ds.features(&rows)))?;
    let enriched = fusion.fuse_groups(high, group, cfg.fusion, cfg.scale)?;
    if k == 0 {
        return Ok((low, high, enriched));
    }
    let anchor_rows: Vec<usize> = (0..n).map(|g| g * group).collect();
    Ok((
        low.gather_rows(&anchor_rows)?,
        high.gather_rows(&anchor_rows)?,
        enriched,
    ))
}

pub struct StudentVars<'t> {
    pub image: EncoderVars<'t>,
    pub text: EncoderVars<'t>,
}

impl<'t> StudentVars<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = self.image.vars().to_vec();
        out.extend(self.text.vars());
        out
    }

    pub fn forward(&self, batch: &Batch) -> Result<StudentFeatures<'t>> {
        let tape = self.image.w1.tape();
        let v = self
            .image
            .encode(tape.constant(batch.image_features.clone()))?;
        let t = self
            .text
            .encode(tape.constant(batch.text_features.clone()))?;
        Ok(StudentFeatures {
            vl: v.low,
            vh: v.high,
            tl: t.low,
            th: t.high,
        })
    }
}
