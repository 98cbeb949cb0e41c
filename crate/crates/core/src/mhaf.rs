//! Multi-head attentional fusion of an anchor embedding with its support set.
//!
//! For `E` with the anchor in row 0 and `K` support rows below it:
//! `X_h = E·Wx_h`, `Y_h = E·Wy_h`, `Z_h = E·Wz_h`,
//! `A_h = softmax_rows(X_h Y_hᵀ / s)`, `Ê = [A_1 Z_1 | … | A_H Z_H]` and
//! `out = mean_rows(E) + sum_rows(Ê·Fc_W + Fc_b)`.
//!
//! The per-head projections are stored side by side: `Wx` is `d×d` and head
//! `h` owns columns `h·d_c .. (h+1)·d_c`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::xavier_uniform;
use crate::error::{Error, Result};
use crate::tensor::{grouped_attention_forward, Tape, Tensor, Var};

/// Divisor of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `sqrt(d)`, the full embedding width.
    #[default]
    SqrtD,
    /// `sqrt(d / H)`, the per-head width.
    SqrtHeadDim,
}

impl AttentionScale {
    /// Multiplier applied to the logits.
    pub fn factor(self, d: usize, heads: usize) -> f64 {
        let s = match self {
            AttentionScale::SqrtD => d as f64,
            AttentionScale::SqrtHeadDim => (d / heads) as f64,
        };
        1.0 / s.sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Self-attention over all rows, mean plus summed projection.
    #[default]
    Mhaf,
    /// Plain mean over anchor and support rows.
    Mean,
    /// Only the anchor queries the set: `anchor + Fc(Ê_0)`.
    CrossAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MhafConfig {
    pub heads: usize,
    pub scale: AttentionScale,
    pub fusion: FusionStrategy,
    /// One module for both modalities when true.
    pub shared: bool,
}

impl Default for MhafConfig {
    fn default() -> Self {
        MhafConfig {
            heads: 16,
            scale: AttentionScale::SqrtD,
            fusion: FusionStrategy::Mhaf,
            shared: true,
        }
    }
}

impl MhafConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        check_heads(d, self.heads)
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding dim {d} is not divisible by head count {heads}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhafParams {
    pub heads: usize,
    pub wx: Tensor,
    pub wy: Tensor,
    pub wz: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

/// Xavier-uniform head projections (per-head fans `d` and `d/H`),
/// `Fc_W ~ N(0, 0.02²)`, `Fc_b = 0`.
pub fn init_mhaf<R: Rng>(rng: &mut R, d: usize, heads: usize) -> Result<MhafParams> {
    check_heads(d, heads)?;
    let dc = d / heads;
    let mut proj = || {
        let blocks: Vec<Tensor> = (0..heads).map(|_| xavier_uniform(rng, d, dc)).collect();
        let mut data = Vec::with_capacity(d * d);
        for i in 0..d {
            for b in &blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Tensor::matrix(d, d, data).expect("sized")
    };
    let (wx, wy, wz) = (proj(), proj(), proj());
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let fc = (0..d * d).map(|_| normal.sample(rng)).collect();
    Ok(MhafParams {
        heads,
        wx,
        wy,
        wz,
        fc_w: Tensor::matrix(d, d, fc)?,
        fc_b: Tensor::zeros(&[d]),
    })
}

pub fn init_mhaf_seeded(seed: u64, d: usize, heads: usize) -> Result<MhafParams> {
    init_mhaf(&mut ChaCha8Rng::seed_from_u64(seed), d, heads)
}

impl MhafParams {
    pub fn d(&self) -> usize {
        self.wx.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("wx", &self.wx),
            ("wy", &self.wy),
            ("wz", &self.wz),
            ("fc_w", &self.fc_w),
            ("fc_b", &self.fc_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.wx,
            &mut self.wy,
            &mut self.wz,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> MhafVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MhafVars {
            heads: self.heads,
            wx: leaf(&self.wx),
            wy: leaf(&self.wy),
            wz: leaf(&self.wz),
            fc_w: leaf(&self.fc_w),
            fc_b: leaf(&self.fc_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MhafVars<'t> {
    pub heads: usize,
    pub wx: Var<'t>,
    pub wy: Var<'t>,
    pub wz: Var<'t>,
    pub fc_w: Var<'t>,
    pub fc_b: Var<'t>,
}

impl<'t> MhafVars<'t> {
    pub fn vars(&self) -> [Var<'t>; 5] {
        [self.wx, self.wy, self.wz, self.fc_w, self.fc_b]
    }

    fn d(&self) -> usize {
        self.wx.shape()[0]
    }

    fn check_rows(&self, e: Var<'t>) -> Result<()> {
        let shape = e.shape();
        if shape.len() != 2 || shape[1] != self.d() {
            return Err(Error::dim(
                "mhaf_fuse",
                format!("input shape {shape:?}, rows must have length {}", self.d()),
            ));
        }
        check_heads(self.d(), self.heads)
    }

    /// Fuses one `(K+1)×d` set into a `d` vector, head by head.
    pub fn fuse(&self, e: Var<'t>, scale: AttentionScale) -> Result<Var<'t>> {
        self.check_rows(e)?;
        let d = self.d();
        let dc = d / self.heads;
        let s = scale.factor(d, self.heads);
        let (x, y, z) = (e.matmul(self.wx)?, e.matmul(self.wy)?, e.matmul(self.wz)?);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (xh, yh, zh) = (
                x.slice_cols(h * dc, dc)?,
                y.slice_cols(h * dc, dc)?,
                z.slice_cols(h * dc, dc)?,
            );
            let a = xh.matmul_nt(yh)?.scale(s)?.softmax_rows()?;
            heads.push(a.matmul(zh)?);
        }
        let e_hat = Var::concat_cols(&heads)?;
        let fc = e_hat.matmul(self.fc_w)?.add_row(self.fc_b)?;
        e.mean_rows()?.add(fc.sum_rows()?)
    }

    /// Fuses consecutive blocks of `group` rows (anchor first in each block)
    /// of an `(N·group)×d` matrix into `N×d` with the chosen strategy.
    pub fn fuse_groups(
        &self,
        e: Var<'t>,
        group: usize,
        strategy: FusionStrategy,
        scale: AttentionScale,
    ) -> Result<Var<'t>> {
        self.check_rows(e)?;
        let mean = e.segment_mean(group)?;
        if strategy == FusionStrategy::Mean {
            return Ok(mean);
        }
        let s = scale.factor(self.d(), self.heads);
        let (x, y, z) = (e.matmul(self.wx)?, e.matmul(self.wy)?, e.matmul(self.wz)?);
        let e_hat = Var::grouped_attention(x, y, z, group, self.heads, s)?;
        match strategy {
            FusionStrategy::Mhaf => {
                let fc = e_hat.matmul(self.fc_w)?.add_row(self.fc_b)?;
                mean.add(fc.segment_sum(group)?)
            }
            FusionStrategy::CrossAttention => {
                let anchors: Vec<usize> = (0..e.shape()[0] / group).map(|g| g * group).collect();
                let fc = e_hat
                    .gather_rows(&anchors)?
                    .matmul(self.fc_w)?
                    .add_row(self.fc_b)?;
                e.gather_rows(&anchors)?.add(fc)
            }
            FusionStrategy::Mean => unreachable!(),
        }
    }
}

/// Fuses an anchor-first `(K+1)×d` matrix into a `d` vector.
pub fn mhaf_fuse(params: &MhafParams, e: &Tensor, scale: AttentionScale) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    Ok(vars.fuse(tape.constant(e.clone()), scale)?.value())
}

/// Any fusion strategy applied to one anchor-first set.
pub fn fuse_set(
    params: &MhafParams,
    e: &Tensor,
    strategy: FusionStrategy,
    scale: AttentionScale,
) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let rows = e.dims2("mhaf_fuse")?.0;
    let out = vars
        .fuse_groups(tape.constant(e.clone()), rows, strategy, scale)?
        .value();
    out.reshape(&[params.d()])
}

/// The `H` attention matrices for one set.
pub fn attention_weights(
    params: &MhafParams,
    e: &Tensor,
    scale: AttentionScale,
) -> Result<Vec<Tensor>> {
    let (rows, d) = e.dims2("mhaf_fuse")?;
    if d != params.d() {
        return Err(Error::dim(
            "mhaf_fuse",
            format!("rows of length {d}, expected {}", params.d()),
        ));
    }
    let fwd = grouped_attention_forward(
        &e.matmul(&params.wx)?,
        &e.matmul(&params.wy)?,
        &e.matmul(&params.wz)?,
        rows,
        params.heads,
        scale.factor(d, params.heads),
    )?;
    Ok((0..params.heads).map(|h| fwd.matrix(0, h)).collect())
}
