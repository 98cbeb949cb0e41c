use super::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Output of [`grouped_attention_forward`]: the attended values plus the
/// attention weights, laid out as `[group][head][query][key]`.
#[derive(Clone, Debug)]
pub struct AttentionForward {
    pub output: Tensor,
    pub weights: Vec<f64>,
    pub group_size: usize,
    pub heads: usize,
}

impl AttentionForward {
    /// The `S×S` attention matrix of one (group, head).
    pub fn matrix(&self, group: usize, head: usize) -> Tensor {
        let s = self.group_size;
        let off = (group * self.heads + head) * s * s;
        Tensor::matrix(s, s, self.weights[off..off + s * s].to_vec()).expect("square block")
    }
}

fn check_inputs(
    x: &Tensor,
    y: &Tensor,
    z: &Tensor,
    group_size: usize,
    heads: usize,
) -> Result<(usize, usize)> {
    let (r, d) = x.dims2("grouped_attention")?;
    for t in [y, z] {
        if t.shape() != x.shape() {
            return Err(Error::dim(
                "grouped_attention",
                format!("operand shape {:?} differs from {:?}", t.shape(), x.shape()),
            ));
        }
    }
    if group_size == 0 || r % group_size != 0 {
        return Err(Error::dim(
            "grouped_attention",
            format!("{r} rows do not split into groups of {group_size}"),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "feature dim {d} is not divisible by head count {heads}"
        )));
    }
    Ok((r / group_size, d))
}

/// Self-attention applied independently to each block of `group_size`
/// consecutive rows and to each of `heads` column slices:
/// `out_g,h = softmax(scale · X_g,h Y_g,hᵀ) Z_g,h`.
pub fn grouped_attention_forward(
    x: &Tensor,
    y: &Tensor,
    z: &Tensor,
    group_size: usize,
    heads: usize,
    scale: f64,
) -> Result<AttentionForward> {
    let (groups, d) = check_inputs(x, y, z, group_size, heads)?;
    let s = group_size;
    let dc = d / heads;
    let (xd, yd, zd) = (x.data(), y.data(), z.data());
    let mut out = vec![0.0; groups * s * d];
    let mut weights = vec![0.0; groups * heads * s * s];
    for g in 0..groups {
        let base = g * s;
        for h in 0..heads {
            let col = h * dc;
            let woff = (g * heads + h) * s * s;
            for i in 0..s {
                let row = &mut weights[woff + i * s..woff + (i + 1) * s];
                let xi = &xd[(base + i) * d + col..(base + i) * d + col + dc];
                for (j, w) in row.iter_mut().enumerate() {
                    let yj = &yd[(base + j) * d + col..(base + j) * d + col + dc];
                    *w = scale * xi.iter().zip(yj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
                for (j, &a) in row.iter().enumerate() {
                    let zj = &zd[(base + j) * d + col..(base + j) * d + col + dc];
                    let o = &mut out[(base + i) * d + col..(base + i) * d + col + dc];
                    for (ov, zv) in o.iter_mut().zip(zj) {
                        *ov += a * zv;
                    }
                }
            }
        }
    }
    Ok(AttentionForward {
        output: Tensor::new(x.shape().to_vec(), out)?,
        weights,
        group_size,
        heads,
    })
}

/// Vector-Jacobian product of [`grouped_attention_forward`] given the
/// upstream gradient of its output. Returns `(dX, dY, dZ)`.
pub(crate) fn grouped_attention_backward(
    x: &Tensor,
    y: &Tensor,
    z: &Tensor,
    fwd: &AttentionForward,
    scale: f64,
    upstream: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (r, d) = (x.rows(), x.cols());
    let s = fwd.group_size;
    let heads = fwd.heads;
    let dc = d / heads;
    let groups = r / s;
    let (xd, yd, zd, gd) = (x.data(), y.data(), z.data(), upstream.data());
    let mut dx = vec![0.0; r * d];
    let mut dy = vec![0.0; r * d];
    let mut dz = vec![0.0; r * d];
    let mut da = vec![0.0; s];
    for g in 0..groups {
        let base = g * s;
        for h in 0..heads {
            let col = h * dc;
            let woff = (g * heads + h) * s * s;
            for i in 0..s {
                let a_row = &fwd.weights[woff + i * s..woff + (i + 1) * s];
                let go = &gd[(base + i) * d + col..(base + i) * d + col + dc];
                for j in 0..s {
                    let zj = &zd[(base + j) * d + col..(base + j) * d + col + dc];
                    da[j] = go.iter().zip(zj).map(|(a, b)| a * b).sum();
                    let dzj = &mut dz[(base + j) * d + col..(base + j) * d + col + dc];
                    for (t, gv) in dzj.iter_mut().zip(go) {
                        *t += a_row[j] * gv;
                    }
                }
                let dot: f64 = a_row.iter().zip(&da).map(|(a, b)| a * b).sum();
                for j in 0..s {
                    let dl = a_row[j] * (da[j] - dot) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    for c in 0..dc {
                        dx[(base + i) * d + col + c] += dl * yd[(base + j) * d + col + c];
                        dy[(base + j) * d + col + c] += dl * xd[(base + i) * d + col + c];
                    }
                }
            }
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), dx).expect("shape"),
        Tensor::new(shape.clone(), dy).expect("shape"),
        Tensor::new(shape, dz).expect("shape"),
    )
}
