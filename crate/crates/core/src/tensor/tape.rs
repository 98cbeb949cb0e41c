use std::cell::{Ref, RefCell};

use super::ops::{grouped_attention_backward, grouped_attention_forward, AttentionForward};
use super::{Tensor, NORM_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Exp(usize),
    Relu(usize),
    Square(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    NormalizeRows(usize),
    SumRows(usize),
    MeanRows(usize),
    SegmentSum(usize, usize),
    Sum(usize),
    Mean(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    PickPerRow(usize, Vec<usize>),
    Attention {
        x: usize,
        y: usize,
        z: usize,
        scale: f64,
        fwd: Box<AttentionForward>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations on [`Var`]s for reverse-mode differentiation.
///
/// A tape is single-writer; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one scalar output, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to the leaf `v`; zeros when `v` does not
    /// influence the output or is a constant.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.grads[v.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Contract("output belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if !out.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::filled(out.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &nodes[i].value;
            let mut acc = |i: usize, t: Tensor| {
                if !nodes[i].needs_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => {
                        for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_nt(val(*b))?);
                    acc(*b, val(*a).matmul_tn(&g)?);
                }
                Op::MatMulNt(a, b) => {
                    acc(*a, g.matmul(val(*b))?);
                    acc(*b, g.matmul_tn(val(*a))?);
                }
                Op::Transpose(a) => acc(*a, g.transpose()?),
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                    acc(*b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
                }
                Op::AddRow(a, b) => {
                    acc(*b, g.sum_rows()?);
                    acc(*a, g);
                }
                Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
                Op::Tanh(a) => acc(
                    *a,
                    g.zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))?,
                ),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, "exp", |g, y| g * y)?),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?,
                ),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), "square", |g, x| 2.0 * g * x)?),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.dims2("softmax_rows")?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.dims2("log_softmax_rows")?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            d[i * c + j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::NormalizeRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let (r, c) = y.dims2("l2_normalize_rows")?;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let (yr, gr) = (y.row(i), g.row(i));
                        if norm > NORM_FLOOR {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[i * c + j] = (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..c {
                                d[i * c + j] = gr[j] / NORM_FLOOR;
                            }
                        }
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::SumRows(a) | Op::MeanRows(a) => {
                    let (r, c) = val(*a).dims2("row reduction")?;
                    let k = if matches!(node.op, Op::MeanRows(_)) {
                        1.0 / r as f64
                    } else {
                        1.0
                    };
                    let mut d = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        d.extend(g.data().iter().map(|v| v * k));
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::SegmentSum(a, group) => {
                    let (r, c) = val(*a).dims2("segment_sum")?;
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        d.extend_from_slice(g.row(i / group));
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let n = val(*a).len();
                    let k = if matches!(node.op, Op::Mean(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    acc(*a, Tensor::filled(val(*a).shape(), g.data()[0] * k));
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).dims2("slice_cols")?;
                    let w = g.cols();
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.row(i)[start..start + w]);
                        }
                        start += w;
                        acc(p, Tensor::new(val(p).shape().to_vec(), d)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        acc(
                            p,
                            Tensor::new(val(p).shape().to_vec(), g.data()[off..off + n].to_vec())?,
                        );
                        off += n;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(*a).dims2("gather_rows")?;
                    let mut d = vec![0.0; r * c];
                    for (k, &i) in idx.iter().enumerate() {
                        for (t, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *t += v;
                        }
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::PickPerRow(a, idx) => {
                    let (r, c) = val(*a).dims2("pick_per_row")?;
                    let mut d = vec![0.0; r * c];
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * c + j] = g.data()[i];
                    }
                    acc(*a, Tensor::matrix(r, c, d)?);
                }
                Op::Attention {
                    x,
                    y,
                    z,
                    scale,
                    fwd,
                } => {
                    let (dx, dy, dz) =
                        grouped_attention_backward(val(*x), val(*y), val(*z), fwd, *scale, &g);
                    acc(*x, dx);
                    acc(*y, dy);
                    acc(*z, dz);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// The value of a one-element var.
    pub fn item(&self) -> Result<f64> {
        self.tape.value(self.id).item()
    }

    /// A constant copy of this value; no gradient flows through it.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(
                "operands recorded on different tapes".into(),
            ))
        }
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'t>> {
        let value = f(&self.tape.value(self.id))?;
        let ng = self.tape.needs_grad(self.id);
        Ok(self.tape.push(value, op, ng))
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = f(&self.tape.value(self.id), &self.tape.value(other.id))?;
        let ng = self.tape.needs_grad(self.id) || self.tape.needs_grad(other.id);
        Ok(self.tape.push(value, op, ng))
    }

    fn nary(tape: &'t Tape, parts: &[Var<'t>], value: Tensor, op: Op) -> Result<Var<'t>> {
        let ng = parts.iter().any(|p| tape.needs_grad(p.id));
        Ok(tape.push(value, op, ng))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.matmul_nt(b),
            Op::MatMulNt(self.id, other.id),
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(|a| a.transpose(), Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(|a| a.reshape(shape), Op::Reshape(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.zip_map(b, "add", |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.zip_map(b, "sub", |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.zip_map(b, "mul", |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            bias,
            |a, b| {
                let (r, c) = a.dims2("add_row")?;
                if b.shape() != [c] {
                    return Err(Error::dim(
                        "add_row",
                        format!("bias shape {:?} for {c} columns", b.shape()),
                    ));
                }
                let mut d = a.data().to_vec();
                for i in 0..r {
                    for (v, bv) in d[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                        *v += bv;
                    }
                }
                Tensor::matrix(r, c, d)
            },
            Op::AddRow(self.id, bias.id),
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.map(|v| v * c)), Op::Scale(self.id, c))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.map(f64::tanh)), Op::Tanh(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.map(f64::exp)), Op::Exp(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.map(|v| v.max(0.0))), Op::Relu(self.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(|a| Ok(a.map(|v| v * v)), Op::Square(self.id))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.unary(|a| a.softmax_rows(), Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        self.unary(|a| a.log_softmax_rows(), Op::LogSoftmaxRows(self.id))
    }

    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        self.unary(|a| a.l2_normalize_rows(), Op::NormalizeRows(self.id))
    }

    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.unary(|a| a.sum_rows(), Op::SumRows(self.id))
    }

    pub fn mean_rows(self) -> Result<Var<'t>> {
        self.unary(|a| a.mean_rows(), Op::MeanRows(self.id))
    }

    /// Sums each block of `group` consecutive rows: `[G·group, n] -> [G, n]`.
    pub fn segment_sum(self, group: usize) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let (r, c) = a.dims2("segment_sum")?;
                if group == 0 || r % group != 0 {
                    return Err(Error::dim(
                        "segment_sum",
                        format!("{r} rows, group {group}"),
                    ));
                }
                let mut d = vec![0.0; (r / group) * c];
                for i in 0..r {
                    for (t, v) in d[(i / group) * c..(i / group + 1) * c]
                        .iter_mut()
                        .zip(a.row(i))
                    {
                        *t += v;
                    }
                }
                Tensor::matrix(r / group, c, d)
            },
            Op::SegmentSum(self.id, group),
        )
    }

    pub fn segment_mean(self, group: usize) -> Result<Var<'t>> {
        self.segment_sum(group)?.scale(1.0 / group as f64)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(|a| Ok(Tensor::scalar(a.sum())), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(
            |a| {
                if a.is_empty() {
                    return Err(Error::dim("mean", "empty tensor"));
                }
                Ok(Tensor::scalar(a.sum() / a.len() as f64))
            },
            Op::Mean(self.id),
        )
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let (r, c) = a.dims2("slice_cols")?;
                if start + width > c {
                    return Err(Error::dim(
                        "slice_cols",
                        format!("[{start}, {}) of {c}", start + width),
                    ));
                }
                let mut d = Vec::with_capacity(r * width);
                for i in 0..r {
                    d.extend_from_slice(&a.row(i)[start..start + width]);
                }
                Tensor::matrix(r, width, d)
            },
            Op::SliceCols(self.id, start),
        )
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no operands"))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value(p.id)).collect();
            let r = vals[0].dims2("concat_cols")?.0;
            let mut widths = Vec::with_capacity(vals.len());
            for v in &vals {
                let (vr, vc) = v.dims2("concat_cols")?;
                if vr != r {
                    return Err(Error::dim(
                        "concat_cols",
                        format!("row counts {r} and {vr}"),
                    ));
                }
                widths.push(vc);
            }
            let total: usize = widths.iter().sum();
            let mut d = Vec::with_capacity(r * total);
            for i in 0..r {
                for v in &vals {
                    d.extend_from_slice(v.row(i));
                }
            }
            Tensor::matrix(r, total, d)?
        };
        for p in parts {
            first.same_tape(p)?;
        }
        Var::nary(
            tape,
            parts,
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Stacks vectors (length `n`) or matrices (`k×n`) into one matrix.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no operands"))?;
        let tape = first.tape;
        let value = {
            let mut rows = 0;
            let mut cols = None;
            let mut d = Vec::new();
            for p in parts {
                first.same_tape(p)?;
                let v = tape.value(p.id);
                let (r, c) = match v.shape() {
                    [n] => (1, *n),
                    [r, c] => (*r, *c),
                    s => return Err(Error::dim("concat_rows", format!("operand shape {s:?}"))),
                };
                if *cols.get_or_insert(c) != c {
                    return Err(Error::dim(
                        "concat_rows",
                        format!("column counts {cols:?} and {c}"),
                    ));
                }
                rows += r;
                d.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, cols.unwrap_or(0), d)?
        };
        Var::nary(
            tape,
            parts,
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        self.unary(
            |a| a.select_rows(idx),
            Op::GatherRows(self.id, idx.to_vec()),
        )
    }

    /// `out[i] = self[i, idx[i]]`.
    pub fn pick_per_row(self, idx: &[usize]) -> Result<Var<'t>> {
        self.unary(
            |a| {
                let (r, c) = a.dims2("pick_per_row")?;
                if idx.len() != r || idx.iter().any(|&j| j >= c) {
                    return Err(Error::dim(
                        "pick_per_row",
                        format!("{} indices for [{r}x{c}]", idx.len()),
                    ));
                }
                Ok(Tensor::vector(
                    idx.iter().enumerate().map(|(i, &j)| a.get(i, j)).collect(),
                ))
            },
            Op::PickPerRow(self.id, idx.to_vec()),
        )
    }

    /// Multi-head self-attention within blocks of `group_size` rows; see
    /// [`grouped_attention_forward`](super::grouped_attention_forward).
    pub fn grouped_attention(
        x: Var<'t>,
        y: Var<'t>,
        z: Var<'t>,
        group_size: usize,
        heads: usize,
        scale: f64,
    ) -> Result<Var<'t>> {
        x.same_tape(&y)?;
        x.same_tape(&z)?;
        let tape = x.tape;
        let fwd = grouped_attention_forward(
            &tape.value(x.id),
            &tape.value(y.id),
            &tape.value(z.id),
            group_size,
            heads,
            scale,
        )?;
        let value = fwd.output.clone();
        Var::nary(
            tape,
            &[x, y, z],
            value,
            Op::Attention {
                x: x.id,
                y: y.id,
                z: z.id,
                scale,
                fwd: Box::new(fwd),
            },
        )
    }
}
