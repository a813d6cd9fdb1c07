use std::cell::{Ref, RefCell};
use std::fmt;

use rayon::prelude::*;

use super::kernels::{broadcast_map, broadcast_shape, mm, mm_nt_acc, mm_tn_acc, permute_map};
use super::Tensor;
use crate::error::TensorError;

type OpResult<'t> = Result<Var<'t>, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a plain matrix: `a` is folded into one tall matrix.
    folded: bool,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
}

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        plan: Box<MatMulPlan>,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Scale {
        a: usize,
        c: f64,
    },
    AddScalar {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Log {
        a: usize,
    },
    Sqrt {
        a: usize,
    },
    Gelu {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    TakeAlongRows {
        a: usize,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        map: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation for reverse-mode differentiation.
///
/// A tape is confined to a single thread; parallelism happens inside the
/// individual kernels only.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    id: usize,
    tape: &'t Tape,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var<'_>) -> Option<Tensor> {
        self.get(var)
            .map(|g| Tensor::new(var.shape(), g.to_vec()).expect("gradient shape"))
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

    /// Registers a leaf; it is differentiable iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Registers a differentiable leaf, copying the tensor's data.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            true,
        )
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var {
            id: nodes.len() - 1,
            tape: self,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> OpResult<'t> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::Range {
                op: "concat",
                index: axis,
                bound: base.len(),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        let mut blocks = Vec::with_capacity(parts.len());
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            out_shape[axis] += s[axis];
            blocks.push(s[axis] * inner);
        }
        let data = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for (p, &blk) in parts.iter().zip(&blocks) {
                    data.extend_from_slice(&nodes[p.id].data[o * blk..(o + 1) * blk]);
                }
            }
            data
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            out_shape,
            data,
            Op::Concat {
                parts: ids,
                outer,
                blocks,
            },
            needs,
        ))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].data.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.data;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, plan } => matmul_backward(nodes, *a, *b, plan, g, grads),
        Op::Binary {
            kind,
            a,
            b,
            map_a,
            map_b,
        } => {
            let av = &nodes[*a].data;
            let bv = &nodes[*b].data;
            let ia = |i: usize| map_a.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| map_b.as_ref().map_or(i, |m| m[i]);
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    da[ia(i)] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => gi,
                        BinaryKind::Mul => gi * bv[ib(i)],
                        BinaryKind::Div => gi / bv[ib(i)],
                    };
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    db[ib(i)] += match kind {
                        BinaryKind::Add => gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * av[ia(i)],
                        BinaryKind::Div => {
                            let d = bv[ib(i)];
                            -gi * av[ia(i)] / (d * d)
                        }
                    };
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
            }
        }
        Op::Exp { a } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }
        }
        Op::Log { a } => {
            let x = &nodes[*a].data;
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            }
        }
        Op::Sqrt { a } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * 0.5 / y;
                }
            }
        }
        Op::Gelu { a } => {
            let x = &nodes[*a].data;
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for ((d, gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi * gelu_grad(xi);
                }
            }
        }
        Op::SumAll { a } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumAxis {
            a,
            outer,
            len,
            inner,
        } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            da[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Softmax { a } => {
            let n = *node.shape.last().unwrap_or(&1);
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let rows = da.par_chunks_mut(n).zip(g.par_chunks(n)).zip(out.par_chunks(n));
                rows.for_each(|((d, gr), y)| {
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((di, gi), yi) in d.iter_mut().zip(gr).zip(y) {
                        *di += yi * (gi - dot);
                    }
                });
            }
        }
        Op::LogSoftmax { a } => {
            let n = *node.shape.last().unwrap_or(&1);
            if let Some(da) = grad_buf(nodes, grads, *a) {
                let rows = da.par_chunks_mut(n).zip(g.par_chunks(n)).zip(out.par_chunks(n));
                rows.for_each(|((d, gr), y)| {
                    let total: f64 = gr.iter().sum();
                    for ((di, gi), yi) in d.iter_mut().zip(gr).zip(y) {
                        *di += gi - yi.exp() * total;
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = &nodes[*gain].data;
            let d = gv.len();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                let rows = dx
                    .par_chunks_mut(d)
                    .zip(g.par_chunks(d))
                    .zip(xhat.par_chunks(d))
                    .zip(rstd.par_iter());
                rows.for_each(|(((dxr, gr), xh), &rs)| {
                    let mut mean_gy = 0.0;
                    let mut mean_gyx = 0.0;
                    for j in 0..d {
                        let gy = gr[j] * gv[j];
                        mean_gy += gy;
                        mean_gyx += gy * xh[j];
                    }
                    mean_gy /= d as f64;
                    mean_gyx /= d as f64;
                    for j in 0..d {
                        dxr[j] += rs * (gr[j] * gv[j] - mean_gy - xh[j] * mean_gyx);
                    }
                });
            }
            if let Some(dg) = grad_buf(nodes, grads, *gain) {
                for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * xh[j];
                    }
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    for j in 0..d {
                        db[j] += gr[j];
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let d = *node.shape.last().unwrap_or(&1);
            if let Some(dt) = grad_buf(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    for (t, s) in dt[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *t += s;
                    }
                }
            }
        }
        Op::TakeAlongRows { a, idx } => {
            let c = nodes[*a].shape.last().copied().unwrap_or(1);
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for (r, &j) in idx.iter().enumerate() {
                    da[r * c + j] += g[r];
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            blocks,
        } => {
            let total: usize = blocks.iter().sum();
            let mut offset = 0;
            for (&p, &blk) in parts.iter().zip(blocks) {
                if let Some(dp) = grad_buf(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + blk];
                        for (d, s) in dp[o * blk..(o + 1) * blk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += blk;
            }
        }
        Op::Permute { a, map } => {
            if let Some(da) = grad_buf(nodes, grads, *a) {
                for (i, &src) in map.iter().enumerate() {
                    da[src] += g[i];
                }
            }
        }
    }
}

fn matmul_backward(
    nodes: &[Node],
    a: usize,
    b: usize,
    plan: &MatMulPlan,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let av = &nodes[a].data;
    let bv = &nodes[b].data;
    if plan.folded {
        let rows = av.len() / k;
        if let Some(da) = grad_buf(nodes, grads, a) {
            mm_nt_acc(g, bv, rows, n, k, da);
        }
        if let Some(db) = grad_buf(nodes, grads, b) {
            mm_tn_acc(av, g, rows, k, n, db);
        }
        return;
    }
    let batches = plan.a_batch.len();
    if nodes[a].needs_grad {
        let mut parts = vec![0.0; batches * m * k];
        parts
            .par_chunks_mut(m * k)
            .enumerate()
            .for_each(|(o, part)| {
                let ib = plan.b_batch[o];
                mm_nt_acc(
                    &g[o * m * n..(o + 1) * m * n],
                    &bv[ib * k * n..(ib + 1) * k * n],
                    m,
                    n,
                    k,
                    part,
                );
            });
        let da = grad_buf(nodes, grads, a).expect("needs grad");
        for (o, part) in parts.chunks(m * k).enumerate() {
            let ia = plan.a_batch[o];
            for (d, p) in da[ia * m * k..(ia + 1) * m * k].iter_mut().zip(part) {
                *d += p;
            }
        }
    }
    if nodes[b].needs_grad {
        let mut parts = vec![0.0; batches * k * n];
        parts
            .par_chunks_mut(k * n)
            .enumerate()
            .for_each(|(o, part)| {
                let ia = plan.a_batch[o];
                mm_tn_acc(
                    &av[ia * m * k..(ia + 1) * m * k],
                    &g[o * m * n..(o + 1) * m * n],
                    m,
                    k,
                    n,
                    part,
                );
            });
        let db = grad_buf(nodes, grads, b).expect("needs grad");
        for (o, part) in parts.chunks(k * n).enumerate() {
            let ib = plan.b_batch[o];
            for (d, p) in db[ib * k * n..(ib + 1) * k * n].iter_mut().zip(part) {
                *d += p;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    /// Borrow of the node's values. Drop it before recording more ops.
    pub fn data(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].data.as_slice())
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::new(node.shape.clone(), node.data.clone()).expect("node shape")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let data = &nodes[self.id].data;
        assert_eq!(data.len(), 1, "item() on a non-scalar node");
        data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect(), n.needs_grad)
        };
        self.tape.push(shape, data, op, needs)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale { a: self.id, c }, |x| c * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar { a: self.id }, |x| x + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp { a: self.id }, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log { a: self.id }, f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt { a: self.id }, f64::sqrt)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu { a: self.id }, gelu)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> OpResult<'t> {
        let (shape, data, map_a, map_b) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| TensorError::Shape {
                op: kind.name(),
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            })?;
            let map_a = (na.shape != shape).then(|| broadcast_map(&shape, &na.shape));
            let map_b = (nb.shape != shape).then(|| broadcast_map(&shape, &nb.shape));
            let numel: usize = shape.iter().product();
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            let data: Vec<f64> = (0..numel)
                .map(|i| {
                    let x = na.data[map_a.as_ref().map_or(i, |m| m[i])];
                    let y = nb.data[map_b.as_ref().map_or(i, |m| m[i])];
                    f(x, y)
                })
                .collect();
            (shape, data, map_a, map_b)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            data,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                map_a,
                map_b,
            },
            needs,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t>) -> OpResult<'t> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> OpResult<'t> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> OpResult<'t> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> OpResult<'t> {
        self.binary(other, BinaryKind::Div)
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast
    /// batch dimensions.
    pub fn matmul(self, other: Var<'t>) -> OpResult<'t> {
        let (shape, data, plan) = {
            let nodes = self.tape.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (&na.shape, &nb.shape);
            let mismatch = || TensorError::Shape {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            };
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(mismatch());
            }
            let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
            if sb.len() == 2 {
                let rows = na.data.len() / k;
                let mut out = vec![0.0; rows * n];
                mm(&na.data, &nb.data, rows, k, n, &mut out);
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(n);
                let plan = MatMulPlan {
                    m,
                    k,
                    n,
                    folded: true,
                    a_batch: Vec::new(),
                    b_batch: Vec::new(),
                };
                (shape, out, plan)
            } else {
                let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
                let batch = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
                let a_batch = broadcast_map(&batch, ba);
                let b_batch = broadcast_map(&batch, bb);
                let mut out = vec![0.0; a_batch.len() * m * n];
                out.par_chunks_mut(m * n).enumerate().for_each(|(o, chunk)| {
                    let (ia, ib) = (a_batch[o], b_batch[o]);
                    mm(
                        &na.data[ia * m * k..(ia + 1) * m * k],
                        &nb.data[ib * k * n..(ib + 1) * k * n],
                        m,
                        k,
                        n,
                        chunk,
                    );
                });
                let mut shape = batch;
                shape.extend([m, n]);
                let plan = MatMulPlan {
                    m,
                    k,
                    n,
                    folded: false,
                    a_batch,
                    b_batch,
                };
                (shape, out, plan)
            }
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            data,
            Op::MatMul {
                a: self.id,
                b: other.id,
                plan: Box::new(plan),
            },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let (data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (vec![n.data.iter().sum()], n.needs_grad)
        };
        self.tape.push(Vec::new(), data, Op::SumAll { a: self.id }, needs)
    }

    pub fn mean(self) -> Var<'t> {
        let count = self.tape.nodes.borrow()[self.id].data.len();
        self.sum().scale(1.0 / count as f64)
    }

    /// Sum over one axis; `keepdim` leaves a size-1 axis in its place.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> OpResult<'t> {
        let (shape, data, outer, len, inner, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if axis >= n.shape.len() {
                return Err(TensorError::Range {
                    op: "sum_axis",
                    index: axis,
                    bound: n.shape.len(),
                });
            }
            let outer: usize = n.shape[..axis].iter().product();
            let len = n.shape[axis];
            let inner: usize = n.shape[axis + 1..].iter().product();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &n.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = n.shape.clone();
            if keepdim {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            (shape, data, outer, len, inner, n.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> OpResult<'t> {
        let len = self
            .shape()
            .get(axis)
            .copied()
            .ok_or(TensorError::Range {
                op: "mean_axis",
                index: axis,
                bound: self.shape().len(),
            })?;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }

    /// Softmax over the last axis of `self + bias`, max-subtracted. The
    /// optional bias is a constant that broadcasts against `self`.
    pub fn softmax(self, bias: Option<&Tensor>) -> OpResult<'t> {
        let (shape, data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let cols = *n.shape.last().unwrap_or(&1);
            let mut z = n.data.clone();
            if let Some(b) = bias {
                add_bias(&mut z, &n.shape, b)?;
            }
            z.par_chunks_mut(cols).for_each(softmax_row);
            (n.shape.clone(), z, n.needs_grad)
        };
        Ok(self.tape.push(shape, data, Op::Softmax { a: self.id }, needs))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let (shape, data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let cols = *n.shape.last().unwrap_or(&1);
            let mut z = n.data.clone();
            z.par_chunks_mut(cols).for_each(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            });
            (n.shape.clone(), z, n.needs_grad)
        };
        self.tape.push(shape, data, Op::LogSoftmax { a: self.id }, needs)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    /// Uses the biased (1/d) variance.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> OpResult<'t> {
        let (shape, data, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (nx, ng, nb) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *nx.shape.last().unwrap_or(&1);
            if ng.shape != [d] || nb.shape != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: nx.shape.clone(),
                    rhs: ng.shape.clone(),
                });
            }
            let rows = nx.data.len() / d;
            let mut xhat = vec![0.0; nx.data.len()];
            let mut rstd = vec![0.0; rows];
            xhat.par_chunks_mut(d)
                .zip(rstd.par_iter_mut())
                .zip(nx.data.par_chunks(d))
                .for_each(|((xh, rs), x)| {
                    let mean = x.iter().sum::<f64>() / d as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    *rs = 1.0 / (var + eps).sqrt();
                    for (h, v) in xh.iter_mut().zip(x) {
                        *h = (v - mean) * *rs;
                    }
                });
            let mut out = xhat.clone();
            for row in out.chunks_mut(d) {
                for ((o, gv), bv) in row.iter_mut().zip(&ng.data).zip(&nb.data) {
                    *o = *o * gv + bv;
                }
            }
            (nx.shape.clone(), out, xhat, rstd)
        };
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Embedding lookup: rows `ids` of a 2-D table.
    pub fn gather_rows(self, ids: &[usize]) -> OpResult<'t> {
        let (shape, data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if n.shape.len() != 2 {
                return Err(TensorError::Contract(format!(
                    "gather_rows needs a 2-D table, got {:?}",
                    n.shape
                )));
            }
            let (rows, d) = (n.shape[0], n.shape[1]);
            if ids.is_empty() {
                return Err(TensorError::Contract("gather_rows with no ids".into()));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::Range {
                        op: "gather_rows",
                        index: id,
                        bound: rows,
                    });
                }
                data.extend_from_slice(&n.data[id * d..(id + 1) * d]);
            }
            (vec![ids.len(), d], data, n.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Picks `self[.., r, idx[r]]` from each row of the last axis.
    pub fn take_along_rows(self, idx: &[usize]) -> OpResult<'t> {
        let (shape, data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let cols = *n.shape.last().unwrap_or(&1);
            let rows = n.data.len() / cols;
            if idx.len() != rows {
                return Err(TensorError::Shape {
                    op: "take_along_rows",
                    lhs: n.shape.clone(),
                    rhs: vec![idx.len()],
                });
            }
            let mut data = Vec::with_capacity(rows);
            for (r, &j) in idx.iter().enumerate() {
                if j >= cols {
                    return Err(TensorError::Range {
                        op: "take_along_rows",
                        index: j,
                        bound: cols,
                    });
                }
                data.push(n.data[r * cols + j]);
            }
            let shape = n.shape[..n.shape.len().saturating_sub(1)].to_vec();
            (shape, data, n.needs_grad)
        };
        Ok(self.tape.push(
            shape,
            data,
            Op::TakeAlongRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> OpResult<'t> {
        let (data, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            if shape.iter().product::<usize>() != n.data.len() || shape.contains(&0) {
                return Err(TensorError::Shape {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (n.data.clone(), n.needs_grad)
        };
        Ok(self
            .tape
            .push(shape.to_vec(), data, Op::Reshape { a: self.id }, needs))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> OpResult<'t> {
        let (shape, data, map, needs) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let mut seen = vec![false; n.shape.len()];
            let valid = perm.len() == n.shape.len()
                && perm
                    .iter()
                    .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
            if !valid {
                return Err(TensorError::Shape {
                    op: "permute",
                    lhs: n.shape.clone(),
                    rhs: perm.to_vec(),
                });
            }
            let (shape, map) = permute_map(&n.shape, perm);
            let data = map.iter().map(|&i| n.data[i]).collect();
            (shape, data, map, n.needs_grad)
        };
        Ok(self
            .tape
            .push(shape, data, Op::Permute { a: self.id, map }, needs))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> OpResult<'t> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Contract("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn add_bias(z: &mut [f64], shape: &[usize], bias: &Tensor) -> Result<(), TensorError> {
    let mismatch = || TensorError::Shape {
        op: "softmax",
        lhs: shape.to_vec(),
        rhs: bias.shape().to_vec(),
    };
    let out = broadcast_shape(shape, bias.shape()).ok_or_else(mismatch)?;
    if out != shape {
        return Err(mismatch());
    }
    if bias.shape() == shape {
        z.iter_mut().zip(bias.data()).for_each(|(v, b)| *v += b);
    } else {
        let map = broadcast_map(shape, bias.shape());
        z.iter_mut()
            .zip(map)
            .for_each(|(v, i)| *v += bias.data()[i]);
    }
    Ok(())
}
