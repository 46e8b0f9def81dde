use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A recorded primitive: operand handles plus whatever the backward rule
/// needs beyond the operand and output values already stored on the tape.
#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `out[i] = a[i] + b[i % len(b)]`
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    /// `out[i] = x[i] * mask[i / block]`, mask is constant.
    MulConst {
        x: Var,
        mask: Vec<T>,
        block: usize,
    },
    Sum {
        x: Var,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    Sigmoid {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
        d: usize,
    },
    Gelu {
        x: Var,
    },
    CrossEntropySoft {
        logits: Var,
        target: Var,
        probs: Vec<T>,
        rows: usize,
        cols: usize,
    },
    BceSoft {
        logits: Var,
        target: Var,
    },
    Reshape {
        x: Var,
    },
    /// `[n, t, d] -> [n, d]` picking one token.
    SelectToken {
        x: Var,
        index: usize,
        t: usize,
        d: usize,
    },
    /// `[n, t, d] -> [n, d]` averaging tokens.
    MeanTokens {
        x: Var,
        t: usize,
        d: usize,
    },
    /// `[n, t, d] -> [n, t_out, d]` keeping `index[s * t_out + j]` of sample `s`.
    GatherTokens {
        x: Var,
        index: Vec<usize>,
        t: usize,
        t_out: usize,
        d: usize,
    },
    /// `[n, t, d]`, rows with `masked[s * t + j]` replaced by `token [d]`.
    MaskFill {
        x: Var,
        token: Var,
        masked: Vec<bool>,
        d: usize,
    },
    /// `[n, t, d] -> [n, t + 1, d]` with `token [d]` in slot 0.
    PrependToken {
        x: Var,
        token: Var,
        t: usize,
        d: usize,
    },
    /// `[n, t, width] -> [n * heads, t, dh]` from columns `offset + h * dh ..`.
    HeadsSplit {
        x: Var,
        t: usize,
        width: usize,
        offset: usize,
        heads: usize,
        dh: usize,
    },
    /// `[n * heads, t, dh] -> [n, t, heads * dh]`
    HeadsMerge {
        x: Var,
        heads: usize,
        t: usize,
        dh: usize,
    },
    /// `[n, c, h, w] -> [n, patches, c * p * p]`
    Patchify {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::Sum { .. } => "sum",
            Op::Softmax { .. } => "softmax",
            Op::Sigmoid { .. } => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::CrossEntropySoft { .. } => "cross_entropy_soft",
            Op::BceSoft { .. } => "bce_soft",
            Op::Reshape { .. } => "reshape",
            Op::SelectToken { .. } => "select_token",
            Op::MeanTokens { .. } => "mean_tokens",
            Op::GatherTokens { .. } => "gather_tokens",
            Op::MaskFill { .. } => "mask_fill",
            Op::PrependToken { .. } => "prepend_token",
            Op::HeadsSplit { .. } => "heads_split",
            Op::HeadsMerge { .. } => "heads_merge",
            Op::Patchify { .. } => "patchify",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Record of a forward computation.
///
/// Nodes are appended in execution order, so every operand precedes its
/// consumers and reverse order is a valid topological order for backward.
/// A tape is built for one optimisation step and then dropped.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    macs: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn count_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        let requires_grad = self.op_requires_grad(&op);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op<T>) -> bool {
        let mut any = false;
        for_each_input(op, |v| any |= self.nodes[v.0].requires_grad);
        any
    }

    /// Records a leaf holding a copy of `tensor`'s values.
    pub fn leaf(&mut self, tensor: &Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    /// A new constant leaf with the same values as `v`: gradients never
    /// flow through it back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of a node, widened to `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].as_f64()
    }

    /// Copy of a node's values as an off-tape tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone())
            .expect("tape nodes always have consistent shapes")
    }

    /// Accumulated gradient of a node, `None` if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.nodes[v.0].value.len()],
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Adds `d loss / d node` into the gradient accumulator of every node
    /// that `loss` depends on and that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut adj);
            match &mut self.grads[id] {
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Applies the backward rule of node `id` given its adjoint `g`.
    fn propagate(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        let val = |v: Var| nodes[v.0].value.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |da| gemm_nt(m, n, k, g, val(b), da));
                acc(b, &mut |db| gemm_tn(m, k, n, val(a), g, db));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |da| {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &bv[s * k * n..(s + 1) * k * n];
                        let das = &mut da[s * m * k..(s + 1) * m * k];
                        if trans_b {
                            // c = a·bᵀ with b [n×k]: da = g·b
                            gemm_nn(m, n, k, gs, bs, das);
                        } else {
                            gemm_nt(m, n, k, gs, bs, das);
                        }
                    }
                });
                acc(b, &mut |db| {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &av[s * m * k..(s + 1) * m * k];
                        let dbs = &mut db[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // db [n×k] = gᵀ·a
                            gemm_tn(m, n, k, gs, as_, dbs);
                        } else {
                            gemm_tn(m, k, n, as_, gs, dbs);
                        }
                    }
                });
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                acc(x, &mut |dx| gemm_nt(rows, out, inp, g, val(w), dx));
                acc(w, &mut |dw| gemm_tn(rows, inp, out, val(x), g, dw));
                if let Some(b) = b {
                    acc(b, &mut |db| {
                        for grow in g.chunks_exact(out) {
                            for (d, &gv) in db.iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| add_into(db, g));
            }
            &Op::AddBroadcast { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| {
                    for chunk in g.chunks_exact(db.len()) {
                        add_into(db, chunk);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |da| {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                });
            }
            &Op::Scale { x, s } => acc(x, &mut |dx| {
                for (d, &gv) in dx.iter_mut().zip(g) {
                    *d += gv * s;
                }
            }),
            Op::MulConst { x, mask, block } => acc(*x, &mut |dx| {
                for (i, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                    *d += gv * mask[i / block];
                }
            }),
            &Op::Sum { x } => acc(x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            &Op::Softmax { x, cols } => {
                let y = &node.value;
                acc(x, &mut |dx| {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let mut dot = T::zero();
                        for (&gv, &yv) in grow.iter().zip(yrow) {
                            dot += gv * yv;
                        }
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            &Op::Sigmoid { x } => {
                let y = &node.value;
                acc(x, &mut |dx| {
                    for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (T::one() - yv);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                d,
            } => {
                let (x, gamma, beta, d) = (*x, *gamma, *beta, *d);
                let xv = val(x);
                let gv = val(gamma);
                let inv_d = T::lit(1.0 / d as f64);
                acc(x, &mut |dx| {
                    for r in 0..xv.len() / d {
                        let xs = &xv[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for j in 0..d {
                            let dy = gs[j] * gv[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * (xs[j] - mu) * rs;
                        }
                        let (m1, m2) = (sum_dy * inv_d, sum_dy_xhat * inv_d);
                        for j in 0..d {
                            let xhat = (xs[j] - mu) * rs;
                            dx[r * d + j] += rs * (gs[j] * gv[j] - m1 - xhat * m2);
                        }
                    }
                });
                acc(gamma, &mut |dgamma| {
                    for r in 0..xv.len() / d {
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            dgamma[j] += g[r * d + j] * xhat;
                        }
                    }
                });
                acc(beta, &mut |dbeta| {
                    for grow in g.chunks_exact(d) {
                        add_into(dbeta, grow);
                    }
                });
            }
            &Op::Gelu { x } => {
                let xv = val(x);
                acc(x, &mut |dx| {
                    for ((d, &gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(xi);
                    }
                });
            }
            Op::CrossEntropySoft {
                logits,
                target,
                probs,
                rows,
                cols,
            } => {
                let tv = val(*target);
                let scale = g[0] / T::lit(*rows as f64);
                let cols = *cols;
                acc(*logits, &mut |dl| {
                    for r in 0..*rows {
                        let t = &tv[r * cols..(r + 1) * cols];
                        let p = &probs[r * cols..(r + 1) * cols];
                        let mass: T = t.iter().copied().sum();
                        for c in 0..cols {
                            dl[r * cols + c] += scale * (mass * p[c] - t[c]);
                        }
                    }
                });
            }
            &Op::BceSoft { logits, target } => {
                let (zv, tv) = (val(logits), val(target));
                let scale = g[0] / T::lit(zv.len() as f64);
                acc(logits, &mut |dl| {
                    for ((d, &z), &t) in dl.iter_mut().zip(zv).zip(tv) {
                        *d += scale * (sigmoid(z) - t);
                    }
                });
            }
            &Op::Reshape { x } => acc(x, &mut |dx| add_into(dx, g)),
            &Op::SelectToken { x, index, t, d } => acc(x, &mut |dx| {
                for (s, grow) in g.chunks_exact(d).enumerate() {
                    add_into(&mut dx[(s * t + index) * d..(s * t + index + 1) * d], grow);
                }
            }),
            &Op::MeanTokens { x, t, d } => {
                let inv = T::lit(1.0 / t as f64);
                acc(x, &mut |dx| {
                    for (s, grow) in g.chunks_exact(d).enumerate() {
                        for j in 0..t {
                            let row = &mut dx[(s * t + j) * d..(s * t + j + 1) * d];
                            for (r, &gv) in row.iter_mut().zip(grow) {
                                *r += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::GatherTokens {
                x,
                index,
                t,
                t_out,
                d,
            } => {
                let (t, t_out, d) = (*t, *t_out, *d);
                acc(*x, &mut |dx| {
                    for (row, &src) in index.iter().enumerate() {
                        let s = row / t_out;
                        add_into(
                            &mut dx[(s * t + src) * d..(s * t + src + 1) * d],
                            &g[row * d..(row + 1) * d],
                        );
                    }
                });
            }
            Op::MaskFill {
                x,
                token,
                masked,
                d,
            } => {
                let d = *d;
                acc(*x, &mut |dx| {
                    for (row, &m) in masked.iter().enumerate() {
                        if !m {
                            add_into(&mut dx[row * d..(row + 1) * d], &g[row * d..(row + 1) * d]);
                        }
                    }
                });
                acc(*token, &mut |dt| {
                    for (row, &m) in masked.iter().enumerate() {
                        if m {
                            add_into(dt, &g[row * d..(row + 1) * d]);
                        }
                    }
                });
            }
            &Op::PrependToken { x, token, t, d } => {
                let n = g.len() / ((t + 1) * d);
                acc(x, &mut |dx| {
                    for s in 0..n {
                        add_into(
                            &mut dx[s * t * d..(s + 1) * t * d],
                            &g[(s * (t + 1) + 1) * d..(s + 1) * (t + 1) * d],
                        );
                    }
                });
                acc(token, &mut |dt| {
                    for s in 0..n {
                        add_into(dt, &g[s * (t + 1) * d..(s * (t + 1) + 1) * d]);
                    }
                });
            }
            &Op::HeadsSplit {
                x,
                t,
                width,
                offset,
                heads,
                dh,
            } => acc(x, &mut |dx| {
                let n = g.len() / (heads * t * dh);
                for s in 0..n {
                    for h in 0..heads {
                        for j in 0..t {
                            let src = ((s * heads + h) * t + j) * dh;
                            let dst = (s * t + j) * width + offset + h * dh;
                            add_into(&mut dx[dst..dst + dh], &g[src..src + dh]);
                        }
                    }
                }
            }),
            &Op::HeadsMerge { x, heads, t, dh } => acc(x, &mut |dx| {
                let n = g.len() / (heads * t * dh);
                let width = heads * dh;
                for s in 0..n {
                    for h in 0..heads {
                        for j in 0..t {
                            let dst = ((s * heads + h) * t + j) * dh;
                            let src = (s * t + j) * width + h * dh;
                            add_into(&mut dx[dst..dst + dh], &g[src..src + dh]);
                        }
                    }
                }
            }),
            &Op::Patchify { x, c, h, w, p } => acc(x, &mut |dx| {
                for_each_patch_pixel(dx.len() / (c * h * w), c, h, w, p, |img, tok| {
                    dx[img] += g[tok];
                });
            }),
        }
    }
}

/// Calls `f(image_index, token_index)` for every pixel of an `[n, c, h, w]`
/// batch, pairing it with its slot in the `[n, patches, c * p * p]` layout.
pub(crate) fn for_each_patch_pixel(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (gh, gw) = (h / p, w / p);
    let feat = c * p * p;
    for s in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                let tok_base = (s * gh * gw + py * gw + px) * feat;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let img = ((s * c + ch) * h + py * p + dy) * w + px * p + dx;
                            f(img, tok_base + (ch * p + dy) * p + dx);
                        }
                    }
                }
            }
        }
    }
}

fn for_each_input<T>(op: &Op<T>, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, .. }
        | Op::BatchMatMul { a, b, .. }
        | Op::Add { a, b }
        | Op::AddBroadcast { a, b }
        | Op::Mul { a, b } => {
            f(*a);
            f(*b);
        }
        Op::Linear { x, w, b, .. } => {
            f(*x);
            f(*w);
            if let Some(b) = b {
                f(*b);
            }
        }
        Op::Scale { x, .. }
        | Op::MulConst { x, .. }
        | Op::Sum { x }
        | Op::Softmax { x, .. }
        | Op::Sigmoid { x }
        | Op::Gelu { x }
        | Op::Reshape { x }
        | Op::SelectToken { x, .. }
        | Op::MeanTokens { x, .. }
        | Op::GatherTokens { x, .. }
        | Op::HeadsSplit { x, .. }
        | Op::HeadsMerge { x, .. }
        | Op::Patchify { x, .. } => f(*x),
        Op::LayerNorm { x, gamma, beta, .. } => {
            f(*x);
            f(*gamma);
            f(*beta);
        }
        // the target of a soft loss is a constant by contract
        Op::CrossEntropySoft { logits, .. } | Op::BceSoft { logits, .. } => f(*logits),
        Op::MaskFill { x, token, .. } | Op::PrependToken { x, token, .. } => {
            f(*x);
            f(*token);
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `sqrt(2 / pi)`
pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4;
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh approximation `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let th = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}
