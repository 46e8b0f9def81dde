use super::kernels::{gemm_nn, gemm_nt};
use super::tape::{for_each_patch_pixel, gelu, sigmoid, Op};
use super::{numel, Real, Tape, Var};
use crate::error::{Error, Result};

/// Row-sum tolerance for soft targets.
const TARGET_SUM_TOL: f64 = 1e-6;

impl<T: Real> Tape<T> {
    /// `[m×k] · [k×n] -> [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        self.count_macs(m * k * n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// Batched product over the leading axis: `[b, m, k] · [b, k, n]`, or
    /// `[b, m, k] · [b, n, k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for s in 0..batch {
                let as_ = &av[s * m * k..(s + 1) * m * k];
                let bs = &bv[s * k * n..(s + 1) * k * n];
                let os = &mut out[s * m * n..(s + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, as_, bs, os);
                } else {
                    gemm_nn(m, k, n, as_, bs, os);
                }
            }
        }
        self.count_macs(batch * m * k * n);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// Affine map over the last axis: `x [..., in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (inp, out) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::shape("linear bias", self.shape(b), &[out]));
            }
        }
        let rows = numel(&sx) / inp;
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nn(rows, inp, out, self.value(x), self.value(w), &mut y);
        self.count_macs(rows * inp * out);
        let mut shape = sx;
        *shape.last_mut().unwrap() = out;
        Ok(self.push(
            shape,
            y,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }))
    }

    /// `a + b` where `b` repeats along the leading axes of `a`; the shape
    /// of `b` must be a suffix of the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(a)
            .chunks_exact(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(sa.to_vec(), out, Op::AddBroadcast { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, s })
    }

    /// `out[i] = x[i] * mask[i / block]` with a constant mask.
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>, block: usize) -> Result<Var> {
        let n = self.value(x).len();
        if block == 0 || mask.len() * block != n {
            return Err(Error::shape("mul_const", self.shape(x), &[mask.len(), block]));
        }
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[i / block])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, mask, block }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = last_dim(self.shape(x), "softmax")?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_row(row);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, cols }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&z| sigmoid(z)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid { x })
    }

    /// Per-row normalisation over the last axis followed by `gamma, beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x), "layer_norm")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if !(eps > 0.0) {
            return Err(Error::Range {
                what: "layer_norm eps",
                value: eps,
                range: "(0, inf)",
            });
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let inv_d = T::lit(1.0 / d as f64);
        let eps = T::lit(eps);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.len()];
        for (xs, os) in xv.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mu = xs.iter().copied().sum::<T>() * inv_d;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..d {
                os[j] = (xs[j] - mu) * rs * gv[j] + bv[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                d,
            },
        ))
    }

    /// Gaussian-error linear unit, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu { x })
    }

    /// `-(1/N) sum_i sum_c target[i,c] log softmax(logits)[i,c]`.
    ///
    /// `target` must be a constant whose rows sum to one.
    pub fn cross_entropy_soft(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (rows, cols) = self.check_pair(logits, target, "cross_entropy_soft")?;
        let tv = self.value(target);
        for (r, row) in tv.chunks_exact(cols).enumerate() {
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > TARGET_SUM_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
                return Err(Error::TargetDistribution { row: r, sum });
            }
        }
        let zv = self.value(logits);
        let mut probs = vec![T::zero(); zv.len()];
        let mut total = T::zero();
        for ((zs, ts), ps) in zv
            .chunks_exact(cols)
            .zip(tv.chunks_exact(cols))
            .zip(probs.chunks_exact_mut(cols))
        {
            let max = zs.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in ps.iter_mut().zip(zs) {
                *p = (v - max).exp();
                z += *p;
            }
            let lse = max + z.ln();
            let mut row_loss = T::zero();
            for ((p, &v), &t) in ps.iter_mut().zip(zs).zip(ts) {
                *p /= z;
                row_loss += t * (lse - v);
            }
            total += row_loss;
        }
        let loss = total / T::lit(rows as f64);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropySoft {
                logits,
                target,
                probs,
                rows,
                cols,
            },
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`
    /// over all elements, in the stable logit form
    /// `max(z, 0) - z t + log(1 + exp(-|z|))`.
    pub fn bce_soft(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.check_pair(logits, target, "bce_soft")?;
        let (zv, tv) = (self.value(logits), self.value(target));
        if let Some(&bad) = tv.iter().find(|t| !(t.as_f64() >= 0.0 && t.as_f64() <= 1.0)) {
            return Err(Error::Range {
                what: "bce target",
                value: bad.as_f64(),
                range: "[0, 1]",
            });
        }
        let total: T = zv
            .iter()
            .zip(tv)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::lit(zv.len() as f64);
        Ok(self.push(Vec::new(), vec![loss], Op::BceSoft { logits, target }))
    }

    fn check_pair(&self, logits: Var, target: Var, op: &'static str) -> Result<(usize, usize)> {
        let (sl, st) = (self.shape(logits), self.shape(target));
        if sl.len() != 2 || sl != st {
            return Err(Error::shape(op, sl, st));
        }
        if self.requires_grad(target) {
            return Err(Error::Contract(format!(
                "{op}: target is attached to the gradient graph; detach it first"
            )));
        }
        Ok((sl[0], sl[1]))
    }

    /// `[n, t, d] -> [n, d]`
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, t, d) = dims3(self.shape(x), "select_token")?;
        if index >= t {
            return Err(Error::Index { index, len: t });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * d);
        for s in 0..n {
            out.extend_from_slice(&xv[(s * t + index) * d..(s * t + index + 1) * d]);
        }
        Ok(self.push(vec![n, d], out, Op::SelectToken { x, index, t, d }))
    }

    /// `[n, t, d] -> [n, d]`
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, t, d) = dims3(self.shape(x), "mean_tokens")?;
        let xv = self.value(x);
        let inv = T::lit(1.0 / t as f64);
        let mut out = vec![T::zero(); n * d];
        for s in 0..n {
            let o = &mut out[s * d..(s + 1) * d];
            for j in 0..t {
                for (ov, &v) in o.iter_mut().zip(&xv[(s * t + j) * d..(s * t + j + 1) * d]) {
                    *ov += v;
                }
            }
            for ov in o.iter_mut() {
                *ov *= inv;
            }
        }
        Ok(self.push(vec![n, d], out, Op::MeanTokens { x, t, d }))
    }

    /// Keeps, for each sample `s`, the tokens `keep[s]` in the given order.
    /// All samples must keep the same number of tokens.
    pub fn gather_tokens(&mut self, x: Var, keep: &[Vec<usize>]) -> Result<Var> {
        let (n, t, d) = dims3(self.shape(x), "gather_tokens")?;
        if keep.len() != n {
            return Err(Error::shape("gather_tokens", self.shape(x), &[keep.len()]));
        }
        let t_out = keep[0].len();
        if t_out == 0 {
            return Err(Error::Contract("gather_tokens: nothing kept".into()));
        }
        let mut index = Vec::with_capacity(n * t_out);
        for k in keep {
            if k.len() != t_out {
                return Err(Error::Contract(
                    "gather_tokens: samples keep different token counts".into(),
                ));
            }
            if let Some(&bad) = k.iter().find(|&&i| i >= t) {
                return Err(Error::Index { index: bad, len: t });
            }
            index.extend_from_slice(k);
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * t_out * d);
        for (row, &src) in index.iter().enumerate() {
            let s = row / t_out;
            out.extend_from_slice(&xv[(s * t + src) * d..(s * t + src + 1) * d]);
        }
        Ok(self.push(
            vec![n, t_out, d],
            out,
            Op::GatherTokens {
                x,
                index,
                t,
                t_out,
                d,
            },
        ))
    }

    /// Replaces token rows flagged in `masked` (`n * t` flags) by `token`.
    pub fn mask_fill(&mut self, x: Var, token: Var, masked: Vec<bool>) -> Result<Var> {
        let (n, t, d) = dims3(self.shape(x), "mask_fill")?;
        if self.shape(token) != [d] || masked.len() != n * t {
            return Err(Error::shape("mask_fill", self.shape(x), self.shape(token)));
        }
        let (xv, tv) = (self.value(x), self.value(token));
        let mut out = xv.to_vec();
        for (row, &m) in masked.iter().enumerate() {
            if m {
                out[row * d..(row + 1) * d].copy_from_slice(tv);
            }
        }
        Ok(self.push(
            vec![n, t, d],
            out,
            Op::MaskFill {
                x,
                token,
                masked,
                d,
            },
        ))
    }

    /// `[n, t, d] -> [n, t + 1, d]` with `token` as the first row of each sample.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (n, t, d) = dims3(self.shape(x), "prepend_token")?;
        if self.shape(token) != [d] {
            return Err(Error::shape("prepend_token", self.shape(x), self.shape(token)));
        }
        let (xv, tv) = (self.value(x), self.value(token));
        let mut out = Vec::with_capacity(n * (t + 1) * d);
        for s in 0..n {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[s * t * d..(s + 1) * t * d]);
        }
        Ok(self.push(vec![n, t + 1, d], out, Op::PrependToken { x, token, t, d }))
    }

    /// Splits columns `offset .. offset + heads * dh` of `[n, t, width]`
    /// into `heads` slices of width `dh`, giving `[n * heads, t, dh]`.
    pub fn heads_split(&mut self, x: Var, offset: usize, heads: usize, dh: usize) -> Result<Var> {
        let (n, t, width) = dims3(self.shape(x), "heads_split")?;
        if offset + heads * dh > width {
            return Err(Error::shape("heads_split", self.shape(x), &[offset, heads, dh]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * heads * t * dh);
        for s in 0..n {
            for h in 0..heads {
                for j in 0..t {
                    let src = (s * t + j) * width + offset + h * dh;
                    out.extend_from_slice(&xv[src..src + dh]);
                }
            }
        }
        Ok(self.push(
            vec![n * heads, t, dh],
            out,
            Op::HeadsSplit {
                x,
                t,
                width,
                offset,
                heads,
                dh,
            },
        ))
    }

    /// Inverse of [`Tape::heads_split`]: `[n * heads, t, dh] -> [n, t, heads * dh]`.
    pub fn heads_merge(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (nh, t, dh) = dims3(self.shape(x), "heads_merge")?;
        if heads == 0 || nh % heads != 0 {
            return Err(Error::shape("heads_merge", self.shape(x), &[heads]));
        }
        let n = nh / heads;
        let width = heads * dh;
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * t * width];
        for s in 0..n {
            for h in 0..heads {
                for j in 0..t {
                    let src = ((s * heads + h) * t + j) * dh;
                    let dst = (s * t + j) * width + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        Ok(self.push(vec![n, t, width], out, Op::HeadsMerge { x, heads, t, dh }))
    }

    /// Cuts `[n, c, h, w]` images into non-overlapping `p×p` patches in
    /// row-major patch order; each patch is flattened channel-major into
    /// `c * p * p` features.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::shape("patchify", s, &[p, p]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for_each_patch_pixel(n, c, h, w, p, |img, tok| out[tok] = xv[img]);
        Ok(self.push(
            vec![n, (h / p) * (w / p), c * p * p],
            out,
            Op::Patchify { x, c, h, w, p },
        ))
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape.last() {
        Some(&d) if d >= 1 => Ok(d),
        _ => Err(Error::shape(op, shape, &[])),
    }
}

fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, t, d] => Ok((n, t, d)),
        _ => Err(Error::shape(op, shape, &[])),
    }
}
