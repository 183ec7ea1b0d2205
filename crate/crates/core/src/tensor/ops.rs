//! Operations on [`Tensor`]: each computes its value eagerly and registers
//! a backward rule that accumulates into parent gradients.

use rand::Rng;

use super::kernels::{
    axis_split, broadcast_shape, for_each_offset, for_each_offset2, gemm_2d, gemm_batched,
    reduce_into, strides_for,
};
use super::Tensor;
use crate::error::{CoreError, Result};
use crate::scalar::{c, Scalar};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Tensor<S> {
    // ── elementwise binary ──────────────────────────────────────────

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary_broadcast(other, "add", |a, b| a + b, BinKind::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary_broadcast(other, "sub", |a, b| a - b, BinKind::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary_broadcast(other, "mul", |a, b| a * b, BinKind::Mul)
    }

    fn binary_broadcast(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(S, S) -> S,
        kind: BinKind,
    ) -> Result<Self> {
        let out_shape = broadcast_shape(self.shape(), other.shape(), op)?;
        let numel: usize = out_shape.iter().product();
        let mut data = vec![S::zero(); numel];
        {
            let a = self.data();
            let b = other.data();
            if self.shape() == other.shape() {
                for ((o, &x), &y) in data.iter_mut().zip(a.iter()).zip(b.iter()) {
                    *o = f(x, y);
                }
            } else {
                let sa = strides_for(&out_shape, self.shape());
                let sb = strides_for(&out_shape, other.shape());
                for_each_offset2(&out_shape, &sa, &sb, |i, ia, ib| {
                    data[i] = f(a[ia], b[ib]);
                });
            }
        }
        let (a_t, b_t) = (self.clone(), other.clone());
        let out_shape_bw = out_shape.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            bin_backward(&a_t, &b_t, g, &out_shape_bw, kind);
        });
        Ok(Self::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    /// Elementwise `self * mul + add` with scalar constants.
    pub fn affine(&self, mul: f64, add: f64) -> Self {
        let (m, b) = (c::<S>(mul), c::<S>(add));
        let data: Vec<S> = self.data().iter().map(|&x| x * m + b).collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for (gi, &go) in ga.iter_mut().zip(g.iter()) {
                        *gi += go * m;
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn neg(&self) -> Self {
        self.affine(-1.0, 0.0)
    }

    // ── elementwise unary ───────────────────────────────────────────

    pub fn exp(&self) -> Self {
        let data: Vec<S> = self.data().iter().map(|x| x.exp()).collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for ((gi, &go), &o) in ga.iter_mut().zip(g.iter()).zip(out.iter()) {
                        *gi += go * o;
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn log(&self) -> Self {
        let data: Vec<S> = self.data().iter().map(|x| x.ln()).collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                let x = a_t.to_vec();
                a_t.with_grad_mut(|ga| {
                    for ((gi, &go), &xi) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *gi += go / xi;
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn sigmoid(&self) -> Self {
        let data: Vec<S> = self.data().iter().map(|&x| sigmoid_stable(x)).collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for ((gi, &go), &s) in ga.iter_mut().zip(g.iter()).zip(out.iter()) {
                        *gi += go * s * (S::one() - s);
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Self {
        let (k, a3) = (c::<S>(GELU_C), c::<S>(GELU_A));
        let half = c::<S>(0.5);
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&x| {
                let t = (k * (x + a3 * x * x * x)).tanh();
                half * x * (S::one() + t)
            })
            .collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                let x = a_t.to_vec();
                a_t.with_grad_mut(|ga| {
                    let three = c::<S>(3.0);
                    for ((gi, &go), &xi) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        let inner = k * (xi + a3 * xi * xi * xi);
                        let t = inner.tanh();
                        let sech2 = S::one() - t * t;
                        let d_inner = k * (S::one() + three * a3 * xi * xi);
                        *gi += go * (half * (S::one() + t) + half * xi * sech2 * d_inner);
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn square(&self) -> Self {
        let data: Vec<S> = self.data().iter().map(|&x| x * x).collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                let x = a_t.to_vec();
                let two = c::<S>(2.0);
                a_t.with_grad_mut(|ga| {
                    for ((gi, &go), &xi) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *gi += go * two * xi;
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    /// Value-equal tensor through which no gradient flows.
    pub fn detach(&self) -> Self {
        Self::from_vec(self.to_vec(), self.shape()).expect("detach preserves shape")
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// Batched matrix multiply. `self` is `[..batch, m, k]`; `other` is
    /// either `[k, n]` (shared weight) or `[..batch, k, n]` with identical
    /// batch dimensions.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let ashape = self.shape();
        let bshape = other.shape();
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(CoreError::shape("matmul", ashape, bshape));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let b_batched = bshape.len() > 2;
        if k != kb || (b_batched && bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2]) {
            return Err(CoreError::shape("matmul", ashape, bshape));
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);

        let mut data = vec![S::zero(); batch * m * n];
        gemm_batched(
            batch,
            m,
            k,
            n,
            &self.data(),
            false,
            true,
            &other.data(),
            false,
            b_batched,
            S::zero(),
            &mut data,
        );

        let (a_t, b_t) = (self.clone(), other.clone());
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                // dA = dC · B^T, per batch element
                let b_data = b_t.data();
                a_t.with_grad_mut(|ga| {
                    gemm_batched(
                        batch, m, n, k, g, false, true, &b_data, true, b_batched, S::one(), ga,
                    );
                });
            }
            if b_t.needs_grad() {
                let a_data = a_t.data();
                b_t.with_grad_mut(|gb| {
                    if b_batched {
                        // dB = A^T · dC, per batch element
                        gemm_batched(
                            batch,
                            k,
                            m,
                            n,
                            &a_data,
                            true,
                            true,
                            g,
                            false,
                            true,
                            S::one(),
                            gb,
                        );
                    } else {
                        // shared weight: single accumulation over all rows
                        gemm_2d(k, batch * m, n, &a_data, true, g, false, S::one(), gb);
                    }
                });
            }
        });
        Ok(Self::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            backward,
        ))
    }

    // ── softmax / layernorm ─────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape().len() {
            return Err(CoreError::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut data = self.to_vec();
        {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = S::neg_infinity();
                    for a in 0..len {
                        mx = mx.max(data[base + a * inner]);
                    }
                    let mut sum = S::zero();
                    for a in 0..len {
                        let e = (data[base + a * inner] - mx).exp();
                        data[base + a * inner] = e;
                        sum += e;
                    }
                    for a in 0..len {
                        data[base + a * inner] = data[base + a * inner] / sum;
                    }
                }
            }
        }
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], out: &[S]| {
            if !a_t.needs_grad() {
                return;
            }
            a_t.with_grad_mut(|ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = S::zero();
                        for a in 0..len {
                            let idx = base + a * inner;
                            dot += g[idx] * out[idx];
                        }
                        for a in 0..len {
                            let idx = base + a * inner;
                            ga[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        });
        Ok(Self::from_op(shape, data, vec![self.clone()], backward))
    }

    /// Layer normalization over the last axis: standardize then scale/shift.
    pub fn layernorm(&self, gain: &Self, bias: &Self, eps: f64) -> Result<Self> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| {
            CoreError::InvalidArgument("layernorm on rank-0 tensor".into())
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(CoreError::shape("layernorm", &shape, gain.shape()));
        }
        let eps_s = c::<S>(eps);
        let rows = self.numel() / d;
        let inv_d = S::one() / c::<S>(d as f64);
        let mut data = vec![S::zero(); self.numel()];
        {
            let x = self.data();
            let gv = gain.data();
            let bv = bias.data();
            for r in 0..rows {
                let xs = &x[r * d..(r + 1) * d];
                let mean = xs.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
                let var = xs
                    .iter()
                    .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                    * inv_d;
                let inv_std = S::one() / (var + eps_s).sqrt();
                for j in 0..d {
                    data[r * d + j] = (xs[j] - mean) * inv_std * gv[j] + bv[j];
                }
            }
        }
        let (x_t, g_t, b_t) = (self.clone(), gain.clone(), bias.clone());
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            let x = x_t.to_vec();
            let gv = g_t.to_vec();
            let d_f = c::<S>(d as f64);
            let mut dgain = vec![S::zero(); d];
            let mut dbias = vec![S::zero(); d];
            let mut dx = vec![S::zero(); x.len()];
            let mut xhat = vec![S::zero(); d];
            let mut dxhat = vec![S::zero(); d];
            for r in 0..rows {
                let xs = &x[r * d..(r + 1) * d];
                let gs = &g[r * d..(r + 1) * d];
                let mean = xs.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
                let var = xs
                    .iter()
                    .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                    * inv_d;
                let inv_std = S::one() / (var + eps_s).sqrt();
                for j in 0..d {
                    xhat[j] = (xs[j] - mean) * inv_std;
                    dxhat[j] = gs[j] * gv[j];
                    dgain[j] += gs[j] * xhat[j];
                    dbias[j] += gs[j];
                }
                let sum_dxhat = dxhat.iter().fold(S::zero(), |a, &v| a + v);
                let sum_dxhat_xhat = dxhat
                    .iter()
                    .zip(xhat.iter())
                    .fold(S::zero(), |a, (&p, &q)| a + p * q);
                for j in 0..d {
                    dx[r * d + j] = inv_std * inv_d
                        * (d_f * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                }
            }
            if x_t.needs_grad() {
                x_t.accumulate_grad(&dx);
            }
            if g_t.needs_grad() {
                g_t.accumulate_grad(&dgain);
            }
            if b_t.needs_grad() {
                b_t.accumulate_grad(&dbias);
            }
        });
        Ok(Self::from_op(
            shape,
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            backward,
        ))
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        super::check_shape_len(new_shape, self.numel())?;
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.accumulate_grad(g);
            }
        });
        Ok(Self::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            backward,
        ))
    }

    /// Reorder axes; `axes` is a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(CoreError::InvalidArgument(format!(
                "invalid permutation {axes:?} for shape {:?}",
                self.shape()
            )));
        }
        let in_shape = self.shape().to_vec();
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = vec![S::zero(); self.numel()];
        {
            let x = self.data();
            for_each_offset(&out_shape, &out_strides, |i, off| {
                data[i] = x[off];
            });
        }
        let a_t = self.clone();
        let out_shape_bw = out_shape.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for_each_offset(&out_shape_bw, &out_strides, |i, off| {
                        ga[off] += g[i];
                    });
                });
            }
        });
        Ok(Self::from_op(out_shape, data, vec![self.clone()], backward))
    }

    /// Tile a tensor along a new leading axis: `[..] -> [n, ..]`.
    pub fn expand_front(&self, n: usize) -> Self {
        let block = self.numel();
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        let mut data = Vec::with_capacity(n * block);
        {
            let x = self.data();
            for _ in 0..n {
                data.extend_from_slice(&x);
            }
        }
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for chunk in g.chunks(block) {
                        for (gi, &go) in ga.iter_mut().zip(chunk.iter()) {
                            *gi += go;
                        }
                    }
                });
            }
        });
        Self::from_op(shape, data, vec![self.clone()], backward)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| CoreError::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(CoreError::InvalidArgument(format!(
                "concat axis {axis} out of range"
            )));
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape().len() != rank {
                return Err(CoreError::shape("concat", first.shape(), p.shape()));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(CoreError::shape("concat", first.shape(), p.shape()));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let numel: usize = out_shape.iter().product();
        let mut data = vec![S::zero(); numel];
        let mut offset = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let len = p.shape()[axis];
            let x = p.data();
            for o in 0..outer {
                let src = &x[o * len * inner..(o + 1) * len * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                data[dst_base..dst_base + len * inner].copy_from_slice(src);
            }
            spans.push((offset, len));
            offset += len;
        }
        let parents: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
        let parents_bw = parents.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            for (p, &(off, len)) in parents_bw.iter().zip(spans.iter()) {
                if !p.needs_grad() {
                    continue;
                }
                p.with_grad_mut(|gp| {
                    for o in 0..outer {
                        let src_base = o * axis_total * inner + off * inner;
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(g[src_base..src_base + len * inner].iter())
                        {
                            *d += s;
                        }
                    }
                });
            }
        });
        Ok(Self::from_op(out_shape, data, parents, backward))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(CoreError::InvalidArgument(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of shape {shape:?}"
            )));
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = vec![S::zero(); outer * len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let src = o * full * inner + start * inner;
                data[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&x[src..src + len * inner]);
            }
        }
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for o in 0..outer {
                        let dst = o * full * inner + start * inner;
                        for (gi, &go) in ga[dst..dst + len * inner]
                            .iter_mut()
                            .zip(g[o * len * inner..(o + 1) * len * inner].iter())
                        {
                            *gi += go;
                        }
                    }
                });
            }
        });
        Ok(Self::from_op(out_shape, data, vec![self.clone()], backward))
    }

    /// Row lookup into a `[rows, d]` table (embedding gather).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(CoreError::InvalidArgument(format!(
                "gather_rows expects a rank-2 table, got {shape:?}"
            )));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CoreError::InvalidArgument(format!(
                "row id {bad} out of vocabulary (size {rows})"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let x = self.data();
            for &i in ids {
                data.extend_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
        let a_t = self.clone();
        let ids_bw = ids.to_vec();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for (n, &i) in ids_bw.iter().enumerate() {
                        for (gi, &go) in
                            ga[i * d..(i + 1) * d].iter_mut().zip(g[n * d..(n + 1) * d].iter())
                        {
                            *gi += go;
                        }
                    }
                });
            }
        });
        Ok(Self::from_op(
            vec![ids.len(), d],
            data,
            vec![self.clone()],
            backward,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Self {
        let total = self.data().iter().fold(S::zero(), |a, &v| a + v);
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                let go = g[0];
                a_t.with_grad_mut(|ga| {
                    for gi in ga.iter_mut() {
                        *gi += go;
                    }
                });
            }
        });
        Self::from_op(vec![1], vec![total], vec![self.clone()], backward)
    }

    pub fn mean_all(&self) -> Self {
        let n = self.numel().max(1);
        self.sum_all().affine(1.0 / n as f64, 0.0)
    }

    /// Sum over one axis, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(CoreError::InvalidArgument(format!(
                "sum_axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![S::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for a in 0..len {
                    let base = o * len * inner + a * inner;
                    for i in 0..inner {
                        data[o * inner + i] += x[base + i];
                    }
                }
            }
        }
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = o * len * inner + a * inner;
                            for i in 0..inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
        });
        Ok(Self::from_op(out_shape, data, vec![self.clone()], backward))
    }

    // ── regularization / losses ─────────────────────────────────────

    /// Inverted dropout: keeps activations scaled by 1/(1-p) so evaluation
    /// needs no rescaling. `p` must lie in `[0, 1)`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = c::<S>(1.0 / (1.0 - p));
        let p_s = p;
        let mask: Vec<S> = (0..self.numel())
            .map(|_| {
                if rng.random::<f64>() < p_s {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                a_t.with_grad_mut(|ga| {
                    for ((gi, &go), &m) in ga.iter_mut().zip(g.iter()).zip(mask.iter()) {
                        *gi += go * m;
                    }
                });
            }
        });
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            backward,
        ))
    }

    /// Elementwise Huber penalty of a residual: `0.5 u^2` for `|u| <= delta`,
    /// else `delta (|u| - 0.5 delta)`.
    pub fn huber(&self, delta: f64) -> Self {
        let d = c::<S>(delta);
        let half = c::<S>(0.5);
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&u| {
                if u.abs() <= d {
                    half * u * u
                } else {
                    d * (u.abs() - half * d)
                }
            })
            .collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                let x = a_t.to_vec();
                a_t.with_grad_mut(|ga| {
                    for ((gi, &go), &u) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *gi += go * u.max(-d).min(d);
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    /// Asymmetric squared penalty of a residual `r`: weight `rho` when
    /// `r > 0`, `1 - rho` otherwise.
    pub fn expectile_sq(&self, rho: f64) -> Self {
        let (wp, wn) = (c::<S>(rho), c::<S>(1.0 - rho));
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&r| {
                let w = if r > S::zero() { wp } else { wn };
                w * r * r
            })
            .collect();
        let a_t = self.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                let x = a_t.to_vec();
                let two = c::<S>(2.0);
                a_t.with_grad_mut(|ga| {
                    for ((gi, &go), &r) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        let w = if r > S::zero() { wp } else { wn };
                        *gi += go * two * w * r;
                    }
                });
            }
        });
        Self::from_op(self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    /// Elementwise binary cross-entropy on logits, in the stable
    /// `max(x,0) - x y + ln(1 + e^{-|x|})` form. Labels must be 0/1 and do
    /// not receive gradients.
    pub fn bce_with_logits(&self, labels: &Self) -> Result<Self> {
        if self.shape() != labels.shape() {
            return Err(CoreError::shape("bce_with_logits", self.shape(), labels.shape()));
        }
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(labels.data().iter())
            .map(|(&x, &y)| x.max(S::zero()) - x * y + (S::one() + (-x.abs()).exp()).ln())
            .collect();
        let a_t = self.clone();
        let y_t = labels.clone();
        let backward = Box::new(move |g: &[S], _out: &[S]| {
            if a_t.needs_grad() {
                let x = a_t.to_vec();
                let y = y_t.to_vec();
                a_t.with_grad_mut(|ga| {
                    for (i, (gi, &go)) in ga.iter_mut().zip(g.iter()).enumerate() {
                        *gi += go * (sigmoid_stable(x[i]) - y[i]);
                    }
                });
            }
        });
        Ok(Self::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), labels.clone()],
            backward,
        ))
    }
}

/// Mean squared error between two same-shape tensors.
pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(a.sub(b)?.square().mean_all())
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

fn bin_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: &[S],
    out_shape: &[usize],
    kind: BinKind,
) {
    let same_tensor = a.id() == b.id();
    match kind {
        BinKind::Add | BinKind::Sub => {
            let sign = if matches!(kind, BinKind::Sub) { -S::one() } else { S::one() };
            if a.needs_grad() {
                if a.shape() == out_shape {
                    a.accumulate_grad(g);
                } else {
                    a.with_grad_mut(|ga| reduce_into(g, out_shape, a.shape(), ga));
                }
            }
            if b.needs_grad() {
                if b.shape() == out_shape && sign == S::one() {
                    b.accumulate_grad(g);
                } else {
                    let sb = strides_for(out_shape, b.shape());
                    b.with_grad_mut(|gb| {
                        for_each_offset(out_shape, &sb, |i, off| {
                            gb[off] += g[i] * sign;
                        });
                    });
                }
            }
        }
        BinKind::Mul => {
            let sa = strides_for(out_shape, a.shape());
            let sb = strides_for(out_shape, b.shape());
            if same_tensor {
                if a.needs_grad() {
                    let xa = a.to_vec();
                    let two = c::<S>(2.0);
                    a.with_grad_mut(|ga| {
                        for_each_offset2(out_shape, &sa, &sb, |i, ia, _| {
                            ga[ia] += two * g[i] * xa[ia];
                        });
                    });
                }
                return;
            }
            if a.needs_grad() {
                let xb = b.data();
                a.with_grad_mut(|ga| {
                    for_each_offset2(out_shape, &sa, &sb, |i, ia, ib| {
                        ga[ia] += g[i] * xb[ib];
                    });
                });
            }
            if b.needs_grad() {
                let xa = a.data();
                b.with_grad_mut(|gb| {
                    for_each_offset2(out_shape, &sa, &sb, |i, ia, ib| {
                        gb[ib] += g[i] * xa[ia];
                    });
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::<f64>::from_f64s(&[1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = Tensor::<f64>::from_f64s(&[3.0, -1.0, 2.5, 7.0], &[2, 2]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_close(&out.to_f64_vec(), &m.to_f64_vec(), 1e-12);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_f64s(&[1.0, 1.0], &[2, 1]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_close(&out.to_f64_vec(), &[3.0, 7.0], 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn batched_matmul_matches_loop() {
        let mut rng = stream(1, "test", 0);
        let a = Tensor::<f64>::randn(&[3, 2, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[3, 2, 5]);
        let (av, bv, ov) = (a.to_f64_vec(), b.to_f64_vec(), out.to_f64_vec());
        for bi in 0..3 {
            for i in 0..2 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for p in 0..4 {
                        s += av[bi * 8 + i * 4 + p] * bv[bi * 20 + p * 5 + j];
                    }
                    assert!((s - ov[bi * 10 + i * 5 + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::<f64>::from_f64s(&[0.0, 0.0], &[2]).unwrap();
        assert_close(&x.softmax(0).unwrap().to_f64_vec(), &[0.5, 0.5], 1e-12);
        let big = Tensor::<f64>::from_f64s(&[1000.0, 1000.0], &[2]).unwrap();
        let out = big.softmax(0).unwrap().to_f64_vec();
        assert!(out.iter().all(|v| v.is_finite()));
        assert_close(&out, &[0.5, 0.5], 1e-12);
    }

    #[test]
    fn layernorm_constant_and_two_point() {
        let gain = Tensor::<f64>::from_f64s(&[1.0, 1.0], &[2]).unwrap();
        let bias = Tensor::<f64>::from_f64s(&[0.0, 0.0], &[2]).unwrap();
        let constant = Tensor::<f64>::from_f64s(&[5.0, 5.0], &[2]).unwrap();
        let out = constant.layernorm(&gain, &bias, 1e-5).unwrap().to_f64_vec();
        assert_close(&out, &[0.0, 0.0], 1e-9);
        let two = Tensor::<f64>::from_f64s(&[1.0, 3.0], &[2]).unwrap();
        let out = two.layernorm(&gain, &bias, 1e-5).unwrap().to_f64_vec();
        assert_close(&out, &[-1.0, 1.0], 1e-4);
    }

    #[test]
    fn pointwise_values() {
        let z = Tensor::<f64>::scalar(0.0);
        assert!((z.sigmoid().item() - 0.5).abs() < 1e-12);
        // huber closed forms at delta = 1
        let u = Tensor::<f64>::from_f64s(&[0.5, 2.0], &[2]).unwrap();
        assert_close(&u.huber(1.0).to_f64_vec(), &[0.125, 1.5], 1e-12);
        // bce(0, 1) = ln 2
        let logit = Tensor::<f64>::scalar(0.0);
        let label = Tensor::<f64>::scalar(1.0);
        assert!(
            (logit.bce_with_logits(&label).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12
        );
    }

    #[test]
    fn dropout_zero_p_is_identity_and_seeded_masks_repeat() {
        let x = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        let mut rng = stream(9, "drop", 0);
        let same = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(same.to_f64_vec(), x.to_f64_vec());
        let mut r1 = stream(9, "drop", 1);
        let mut r2 = stream(9, "drop", 1);
        let d1 = x.dropout(0.5, &mut r1).unwrap().to_f64_vec();
        let d2 = x.dropout(0.5, &mut r2).unwrap().to_f64_vec();
        assert_eq!(d1, d2);
        assert!(x.dropout(1.0, &mut r1).is_err());
        assert!(x.dropout(-0.1, &mut r1).is_err());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let a = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let b = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let w = a.detach().mul(&b).unwrap();
        assert_eq!(w.item(), 6.0);
        w.backward().unwrap();
        assert!(a.grad().is_none(), "detached input must receive no gradient");
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn broadcast_add_and_mul() {
        let x = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let row = Tensor::<f64>::from_f64s(&[10.0, 20.0], &[2]).unwrap();
        let out = x.add(&row).unwrap();
        assert_close(&out.to_f64_vec(), &[11.0, 22.0, 13.0, 24.0], 1e-12);
        let col = Tensor::<f64>::from_f64s(&[2.0, 3.0], &[2, 1]).unwrap();
        let out = x.mul(&col).unwrap();
        assert_close(&out.to_f64_vec(), &[2.0, 4.0, 9.0, 12.0], 1e-12);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::<f64>::from_f64s(&[1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::<f64>::from_f64s(&[3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let cat = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(cat.shape(), &[3, 2]);
        let back = cat.slice_axis(0, 1, 2).unwrap();
        assert_close(&back.to_f64_vec(), &b.to_f64_vec(), 1e-12);
    }

    #[test]
    fn gather_rows_rejects_out_of_vocab() {
        let table = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert!(table.gather_rows(&[0, 2]).is_err());
        let picked = table.gather_rows(&[1, 0, 1]).unwrap();
        assert_eq!(picked.shape(), &[3, 2]);
        assert_close(&picked.to_f64_vec(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0], 1e-12);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = stream(3, "perm", 0);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn sum_axis_values() {
        let x = Tensor::<f64>::from_f64s(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let rows = x.sum_axis(1).unwrap();
        assert_close(&rows.to_f64_vec(), &[6.0, 15.0], 1e-12);
        let cols = x.sum_axis(0).unwrap();
        assert_close(&cols.to_f64_vec(), &[5.0, 7.0, 9.0], 1e-12);
    }
}
