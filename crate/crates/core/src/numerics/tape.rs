//! Wengert-list reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the list in reverse and accumulates gradients into the
//! [`ParamStore`] tensors that were bound with [`Tape::param`]. Gradients
//! accumulate across calls until [`ParamStore::zero_grad`].

use std::sync::Arc;

use super::tensor::{matmul_into, softmax_in_place};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{bail, Result};

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    MaskedSoftmax {
        x: Var,
        mask: Arc<[bool]>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let t = Tensor::new(&shape, t.into_data()).expect("shape already validated");
        self.push(t, Op::Constant)
    }

    /// Binds a stored parameter; gradients flow back to it on `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let value = Tensor::new(p.shape(), p.data().to_vec()).expect("valid param");
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a[n×d] + b` with `b` holding `d` values broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.value(a).dims2()?;
        let bv = self.value(b);
        if bv.numel() != d {
            bail!(Shape, "add_row: row width {} vs bias {:?}", d, bv.shape());
        }
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            out[i * d..(i + 1) * d]
                .iter_mut()
                .zip(bv.data())
                .for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(t, Op::AddRow(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            bail!(Shape, "mul on {:?} vs {:?}", x.shape(), y.shape());
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).scale(s);
        self.push(t, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| {
            let u = GELU_C * (x + 0.044_715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(t, Op::Gelu(a))
    }

    /// Layer normalization over the last axis of a matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            bail!(Shape, "layer_norm affine params must hold {} values", d);
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; n * d];
        let mut rstd = vec![0.0f32; n];
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row softmax restricted to entries where `mask` is true; masked entries
    /// come out as exact zeros and never enter the normalizer.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<[bool]>) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if mask.len() != n * m {
            bail!(Shape, "mask holds {} entries for a {}x{} matrix", mask.len(), n, m);
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; n * m];
        for i in 0..n {
            let allowed = &mask[i * m..(i + 1) * m];
            let row = &xv[i * m..(i + 1) * m];
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0f32;
            for j in 0..m {
                if allowed[j] {
                    let e = (row[j] - max).exp();
                    out[i * m + j] = e;
                    total += e;
                }
            }
            for j in 0..m {
                if allowed[j] {
                    out[i * m + j] /= total;
                }
            }
        }
        let t = Tensor::new(&[n, m], out)?;
        Ok(self.push(t, Op::MaskedSoftmax { x, mask }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            bail!(Range, "slice_cols {}..{} of width {}", start, start + len, d);
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv[i * d + start..i * d + start + len]);
        }
        let t = Tensor::new(&[n, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                bail!(Shape, "concat_cols row counts differ: {} vs {}", r, n);
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != d {
                bail!(Shape, "concat_rows widths differ: {} vs {}", c, d);
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(&[rows, d], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Embedding lookup: rows of `table[V×d]` selected by `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                bail!(Index, "row {} out of range for table with {} rows", i, v);
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean over rows of `-log softmax(logits)[i, targets[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.value(logits).dims2()?;
        if targets.len() != n {
            bail!(Shape, "{} targets for {} logit rows", targets.len(), n);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            bail!(Index, "target {} outside vocabulary of {}", bad, v);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            total += lse - row[t] as f64;
            softmax_in_place(row);
        }
        let loss = (total / n.max(1) as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating into bound parameters.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Gradient of a scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f32>>>> {
        if self.value(loss).numel() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut acc = |v: Var, delta: Vec<f32>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().unwrap();
                let n = bv.dims2().unwrap().1;
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt = bv.transpose().unwrap();
                let mut da = vec![0.0; m * k];
                matmul_into(g, bt.data(), &mut da, m, n, k);
                let at = av.transpose().unwrap();
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g, &mut db, k, m, n);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2().unwrap();
                let gt = Tensor::new(&[r, c], g.to_vec()).unwrap().transpose().unwrap();
                acc(*a, gt.into_data());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddRow(a, b) => {
                let (n, d) = node.value.dims2().unwrap();
                let mut db = vec![0.0; d];
                for i in 0..n {
                    db.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(s, v)| *s += v);
                }
                acc(*a, g.to_vec());
                acc(*b, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let u = GELU_C * (x + 0.044_715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = node.value.dims2().unwrap();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; n * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for i in 0..n {
                    let gr = &g[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut sum_dh = 0.0f32;
                    let mut sum_dh_h = 0.0f32;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                    }
                    let inv_d = 1.0 / d as f32;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[i * d + j] = rstd[i] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::MaskedSoftmax { x, mask } => {
                let (n, m) = node.value.dims2().unwrap();
                let p = node.value.data();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let mut dot = 0.0f32;
                    for j in 0..m {
                        if mask[i * m + j] {
                            dot += g[i * m + j] * p[i * m + j];
                        }
                    }
                    for j in 0..m {
                        if mask[i * m + j] {
                            dx[i * m + j] = p[i * m + j] * (g[i * m + j] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.value(*x).dims2().unwrap();
                let len = node.value.dims2().unwrap().1;
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    let mut dp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    acc(p, dp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::GatherRows { table, idx } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let mut dt = vec![0.0; v * d];
                for (r, &i) in idx.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                acc(*table, dt);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = probs.len() / n.max(1);
                let scale = g[0] / n as f32;
                let mut dl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * v + t] -= scale;
                }
                acc(*logits, dl);
            }
        }
    }
}
