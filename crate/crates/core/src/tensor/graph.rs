use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{broadcast_map, broadcast_shape, Mask, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    /// `a[m,p] @ b[p,n]`, or `a[m,p] @ b[n,p]^T` when `trans_b`.
    MatMul { a: Var, b: Var, m: usize, p: usize, n: usize, trans_b: bool, pairs: Vec<(usize, usize)> },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    MulConst { x: Var, factor: Vec<f64> },
    Gelu { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    ConcatLast { inputs: Vec<Var>, widths: Vec<usize> },
    Gather { sources: Vec<Var>, picks: Vec<(usize, usize)> },
    Sum { x: Var },
    Mean { x: Var },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
///
/// Parameters are borrowed, not copied: [`Graph::param`] refers to
/// `params[id]` and their gradients are collected per id after
/// [`Graph::backward`].
pub struct Graph<'p> {
    params: &'p [Tensor],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new(&[])
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Graph {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// The borrowed parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(Tensor::zeros(&[0]), Op::Param(id), true);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params[id],
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// `None` before `backward` or when `v` cannot influence the loss.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor { shape: self.value(v).shape.clone(), data: g.clone() })
    }

    /// Gradient of parameter `id`; zeros when it did not take part in the loss.
    pub fn param_grad(&self, id: usize) -> Tensor {
        let shape = self.params[id].shape();
        self.param_vars[id]
            .and_then(|v| self.grad(v))
            .unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Adds every parameter gradient into `out[id]`.
    pub fn accumulate_param_grads(&self, out: &mut [Tensor]) -> Result<()> {
        if !self.backward_done {
            return Err(Error::invalid("accumulate_param_grads before backward"));
        }
        for (id, slot) in self.param_vars.iter().enumerate() {
            let Some(v) = slot else { continue };
            let Some(Some(g)) = self.grads.get(v.0) else { continue };
            let dst = out[id].data_mut();
            if dst.len() != g.len() {
                return Err(Error::shape(format!("gradient buffer {id} has wrong size")));
            }
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Batched `a @ b` over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ b^T` over the last two axes; leading axes broadcast.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, p) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (mut p2, mut n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if trans_b {
            std::mem::swap(&mut p2, &mut n);
        }
        if p != p2 {
            return Err(Error::shape(format!("matmul inner dims differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)?;
        let map_a = broadcast_map(ba, &batch)?;
        let map_b = broadcast_map(bb, &batch)?;
        let pairs: Vec<(usize, usize)> = map_a.into_iter().zip(map_b).collect();

        let mut out_shape = batch;
        out_shape.extend([m, n]);
        let mut out = vec![0.0; pairs.len() * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (t, &(ia, ib)) in pairs.iter().enumerate() {
                let (a_t, b_t) = (&av[ia * m * p..(ia + 1) * m * p], &bv[ib * p * n..(ib + 1) * p * n]);
                let c_t = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    gemm_nt(a_t, b_t, c_t, m, n, p);
                } else {
                    gemm_nn(a_t, b_t, c_t, m, p, n);
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let op = Op::MatMul { a, b, m, p, n, trans_b, pairs };
        Ok(self.push(Tensor { shape: out_shape, data: out }, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: va.shape.clone(), data };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, needs))
    }

    /// `x[..., d] + bias[d]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = *vx.shape().last().unwrap_or(&0);
        if vb.shape() != [d] {
            return Err(Error::shape(format!("bias {:?} does not match {:?}", vb.shape(), vx.shape())));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let t = Tensor { shape: vx.shape.clone(), data };
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let t = Tensor { shape: vx.shape.clone(), data: vx.data().iter().map(|v| v * c).collect() };
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, c }, needs)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != factor.numel() {
            return Err(Error::shape(format!("mul_const: {:?} vs {:?}", vx.shape(), factor.shape())));
        }
        let data = vx.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let t = Tensor { shape: vx.shape.clone(), data };
        let needs = self.needs(x);
        Ok(self.push(t, Op::MulConst { x, factor: factor.data().to_vec() }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let vx = self.value(x);
        let t = Tensor { shape: vx.shape.clone(), data: vx.data().iter().map(|&v| f(v)).collect() };
        let needs = self.needs(x);
        self.push(t, op, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid { x })
    }

    /// Softmax over the last dimension. Masked-out entries come out exactly 0
    /// and do not take part in the max used for stabilisation.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let l = *shape.last().ok_or_else(|| Error::shape("softmax on a scalar"))?;
        let rows = if l == 0 { 0 } else { vx.numel() / l };
        let mut out = vec![0.0; vx.numel()];

        let keep_row: Option<(Vec<usize>, bool, &[bool])> = match mask {
            None => None,
            Some(mk) => {
                if mk.shape().len() > shape.len() {
                    return Err(Error::shape(format!("mask {:?} vs {:?}", mk.shape(), shape)));
                }
                let mut ms = vec![1; shape.len() - mk.shape().len()];
                ms.extend_from_slice(mk.shape());
                let last = ms[ms.len() - 1];
                if last != 1 && last != l {
                    return Err(Error::shape(format!("mask {:?} vs {:?}", mk.shape(), shape)));
                }
                let row_map = broadcast_map(&ms[..ms.len() - 1], &shape[..shape.len() - 1])?;
                Some((row_map, last == 1, mk.data()))
            }
        };

        for r in 0..rows {
            let xs = &vx.data()[r * l..(r + 1) * l];
            let ys = &mut out[r * l..(r + 1) * l];
            let keep = |j: usize| match &keep_row {
                None => true,
                Some((map, scalar, data)) => {
                    if *scalar {
                        data[map[r]]
                    } else {
                        data[map[r] * l + j]
                    }
                }
            };
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xs.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric(format!("softmax row {r} is fully masked")));
            }
            let mut sum = 0.0;
            for (j, (&v, y)) in xs.iter().zip(ys.iter_mut()).enumerate() {
                if keep(j) {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            for y in ys.iter_mut() {
                *y /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { x }, needs))
    }

    /// Normalises over the last dimension, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine {:?}/{:?} vs input {:?}",
                vg.shape(),
                vb.shape(),
                vx.shape()
            )));
        }
        let rows = vx.numel() / d.max(1);
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let xs = &vx.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xs[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor { shape: vx.shape.clone(), data: out };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape { x }, needs))
    }

    /// Reorders axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let rank = vx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!("{axes:?} is not a permutation of {rank} axes")));
        }
        let mut data = vec![0.0; vx.numel()];
        let src = vx.data();
        kernels::for_each_permuted(vx.shape(), axes, |o, s| data[o] = src[s]);
        let shape = axes.iter().map(|&a| vx.shape()[a]).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Permute { x, axes: axes.to_vec() }, needs))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!("concat: {s:?} vs leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor { shape, data }, Op::ConcatLast { inputs: inputs.to_vec(), widths }, needs))
    }

    /// Stacks rows picked from 2-D sources of equal width: output row `i` is
    /// row `picks[i].1` of `sources[picks[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let first = sources.first().ok_or_else(|| Error::shape("gather from no sources"))?;
        let d = *self.shape(*first).last().unwrap_or(&0);
        for &s in sources {
            if self.shape(s).len() != 2 || self.shape(s)[1] != d {
                return Err(Error::shape(format!("gather source {:?} is not [rows, {d}]", self.shape(s))));
            }
        }
        let mut data = Vec::with_capacity(picks.len() * d);
        for &(src, row) in picks {
            let v = self.value(*sources.get(src).ok_or_else(|| Error::invalid("gather source out of range"))?);
            if row >= v.shape()[0] {
                return Err(Error::invalid(format!("gather row {row} out of range for {:?}", v.shape())));
            }
            data.extend_from_slice(&v.data()[row * d..(row + 1) * d]);
        }
        let t = Tensor { shape: vec![picks.len(), d], data };
        let needs = sources.iter().any(|&v| self.needs(v));
        Ok(self.push(t, Op::Gather { sources: sources.to_vec(), picks: picks.to_vec() }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, needs)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.numel() != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!("{} logits vs {} labels", z.numel(), labels.len())));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / labels.len() as f64;
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, labels: labels.to_vec() }, needs))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid("backward already ran on this graph; call zero_grad first"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.value(v).numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, m, p, n, trans_b, pairs } => {
                let (m, p, n, trans_b) = (*m, *p, *n, *trans_b);
                let bv = self.value(*b).data();
                acc(*a, &mut |da| {
                    for (t, &(ia, ib)) in pairs.iter().enumerate() {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let b_t = &bv[ib * p * n..(ib + 1) * p * n];
                        let da_t = &mut da[ia * m * p..(ia + 1) * m * p];
                        if trans_b {
                            gemm_nn(g_t, b_t, da_t, m, n, p);
                        } else {
                            gemm_nt(g_t, b_t, da_t, m, p, n);
                        }
                    }
                });
                let av = self.value(*a).data();
                acc(*b, &mut |db| {
                    for (t, &(ia, ib)) in pairs.iter().enumerate() {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let a_t = &av[ia * m * p..(ia + 1) * m * p];
                        let db_t = &mut db[ib * p * n..(ib + 1) * p * n];
                        if trans_b {
                            gemm_tn(g_t, a_t, db_t, m, n, p);
                        } else {
                            gemm_tn(a_t, g_t, db_t, m, p, n);
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let w = d.len();
                    for row in g.chunks(w) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |d| {
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += c * gv;
                }
            }),
            Op::MulConst { x, factor } => acc(*x, &mut |d| {
                for ((dv, gv), f) in d.iter_mut().zip(g).zip(factor) {
                    *dv += f * gv;
                }
            }),
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv * kernels::gelu_grad(xv);
                    }
                })
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((dv, gv), &xv) in d.iter_mut().zip(g).zip(xv) {
                        if xv > 0.0 {
                            *dv += gv;
                        }
                    }
                })
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((dv, gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *dv += gv * yv * (1.0 - yv);
                    }
                })
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let l = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(l).zip(g.chunks(l)).zip(y.chunks(l)) {
                        let s = kernels::dot(gr, yr);
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - s);
                        }
                    }
                })
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma).data();
                let dim = gam.len();
                acc(*x, &mut |d| {
                    let mut dxhat = vec![0.0; dim];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let hr = &xhat[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                        let m2 = kernels::dot(&dxhat, hr) / dim as f64;
                        for j in 0..dim {
                            d[r * dim + j] += is * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks(dim) {
                        add_into(d, gr);
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |d| add_into(d, g)),
            Op::Permute { x, axes } => {
                let shape = self.value(*x).shape();
                acc(*x, &mut |d| kernels::for_each_permuted(shape, axes, |o, s| d[s] += g[o]))
            }
            Op::ConcatLast { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(v, &mut |d| {
                        for (r, gr) in g.chunks(total).enumerate() {
                            add_into(&mut d[r * w..(r + 1) * w], &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { sources, picks } => {
                let dim = *node.value.shape().last().unwrap_or(&0);
                for (s, &v) in sources.iter().enumerate() {
                    acc(v, &mut |d| {
                        for (i, &(src, row)) in picks.iter().enumerate() {
                            if src == s {
                                add_into(&mut d[row * dim..(row + 1) * dim], &g[i * dim..(i + 1) * dim]);
                            }
                        }
                    });
                }
            }
            Op::Sum { x } => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean { x } => acc(*x, &mut |d| {
                let n = d.len() as f64;
                d.iter_mut().for_each(|v| *v += g[0] / n);
            }),
            Op::BceWithLogits { logits, labels } => {
                let z = self.value(*logits).data();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for ((dv, &zv), &y) in d.iter_mut().zip(z).zip(labels) {
                        *dv += scale * (kernels::sigmoid(zv) - y);
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
