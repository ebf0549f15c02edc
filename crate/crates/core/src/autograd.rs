//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that (transitively) depends on a gradient-requiring leaf.
//! All arithmetic is `f64` so analytic gradients can be checked against
//! central finite differences.

use std::collections::BTreeMap;

use crate::linalg::{dot, gemm, gemm_nt, transpose};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    GlobalAvgPool(Var),
    ChannelScale { x: Var, gate: Var },
    ConcatChannels(Vec<Var>),
    Linear { x: Var, w: Var, b: Option<Var> },
    ToTokens(Var),
    FromTokens(Var),
    MatMulNt(Var, Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    AddPositional { x: Var, pos: Var },
    MeanAll(Var),
    BceWithLogits { z: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    params: BTreeMap<String, Var>,
    bn_updates: Vec<BnUpdate>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), training, params: BTreeMap::new(), bn_updates: Vec::new() }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Differentiable leaf bound to a named parameter. Repeated requests for
    /// the same name return the same node, so weight sharing accumulates
    /// gradients into a single leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = store
            .param(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// 2-D convolution. `x`: [B, Cin, H, W], `w`: [Cout, Cin, k, k], `b`: [Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let out = conv2d_forward(tx, tw, b.map(|b| self.value(b)), stride, pad);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Batch normalization over axis 1 of a tensor shaped [B, C, ...].
    ///
    /// Training graphs normalize with batch statistics and record a
    /// [`BnUpdate`] under `name`; inference graphs use `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        name: &str,
    ) -> Var {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let m = (b * inner) as f64;
        let data = tx.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if self.training {
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    mean[ci] += data[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * inner;
                    var[ci] += data[base..base + inner]
                        .iter()
                        .map(|v| (v - mean[ci]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
        } else {
            mean.copy_from_slice(running.0.data());
            var.copy_from_slice(running.1.data());
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    xhat[i] = (data[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + be[ci];
                }
            }
        }
        if self.training {
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                name: name.to_string(),
                mean,
                var: var.iter().map(|v| v * correction).collect(),
            });
        }
        let rg = self.rg(&[x, gamma, beta]);
        let train = self.training;
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        )
    }

    /// [B, C, H, W] -> [B, C]
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let shape = tx.shape();
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let data = tx.data();
        let out = Tensor::from_fn(&[b, c], |i| {
            data[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    /// `x` [B, C, H, W] scaled per channel by `gate` [B, C].
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Var {
        let tx = self.value(x);
        let tg = self.value(gate);
        let shape = tx.shape().to_vec();
        assert_eq!(&shape[..2], tg.shape(), "channel_scale: gate shape");
        let inner: usize = shape[2..].iter().product();
        let gd = tg.data();
        let out = Tensor::from_fn(&shape, |i| tx.data()[i] * gd[i / inner]);
        let rg = self.rg(&[x, gate]);
        self.push(out, Op::ChannelScale { x, gate }, rg)
    }

    /// Concatenate [B, Ci, ...] tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape().to_vec();
        let b = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s[0], b, "concat: batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat: spatial mismatch");
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(b * total_c * inner);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let rg = self.rg(parts);
        self.push(Tensor::new(&shape, data).unwrap(), Op::ConcatChannels(parts.to_vec()), rg)
    }

    /// `x` [..., in] times `w`ᵀ ([out, in]) plus `b` [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let (n_out, n_in) = (tw.shape()[0], tw.shape()[1]);
        let xs = tx.shape();
        assert_eq!(*xs.last().unwrap(), n_in, "linear: input width");
        let rows = tx.numel() / n_in;
        let mut out = vec![0.0; rows * n_out];
        let (xd, wd) = (tx.data(), tw.data());
        for r in 0..rows {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wr = &wd[o * n_in..(o + 1) * n_in];
                out[r * n_out + o] = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                for o in 0..n_out {
                    out[r * n_out + o] += bd[o];
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(Tensor::new(&shape, out).unwrap(), Op::Linear { x, w, b }, rg)
    }

    /// [B, C, H, W] -> [B, H·W, C]
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let d = tx.data();
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ci in 0..c {
                for ni in 0..n {
                    out[(bi * n + ni) * c + ci] = d[(bi * c + ci) * n + ni];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[b, n, c], out).unwrap(), Op::ToTokens(x), rg)
    }

    /// [B, H·W, C] -> [B, C, H, W]
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let (b, n, c) = (s[0], s[1], s[2]);
        assert_eq!(n, h * w, "from_tokens: token count");
        let d = tx.data();
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            for ni in 0..n {
                for ci in 0..c {
                    out[(bi * c + ci) * n + ni] = d[(bi * n + ni) * c + ci];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[b, c, h, w], out).unwrap(), Op::FromTokens(x), rg)
    }

    /// Batched `a · bᵀ`: [B, N, C] × [B, M, C] -> [B, N, M].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert_eq!(sa[0], sb[0], "matmul_nt: batch");
        assert_eq!(sa[2], sb[2], "matmul_nt: inner dim");
        let (bs, n, m, c) = (sa[0], sa[1], sb[1], sa[2]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; bs * n * m];
        for bi in 0..bs {
            for i in 0..n {
                let ar = &ad[(bi * n + i) * c..(bi * n + i + 1) * c];
                for j in 0..m {
                    let br = &bd[(bi * m + j) * c..(bi * m + j + 1) * c];
                    out[(bi * n + i) * m + j] = dot(ar, br);
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[bs, n, m], out).unwrap(), Op::MatMulNt(a, b), rg)
    }

    /// Batched `a · b`: [B, N, M] × [B, M, C] -> [B, N, C].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        assert_eq!(sa[0], sb[0], "matmul: batch");
        assert_eq!(sa[2], sb[1], "matmul: inner dim");
        let (bs, n, m, c) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; bs * n * c];
        for bi in 0..bs {
            for i in 0..n {
                let orow = &mut out[(bi * n + i) * c..(bi * n + i + 1) * c];
                for k in 0..m {
                    let av = ad[(bi * n + i) * m + k];
                    let brow = &bd[(bi * m + k) * c..(bi * m + k + 1) * c];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[bs, n, c], out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let width = *tx.shape().last().unwrap();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out).unwrap(), Op::SoftmaxRows(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let width = *tx.shape().last().unwrap();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let rows = tx.numel() / width;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for (r, row) in tx.data().chunks(width).enumerate() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[r * width + j] = h;
                out[r * width + j] = g[j] * h + be[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(&shape, out).unwrap(),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        )
    }

    /// `x` [B, N, C] plus `pos` [N, C] broadcast over the batch.
    pub fn add_positional(&mut self, x: Var, pos: Var) -> Var {
        let tx = self.value(x);
        let tp = self.value(pos);
        assert_eq!(&tx.shape()[1..], tp.shape(), "add_positional: shape");
        let per = tp.numel();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + tp.data()[i % per]);
        let rg = self.rg(&[x, pos]);
        self.push(out, Op::AddPositional { x, pos }, rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::MeanAll(x), rg)
    }

    /// Mean binary cross-entropy between `sigmoid(z)` and `target`, computed
    /// from logits in a numerically stable form.
    pub fn bce_with_logits(&mut self, z: Var, target: &Tensor) -> Var {
        let tz = self.value(z);
        assert_eq!(tz.numel(), target.numel(), "bce: target size");
        let n = tz.numel() as f64;
        let loss = tz
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[z]);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { z, target: target.data().to_vec() },
            rg,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass seeded with ones at `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let seed = Tensor::full(self.value(out).shape(), 1.0);
        self.backward_with(out, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient.
    pub fn backward_with(&self, out: Var, upstream: Tensor) -> Gradients {
        assert_eq!(upstream.shape(), self.value(out).shape(), "upstream gradient shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(upstream);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    /// Gradients of every named parameter touched by this graph.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let g = Tensor::from_fn(gy.shape(), |i| gy.data()[i] * tb.data()[i]);
                    self.accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    let g = Tensor::from_fn(gy.shape(), |i| gy.data()[i] * ta.data()[i]);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.map(|v| v * c)),
            Op::Relu(a) => {
                let ta = self.value(*a);
                let g = Tensor::from_fn(gy.shape(), |i| {
                    if ta.data()[i] > 0.0 {
                        gy.data()[i]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = Tensor::from_fn(gy.shape(), |i| {
                    let s = y.data()[i];
                    gy.data()[i] * s * (1.0 - s)
                });
                self.accumulate(grads, *a, g);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let s = gy.shape();
                        let (bs, c) = (s[0], s[1]);
                        let inner = s[2] * s[3];
                        let mut gb = vec![0.0; c];
                        for bi in 0..bs {
                            for (ci, acc) in gb.iter_mut().enumerate() {
                                let base = (bi * c + ci) * inner;
                                *acc += gy.data()[base..base + inner].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[c], gb).unwrap());
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = gy.shape();
                let (bs, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = (bs * inner) as f64;
                let g = self.value(*gamma).data();
                let gyd = gy.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..bs {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            sum_dy[ci] += gyd[i];
                            sum_dy_xhat[ci] += gyd[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; gyd.len()];
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * inner;
                            for i in base..base + inner {
                                gx[i] = if *train {
                                    g[ci] * inv_std[ci] / m
                                        * (m * gyd[i] - sum_dy[ci] - xhat[i] * sum_dy_xhat[ci])
                                } else {
                                    g[ci] * inv_std[ci] * gyd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(s, gx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat).unwrap());
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_dy).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let inner: usize = s[2..].iter().product();
                let g = Tensor::from_fn(s, |i| gy.data()[i / inner] / inner as f64);
                self.accumulate(grads, *x, g);
            }
            Op::ChannelScale { x, gate } => {
                let tx = self.value(*x);
                let tg = self.value(*gate);
                let inner: usize = tx.shape()[2..].iter().product();
                if self.needs(*x) {
                    let g = Tensor::from_fn(tx.shape(), |i| gy.data()[i] * tg.data()[i / inner]);
                    self.accumulate(grads, *x, g);
                }
                if self.needs(*gate) {
                    let g = Tensor::from_fn(tg.shape(), |j| {
                        (j * inner..(j + 1) * inner).map(|i| gy.data()[i] * tx.data()[i]).sum()
                    });
                    self.accumulate(grads, *gate, g);
                }
            }
            Op::ConcatChannels(parts) => {
                let s = gy.shape();
                let (bs, total_c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let c = ps[1];
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(bs * c * inner);
                        for bi in 0..bs {
                            let start = (bi * total_c + offset) * inner;
                            data.extend_from_slice(&gy.data()[start..start + c * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(&ps, data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Linear { x, w, b } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (n_out, n_in) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.numel() / n_in;
                let gyd = gy.data();
                if self.needs(*x) {
                    let mut gx = vec![0.0; tx.numel()];
                    for r in 0..rows {
                        for o in 0..n_out {
                            let gv = gyd[r * n_out + o];
                            if gv == 0.0 {
                                continue;
                            }
                            let wr = &tw.data()[o * n_in..(o + 1) * n_in];
                            for (gxv, wv) in gx[r * n_in..(r + 1) * n_in].iter_mut().zip(wr) {
                                *gxv += gv * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape(), gx).unwrap());
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; n_out * n_in];
                    for r in 0..rows {
                        let xr = &tx.data()[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            let gv = gyd[r * n_out + o];
                            for (gwv, xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                                *gwv += gv * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(tw.shape(), gw).unwrap());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0; n_out];
                        for r in 0..rows {
                            for o in 0..n_out {
                                gb[o] += gyd[r * n_out + o];
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[n_out], gb).unwrap());
                    }
                }
            }
            Op::ToTokens(x) => {
                let s = self.value(*x).shape().to_vec();
                let (bs, c, n) = (s[0], s[1], s[2] * s[3]);
                let mut g = vec![0.0; gy.numel()];
                for bi in 0..bs {
                    for ci in 0..c {
                        for ni in 0..n {
                            g[(bi * c + ci) * n + ni] = gy.data()[(bi * n + ni) * c + ci];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, g).unwrap());
            }
            Op::FromTokens(x) => {
                let s = self.value(*x).shape().to_vec();
                let (bs, n, c) = (s[0], s[1], s[2]);
                let mut g = vec![0.0; gy.numel()];
                for bi in 0..bs {
                    for ni in 0..n {
                        for ci in 0..c {
                            g[(bi * n + ni) * c + ci] = gy.data()[(bi * c + ci) * n + ni];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&s, g).unwrap());
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, n, c) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let m = tb.shape()[1];
                let (ad, bd, gyd) = (ta.data(), tb.data(), gy.data());
                if self.needs(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    for bi in 0..bs {
                        for i in 0..n {
                            for j in 0..m {
                                let gv = gyd[(bi * n + i) * m + j];
                                for k in 0..c {
                                    ga[(bi * n + i) * c + k] += gv * bd[(bi * m + j) * c + k];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for bi in 0..bs {
                        for i in 0..n {
                            for j in 0..m {
                                let gv = gyd[(bi * n + i) * m + j];
                                for k in 0..c {
                                    gb[(bi * m + j) * c + k] += gv * ad[(bi * n + i) * c + k];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), gb).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, n, m) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let c = tb.shape()[2];
                let (ad, bd, gyd) = (ta.data(), tb.data(), gy.data());
                if self.needs(*a) {
                    let mut ga = vec![0.0; ad.len()];
                    for bi in 0..bs {
                        for i in 0..n {
                            let gr = &gyd[(bi * n + i) * c..(bi * n + i + 1) * c];
                            for k in 0..m {
                                let br = &bd[(bi * m + k) * c..(bi * m + k + 1) * c];
                                ga[(bi * n + i) * m + k] = dot(gr, br);
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; bd.len()];
                    for bi in 0..bs {
                        for i in 0..n {
                            let gr = &gyd[(bi * n + i) * c..(bi * n + i + 1) * c];
                            for k in 0..m {
                                let av = ad[(bi * n + i) * m + k];
                                let row = &mut gb[(bi * m + k) * c..(bi * m + k + 1) * c];
                                for (o, gv) in row.iter_mut().zip(gr) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape(), gb).unwrap());
                }
            }
            Op::SoftmaxRows(x) => {
                let width = *y.shape().last().unwrap();
                let mut g = vec![0.0; y.numel()];
                for ((grow, yrow), gyrow) in
                    g.chunks_mut(width).zip(y.data().chunks(width)).zip(gy.data().chunks(width))
                {
                    let inner = dot(yrow, gyrow);
                    for j in 0..width {
                        grow[j] = yrow[j] * (gyrow[j] - inner);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), g).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let width = *y.shape().last().unwrap();
                let g = self.value(*gamma).data();
                let gyd = gy.data();
                let mut ggamma = vec![0.0; width];
                let mut gbeta = vec![0.0; width];
                let mut gx = vec![0.0; gyd.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let base = r * width;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..width {
                        let d = gyd[base + j] * g[j];
                        sum_d += d;
                        sum_dx += d * xhat[base + j];
                        ggamma[j] += gyd[base + j] * xhat[base + j];
                        gbeta[j] += gyd[base + j];
                    }
                    let w = width as f64;
                    for j in 0..width {
                        let d = gyd[base + j] * g[j];
                        gx[base + j] = is / w * (w * d - sum_d - xhat[base + j] * sum_dx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), gx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new(&[width], ggamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(&[width], gbeta).unwrap());
            }
            Op::AddPositional { x, pos } => {
                self.accumulate(grads, *x, gy.clone());
                if self.needs(*pos) {
                    let tp = self.value(*pos);
                    let per = tp.numel();
                    let mut g = vec![0.0; per];
                    for (i, v) in gy.data().iter().enumerate() {
                        g[i % per] += v;
                    }
                    self.accumulate(grads, *pos, Tensor::new(tp.shape(), g).unwrap());
                }
            }
            Op::MeanAll(x) => {
                let s = self.value(*x).shape();
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, Tensor::full(s, gy.data()[0] / n));
            }
            Op::BceWithLogits { z, target } => {
                let tz = self.value(*z);
                let n = tz.numel() as f64;
                let scale = gy.data()[0] / n;
                let g = Tensor::from_fn(tz.shape(), |i| (sigmoid(tz.data()[i]) - target[i]) * scale);
                self.accumulate(grads, *z, g);
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Geometry of one convolution, shared by the forward and backward kernels.
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input: one per (ci, kh, kw).
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[Cin, H, W]` into columns `offset..offset + Ho·Wo`
    /// of a `[Cin·k·k, ld]` matrix.
    fn im2col(&self, img: &[f64], out: &mut [f64], ld: usize, offset: usize) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = &mut out[((ci * self.k + kh) * self.k + kw) * ld + offset..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                        let orow = &mut row[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            orow.fill(0.0);
                            continue;
                        }
                        let irow = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, o) in orow.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                            *o = if iw >= 0 && iw < self.w as isize { irow[iw as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto an image.
    fn col2im(&self, cols: &[f64], ld: usize, offset: usize, img: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = &cols[((ci * self.k + kh) * self.k + kw) * ld + offset..][..p];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + kh) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let irow = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, v) in row[oh * self.wo..(oh + 1) * self.wo].iter().enumerate() {
                            let iw = (ow * self.stride + kw) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                irow[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> ConvGeom {
    assert_eq!(xs.len(), 4, "conv2d: input must be [B, C, H, W]");
    assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
    let (h, w, k) = (xs[2], xs[3], ws[2]);
    ConvGeom {
        cin: xs[1],
        h,
        w,
        k,
        stride,
        pad,
        ho: conv_out_size(h, k, stride, pad).expect("conv2d: kernel larger than input"),
        wo: conv_out_size(w, k, stride, pad).expect("conv2d: kernel larger than input"),
    }
}

/// Unfolds a whole batch into `[Cin·k·k, B·Ho·Wo]`.
fn im2col_batch(g: &ConvGeom, x: &[f64], bs: usize) -> Vec<f64> {
    let (p, image) = (g.cols(), g.cin * g.h * g.w);
    let mut cols = vec![0.0; g.rows() * bs * p];
    for bi in 0..bs {
        g.im2col(&x[bi * image..(bi + 1) * image], &mut cols, bs * p, bi * p);
    }
    cols
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let g = conv_geom(x.shape(), w.shape(), stride, pad);
    let (bs, cout) = (x.shape()[0], w.shape()[0]);
    let (kk, p) = (g.rows(), g.cols());
    let cols = im2col_batch(&g, x.data(), bs);
    let mut y = vec![0.0; cout * bs * p];
    gemm(cout, bs * p, kk, w.data(), &cols, &mut y);
    let mut out = vec![0.0; bs * cout * p];
    for co in 0..cout {
        let bias = b.map_or(0.0, |b| b.data()[co]);
        for bi in 0..bs {
            let src = &y[co * bs * p + bi * p..][..p];
            for (o, v) in out[(bi * cout + co) * p..][..p].iter_mut().zip(src) {
                *o = v + bias;
            }
        }
    }
    Tensor::new(&[bs, cout, g.ho, g.wo], out).unwrap()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = conv_geom(x.shape(), w.shape(), stride, pad);
    let (bs, cout) = (x.shape()[0], w.shape()[0]);
    let (kk, p) = (g.rows(), g.cols());
    let image = g.cin * g.h * g.w;
    // gy as [Cout, B·P]
    let mut gyt = vec![0.0; cout * bs * p];
    for bi in 0..bs {
        for co in 0..cout {
            gyt[co * bs * p + bi * p..][..p].copy_from_slice(&gy.data()[(bi * cout + co) * p..][..p]);
        }
    }
    let gw = need_w.then(|| {
        let cols = im2col_batch(&g, x.data(), bs);
        let mut gw = vec![0.0; cout * kk];
        gemm_nt(cout, kk, bs * p, &gyt, &cols, &mut gw);
        Tensor::new(w.shape(), gw).unwrap()
    });
    let gx = need_x.then(|| {
        let wt = transpose(cout, kk, w.data());
        let mut gcols = vec![0.0; kk * bs * p];
        gemm(kk, bs * p, cout, &wt, &gyt, &mut gcols);
        let mut gx = vec![0.0; x.numel()];
        for bi in 0..bs {
            g.col2im(&gcols, bs * p, bi * p, &mut gx[bi * image..(bi + 1) * image]);
        }
        Tensor::new(x.shape(), gx).unwrap()
    });
    (gx, gw)
}
