//! Reverse-mode differentiation over a per-forward computation record.
//!
//! A [`Graph`] records every operation of one forward pass. Each entry
//! holds its value, the operation that produced it (its backward rule)
//! and whether gradients flow through it. [`Graph::backward`] sweeps the
//! record from a scalar root and returns the accumulated partial
//! derivatives. Only the primitives used by the patch-selection pipeline
//! are provided.

use crate::error::{shape_err, Error, Result};
use crate::patches::{extract_scan, extraction_backward, PatchGeometry};
use crate::perturbed::{perturbed_topk_backward, perturbed_topk_forward, PerturbedConfig, PerturbedContext};
use crate::tensor::Tensor;
use crate::topk::min_max;

#[cfg(feature = "sinkhorn")]
use crate::sinkhorn::{sinkhorn_topk_backward, sinkhorn_topk_forward, SinkhornConfig, SinkhornOutput, SinkhornTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Relu(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    },
    MaxPoolGrid {
        x: NodeId,
        argmax: Vec<u32>,
    },
    SoftmaxRows(NodeId),
    MeanRows(NodeId),
    MaxRows {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
    SoftmaxEntropy(NodeId),
    NormalizeScores {
        x: NodeId,
        eps: f32,
        lo: usize,
        hi: usize,
    },
    PerturbedTopK {
        x: NodeId,
        ctx: Box<PerturbedContext>,
    },
    #[cfg(feature = "sinkhorn")]
    SinkhornTopK {
        x: NodeId,
        trace: Box<SinkhornTrace>,
    },
    ScatterSelect {
        x: NodeId,
        picks: Vec<usize>,
    },
    ExtractPatches {
        image: NodeId,
        y: NodeId,
        geom: PatchGeometry,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPoolGrid { .. } => "max_pool_grid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftmaxEntropy(_) => "softmax_entropy",
            Op::NormalizeScores { .. } => "normalize_scores",
            Op::PerturbedTopK { .. } => "perturbed_topk",
            #[cfg(feature = "sinkhorn")]
            Op::SinkhornTopK { .. } => "sinkhorn_topk",
            Op::ScatterSelect { .. } => "scatter_select",
            Op::ExtractPatches { .. } => "extract_patches",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::SoftmaxEntropy(a) => vec![a],
            Op::Linear { x, w, b } => match b {
                Some(b) => vec![x, w, b],
                None => vec![x, w],
            },
            Op::Conv2d { x, w, b, .. } => vec![x, w, b],
            Op::MaxPoolGrid { x, .. }
            | Op::MaxRows { x, .. }
            | Op::NormalizeScores { x, .. }
            | Op::PerturbedTopK { x, .. }
            | Op::ScatterSelect { x, .. } => vec![x],
            #[cfg(feature = "sinkhorn")]
            Op::SinkhornTopK { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::ExtractPatches { image, y, .. } => vec![image, y],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: bool,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Partial derivatives of a scalar root with respect to every node it
/// depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros shaped like `like` if the root does not
    /// depend on it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// `(leaf, gradient)` for every parameter leaf reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.params.iter().filter_map(|&id| self.get(id).map(|g| (id, g)))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn relu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Output extent and window bounds for pooling `len` cells into `cells`.
fn pool_bounds(len: usize, cells: usize, c: usize) -> (usize, usize) {
    let start = c * len / cells;
    let end = ((c + 1) * len).div_ceil(cells);
    (start, end)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Name of the backward rule attached to `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(relu);
        self.push(v, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `x·w + b` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let mut v = matmul(self.value(x), self.value(w))?;
        if let Some(b) = b {
            let (_, out) = v.dims2()?;
            let bias = self.value(b);
            bias.expect_shape(&[out])?;
            for row in v.data_mut().chunks_exact_mut(out) {
                for (o, &bv) in row.iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    /// Stride-1 convolution over `x: [B, H, W, C]` with
    /// `w: [kh, kw, C, O]`, `b: [O]` and symmetric zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> Result<NodeId> {
        let v = conv2d_forward(self.value(x), self.value(w), self.value(b), pad)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, pad }))
    }

    /// Max pooling of `x: [B, H, W, C]` onto a `grid_h×grid_w` grid of
    /// near-equal windows.
    pub fn max_pool_grid(&mut self, x: NodeId, grid_h: usize, grid_w: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let [b, h, w, c] = xv.shape()[..] else {
            return shape_err(format!("max_pool_grid expects [B,H,W,C], got {:?}", xv.shape()));
        };
        if grid_h == 0 || grid_w == 0 || grid_h > h || grid_w > w {
            return shape_err(format!("cannot pool {h}×{w} onto {grid_h}×{grid_w}"));
        }
        let d = xv.data();
        let mut out = vec![0.0f32; b * grid_h * grid_w * c];
        let mut argmax = vec![0u32; out.len()];
        for bi in 0..b {
            for gy in 0..grid_h {
                let (y0, y1) = pool_bounds(h, grid_h, gy);
                for gx in 0..grid_w {
                    let (x0, x1) = pool_bounds(w, grid_w, gx);
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                let i = ((bi * h + yy) * w + xx) * c + ch;
                                if d[i] > best {
                                    best = d[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = ((bi * grid_h + gy) * grid_w + gx) * c + ch;
                        out[o] = best;
                        argmax[o] = best_i as u32;
                    }
                }
            }
        }
        let v = Tensor::new(vec![b, grid_h, grid_w, c], out)?;
        Ok(self.push(v, Op::MaxPoolGrid { x, argmax }))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &d[r * n..(r + 1) * n];
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (((v - mx) as f64).exp() / z) as f32;
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    /// Column means of `[m, n]`, giving `[n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let out = (0..n)
            .map(|j| ((0..m).map(|i| d[i * n + j] as f64).sum::<f64>() / m as f64) as f32)
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a)))
    }

    /// Column maxima of `[m, n]`, giving `[n]`.
    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![f32::NEG_INFINITY; n];
        let mut argmax = vec![0u32; n];
        for i in 0..m {
            for j in 0..n {
                if d[i * n + j] > out[j] {
                    out[j] = d[i * n + j];
                    argmax[j] = i as u32;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxRows { x: a, argmax }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum() as f32);
        self.push(v, Op::Sum(a))
    }

    /// Softmax cross-entropy of a logit vector against class `target`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rank() != 1 || target >= l.numel() {
            return shape_err(format!("cross_entropy: logits {:?}, target {target}", l.shape()));
        }
        let lse = log_sum_exp(l.data());
        let v = Tensor::scalar((lse - l.data()[target] as f64) as f32);
        Ok(self.push(v, Op::CrossEntropy { logits, target }))
    }

    /// Shannon entropy (nats) of the softmax over all entries of `a`.
    pub fn softmax_entropy(&mut self, a: NodeId) -> NodeId {
        let p = softmax(self.value(a).data());
        let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
        self.push(Tensor::scalar(h as f32), Op::SoftmaxEntropy(a))
    }

    /// Min-max normalization into `[0, 1)` of a score vector.
    pub fn normalize_scores(&mut self, a: NodeId, eps: f32) -> Result<NodeId> {
        let s = self.value(a);
        if s.rank() != 1 || s.numel() == 0 {
            return shape_err(format!("normalize_scores expects a vector, got {:?}", s.shape()));
        }
        let (lo_v, lo, hi_v, hi) = min_max(s.data());
        let denom = hi_v as f64 - lo_v as f64 + eps as f64;
        let out = s
            .data()
            .iter()
            .map(|&v| ((v as f64 - lo_v as f64) / denom) as f32)
            .collect();
        Ok(self.push(Tensor::vector(out), Op::NormalizeScores { x: a, eps, lo, hi }))
    }

    /// Smoothed Top-K indicator (`N×K`) of a score vector.
    pub fn perturbed_topk(&mut self, s: NodeId, k: usize, cfg: &PerturbedConfig) -> Result<NodeId> {
        let (y, ctx) = perturbed_topk_forward(self.value(s).data(), k, cfg)?;
        Ok(self.push(
            y.into_tensor(),
            Op::PerturbedTopK {
                x: s,
                ctx: Box::new(ctx),
            },
        ))
    }

    /// Selected mass per element (`N`) from entropic OT.
    #[cfg(feature = "sinkhorn")]
    pub fn sinkhorn_topk(&mut self, s: NodeId, k: usize, cfg: &SinkhornConfig) -> Result<(NodeId, bool)> {
        let SinkhornOutput {
            mass, converged, trace, ..
        } = sinkhorn_topk_forward(self.value(s).data(), k, cfg)?;
        let id = self.push(
            mass,
            Op::SinkhornTopK {
                x: s,
                trace: Box::new(trace),
            },
        );
        Ok((id, converged))
    }

    /// `N×K` matrix with `x[picks[k]]` at `(picks[k], k)` and zeros
    /// elsewhere.
    pub fn scatter_select(&mut self, x: NodeId, picks: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 1 || picks.iter().any(|&p| p >= xv.numel()) {
            return shape_err(format!("scatter_select: x {:?}, picks {picks:?}", xv.shape()));
        }
        let (n, k) = (xv.numel(), picks.len());
        let mut out = vec![0.0f32; n * k];
        for (col, &p) in picks.iter().enumerate() {
            out[p * k + col] = xv.data()[p];
        }
        let v = Tensor::new(vec![n, k], out)?;
        Ok(self.push(v, Op::ScatterSelect { x, picks: picks.to_vec() }))
    }

    /// `K×P_h×P_w×C` patches `Yᵀ P` from an `H×W×C` image.
    pub fn extract_patches(&mut self, image: NodeId, y: NodeId, geom: &PatchGeometry) -> Result<NodeId> {
        let v = extract_scan(self.value(image), self.value(y), geom)?;
        Ok(self.push(
            v,
            Op::ExtractPatches {
                image,
                y,
                geom: *geom,
            },
        ))
    }

    /// Dependencies of `root` in an order where every node follows its
    /// inputs. Fails on cycles.
    fn topo_order(&self, root: NodeId) -> Result<Vec<usize>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut mark = vec![Mark::New; self.nodes.len()];
        let mut order = Vec::new();
        let mut stack = vec![(root.0, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                mark[id] = Mark::Done;
                order.push(id);
                continue;
            }
            match mark[id] {
                Mark::Done => continue,
                Mark::Open => {
                    return Err(Error::Graph(format!("cycle through node {id}")));
                }
                Mark::New => {}
            }
            mark[id] = Mark::Open;
            stack.push((id, true));
            for input in self.nodes[id].op.inputs() {
                if input.0 >= self.nodes.len() {
                    return Err(Error::Graph(format!("node {id} reads missing node {}", input.0)));
                }
                match mark[input.0] {
                    Mark::Open => {
                        return Err(Error::Graph(format!(
                            "cycle: node {id} depends on its ancestor {}",
                            input.0
                        )))
                    }
                    Mark::New if self.nodes[input.0].requires_grad => stack.push((input.0, false)),
                    _ => {}
                }
            }
        }
        Ok(order)
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("root {} not in record", root.0)));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "root must be scalar, has shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let order = self.topo_order(root)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for &id in order.iter().rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.backward_rule(&node.op, &node.value, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, _)| NodeId(i))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_rule(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, f) => vec![(*a, g.scale(*f))],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Transpose(a) => vec![(*a, g.transpose2()?)],
            Op::MatMul(a, b) => {
                let mut v = Vec::new();
                if self.wants(*a) {
                    v.push((*a, matmul(g, &val(*b).transpose2()?)?));
                }
                if self.wants(*b) {
                    v.push((*b, matmul(&val(*a).transpose2()?, g)?));
                }
                v
            }
            Op::Linear { x, w, b } => {
                let mut v = Vec::new();
                if self.wants(*x) {
                    v.push((*x, matmul(g, &val(*w).transpose2()?)?));
                }
                if self.wants(*w) {
                    v.push((*w, matmul(&val(*x).transpose2()?, g)?));
                }
                if let Some(b) = b {
                    let (m, n) = g.dims2()?;
                    let gd = g.data();
                    let gb = (0..n)
                        .map(|j| (0..m).map(|i| gd[i * n + j] as f64).sum::<f64>() as f32)
                        .collect();
                    v.push((*b, Tensor::vector(gb)));
                }
                v
            }
            Op::Conv2d { x, w, b, pad } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, *pad, self.wants(*x))?;
                let mut v = vec![(*w, gw), (*b, gb)];
                if let Some(gx) = gx {
                    v.push((*x, gx));
                }
                v
            }
            Op::MaxPoolGrid { x, argmax } => {
                let mut gx = vec![0.0f32; val(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    gx[i as usize] += gv;
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), gx)?)]
            }
            Op::MaxRows { x, argmax } => {
                let (m, n) = val(*x).dims2()?;
                let mut gx = vec![0.0f32; m * n];
                for (j, (&row, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    gx[row as usize * n + j] += gv;
                }
                vec![(*x, Tensor::new(vec![m, n], gx)?)]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2()?;
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0f32; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for j in 0..n {
                        gx[r * n + j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                    }
                }
                vec![(*a, Tensor::new(vec![m, n], gx)?)]
            }
            Op::MeanRows(a) => {
                let (m, n) = val(*a).dims2()?;
                let inv = 1.0 / m as f32;
                let gx = (0..m * n).map(|i| g.data()[i % n] * inv).collect();
                vec![(*a, Tensor::new(vec![m, n], gx)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::CrossEntropy { logits, target } => {
                let mut p = softmax(val(*logits).data());
                p[*target] -= 1.0;
                let gv = g.item() as f64;
                vec![(*logits, Tensor::vector(p.into_iter().map(|v| (v * gv) as f32).collect()))]
            }
            Op::SoftmaxEntropy(a) => {
                let p = softmax(val(*a).data());
                let h = out.item() as f64;
                let gv = g.item() as f64;
                let gx = p
                    .iter()
                    .map(|&pi| if pi > 0.0 { (-gv * pi * (pi.ln() + h)) as f32 } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(val(*a).shape().to_vec(), gx)?)]
            }
            Op::NormalizeScores { x, eps, lo, hi } => {
                let s = val(*x).data();
                let lo_v = s[*lo] as f64;
                let d = s[*hi] as f64 - lo_v + *eps as f64;
                let gd = g.data();
                let mut gx: Vec<f64> = gd.iter().map(|&v| v as f64 / d).collect();
                let mut to_lo = 0.0;
                let mut to_hi = 0.0;
                for (&gi, &si) in gd.iter().zip(s) {
                    let rel = (si as f64 - lo_v) / (d * d);
                    to_lo += gi as f64 * (rel - 1.0 / d);
                    to_hi -= gi as f64 * rel;
                }
                gx[*lo] += to_lo;
                gx[*hi] += to_hi;
                vec![(*x, Tensor::vector(gx.into_iter().map(|v| v as f32).collect()))]
            }
            Op::PerturbedTopK { x, ctx } => vec![(*x, perturbed_topk_backward(ctx, g)?)],
            #[cfg(feature = "sinkhorn")]
            Op::SinkhornTopK { x, trace } => vec![(*x, sinkhorn_topk_backward(trace, g)?)],
            Op::ScatterSelect { x, picks } => {
                let k = picks.len();
                let mut gx = vec![0.0f32; val(*x).numel()];
                for (col, &p) in picks.iter().enumerate() {
                    gx[p] += g.data()[p * k + col];
                }
                vec![(*x, Tensor::vector(gx))]
            }
            Op::ExtractPatches { image, y, geom } => {
                let (gy, gi) = extraction_backward(g, val(*image), val(*y), geom)?;
                vec![(*y, gy), (*image, gi)]
            }
        })
    }
}

fn log_sum_exp(v: &[f32]) -> f64 {
    let m = v.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    m + v.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f32]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|&x| (x as f64 - lse).exp()).collect()
}

/// Dense `[m, k]·[k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return shape_err(format!("matmul {:?}·{:?}", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn conv_dims(x: &Tensor, w: &Tensor, pad: usize) -> Result<[usize; 9]> {
    let [b, h, wd, c] = x.shape()[..] else {
        return shape_err(format!("conv2d input must be [B,H,W,C], got {:?}", x.shape()));
    };
    let [kh, kw, ci, co] = w.shape()[..] else {
        return shape_err(format!("conv2d weight must be [kh,kw,C,O], got {:?}", w.shape()));
    };
    if ci != c {
        return shape_err(format!("conv2d: input has {c} channels, weight expects {ci}"));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return shape_err("conv2d kernel larger than padded input");
    }
    Ok([b, h, wd, c, kh, kw, co, h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1])
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let [b, h, wd, c, kh, kw, co, oh, ow] = conv_dims(x, w, pad)?;
    bias.expect_shape(&[co])?;
    let (xd, wdt) = (x.data(), w.data());
    let mut out = vec![0.0f32; b * oh * ow * co];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[((bi * oh + oy) * ow + ox) * co..][..co];
                o.copy_from_slice(bias.data());
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xin = &xd[((bi * h + iy as usize) * wd + ix as usize) * c..][..c];
                        let wk = &wdt[(ky * kw + kx) * c * co..][..c * co];
                        for (ci, &xv) in xin.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (ov, &wv) in o.iter_mut().zip(&wk[ci * co..(ci + 1) * co]) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, co], out)
}

type ConvGrads = (Option<Tensor>, Tensor, Tensor);

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, pad: usize, want_x: bool) -> Result<ConvGrads> {
    let [b, h, wd, c, kh, kw, co, oh, ow] = conv_dims(x, w, pad)?;
    g.expect_shape(&[b, oh, ow, co])?;
    let (xd, wdt, gd) = (x.data(), w.data(), g.data());
    let mut gx = if want_x { vec![0.0f32; xd.len()] } else { vec![] };
    let mut gw = vec![0.0f32; wdt.len()];
    let mut gb = vec![0.0f32; co];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &gd[((bi * oh + oy) * ow + ox) * co..][..co];
                for (a, &v) in gb.iter_mut().zip(go) {
                    *a += v;
                }
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xoff = ((bi * h + iy as usize) * wd + ix as usize) * c;
                        let woff = (ky * kw + kx) * c * co;
                        for ci in 0..c {
                            let xv = xd[xoff + ci];
                            let wrow = &wdt[woff + ci * co..][..co];
                            let gwrow = &mut gw[woff + ci * co..][..co];
                            let mut acc = 0.0f32;
                            for ((gwv, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(go) {
                                *gwv += xv * gv;
                                acc += wv * gv;
                            }
                            if want_x {
                                gx[xoff + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        if want_x {
            Some(Tensor::new(x.shape().to_vec(), gx)?)
        } else {
            None
        },
        Tensor::new(w.shape().to_vec(), gw)?,
        Tensor::vector(gb),
    ))
}

#[cfg(test)]
impl Graph {
    /// Rewires `node`'s first input, for exercising cycle detection.
    pub(crate) fn rewire_for_test(&mut self, node: NodeId, new_input: NodeId) {
        if let Op::Add(a, _) = &mut self.nodes[node.0].op {
            *a = new_input;
        }
    }
}
