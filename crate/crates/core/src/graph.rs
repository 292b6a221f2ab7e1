//! Reverse-mode autodiff on a flat tape.
//!
//! A `Graph` is rebuilt for every training step: leaves hold parameter or
//! constant values, ops append nodes, `backward` walks the tape in reverse.
//! Everything is f64. Shape violations are programmer errors and panic.
//!
//! Gradients flow only into leaves created with `param`; `constant` leaves
//! and anything derived solely from them are skipped, which is how frozen
//! components (perceptual backbone, belief predictor in the main phase) are
//! kept out of the update without special casing.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Ix2, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRowBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    SoftmaxRows { a: NodeId },
    LayerNormRows { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Tanh { a: NodeId },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    GatherRows { a: NodeId, indices: Vec<usize> },
    /// out[i] = base[i] unless assign[i] = Some(j), then tokens[i, j, :].
    SubstituteRows { base: NodeId, tokens: NodeId, assign: Vec<Option<usize>> },
    /// Bijective reindex: out.flat[k] = a.flat[perm[k]].
    Permute { a: NodeId, perm: Vec<usize> },
    Reshape { a: NodeId },
    /// Frozen-weight convolution; gradients flow to the input only.
    Conv2d { a: NodeId, weight: NodeId, stride: usize, pad: usize },
    MseVsConst { a: NodeId, target: ArrayD<f64> },
    CosineVsConst { a: NodeId, target: Vec<f64> },
    /// Cross entropy of row r against labels[r]; mean or sum over rows.
    CrossEntropy { logits: NodeId, labels: Vec<usize>, mean: bool },
    MeanAll { a: NodeId },
    /// Scalar sum of weighted scalar parts.
    Combine { parts: Vec<(NodeId, f64)> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, densified to its shape when absent.
    pub fn dense(&self, g: &Graph, id: NodeId) -> ArrayD<f64> {
        match self.grads[id.0].as_ref() {
            Some(gr) => gr.clone(),
            None => ArrayD::zeros(g.nodes[id.0].value.raw_dim()),
        }
    }
}

fn as2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("rank-2 node")
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

const COSINE_NORM_FLOOR: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert!(v.len() == 1, "scalar node expected");
        v.iter().copied().next().unwrap()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayViewD<f64>) -> NodeId {
        self.push(value.to_owned(), Op::Leaf, true)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: ArrayViewD<f64>) -> NodeId {
        self.push(value.to_owned(), Op::Leaf, false)
    }

    pub fn constant2(&mut self, value: &Array2<f64>) -> NodeId {
        self.constant(value.view().into_dyn())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dims");
        let out = av.dot(&bv).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Matmul { a, b }, ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = as2(&self.nodes[a.0].value).t().to_owned().into_dyn();
        let ng = self.ng(a);
        self.push(out, Op::Transpose { a }, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "add shapes"
        );
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "mul shapes"
        );
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul { a, b }, ng)
    }

    /// Broadcast-add a length-C bias to every row of [R, C].
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let bv = &self.nodes[bias.0].value;
        assert_eq!(av.shape()[1], bv.len(), "bias length");
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias rank 1");
        let out = (&av + &b1).into_dyn();
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRowBias { a, bias }, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|v| v * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale { a, c }, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.ng(a);
        self.push(out.into_dyn(), Op::SoftmaxRows { a }, ng)
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let g = self.nodes[gamma.0].value.clone();
        let b = self.nodes[beta.0].value.clone();
        let cols = av.shape()[1];
        assert_eq!(g.len(), cols, "gamma length");
        assert_eq!(b.len(), cols, "beta length");
        let mut out = av.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(out.into_dyn(), Op::LayerNormRows { a, gamma, beta, eps }, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(gelu_scalar);
        let ng = self.ng(a);
        self.push(out, Op::Gelu { a }, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh { a }, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        assert!(start + len <= av.shape()[1], "slice bounds");
        let out = av.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start, len }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = as2(&self.nodes[parts[0].0].value).shape()[0];
        let total: usize = parts
            .iter()
            .map(|p| as2(&self.nodes[p.0].value).shape()[1])
            .sum();
        let mut out = Array2::<f64>::zeros((rows, total));
        let mut col = 0;
        for p in parts {
            let pv = as2(&self.nodes[p.0].value);
            assert_eq!(pv.shape()[0], rows, "concat rows");
            let w = pv.shape()[1];
            out.slice_mut(ndarray::s![.., col..col + w]).assign(&pv);
            col += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out.into_dyn(), Op::ConcatCols { parts: parts.to_vec() }, ng)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let cols = av.shape()[1];
        let mut out = Array2::<f64>::zeros((indices.len(), cols));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).assign(&av.row(i));
        }
        let ng = self.ng(a);
        self.push(
            out.into_dyn(),
            Op::GatherRows { a, indices: indices.to_vec() },
            ng,
        )
    }

    /// Replace rows of `base` [K, D] with rows of `tokens` [K, n, D] where
    /// `assign[i] = Some(j)`. Unassigned rows pass through untouched.
    pub fn substitute_rows(
        &mut self,
        base: NodeId,
        tokens: NodeId,
        assign: &[Option<usize>],
    ) -> NodeId {
        let bv = as2(&self.nodes[base.0].value).to_owned();
        let tv = &self.nodes[tokens.0].value;
        let tshape = tv.shape().to_vec();
        assert_eq!(tshape.len(), 3, "tokens rank 3");
        let (k, n, d) = (tshape[0], tshape[1], tshape[2]);
        assert_eq!(bv.shape(), [k, d], "base shape vs tokens");
        assert_eq!(assign.len(), k, "assignment length");
        let tflat = tv.as_slice().expect("contiguous tokens");
        let mut out = bv;
        for (i, a) in assign.iter().enumerate() {
            if let Some(j) = a {
                assert!(*j < n, "token index in range");
                let off = (i * n + j) * d;
                for (c, v) in out.row_mut(i).iter_mut().enumerate() {
                    *v = tflat[off + c];
                }
            }
        }
        let ng = self.ng(base) || self.ng(tokens);
        self.push(
            out.into_dyn(),
            Op::SubstituteRows { base, tokens, assign: assign.to_vec() },
            ng,
        )
    }

    /// Bijective reindex into `out_shape`: out.flat[k] = a.flat[perm[k]].
    pub fn permute(&mut self, a: NodeId, perm: &[usize], out_shape: &[usize]) -> NodeId {
        let src: Vec<f64> = self.nodes[a.0].value.iter().copied().collect();
        assert_eq!(perm.len(), src.len(), "perm is a bijection");
        assert_eq!(out_shape.iter().product::<usize>(), src.len(), "shape size");
        let data: Vec<f64> = perm.iter().map(|&i| src[i]).collect();
        let out = ArrayD::from_shape_vec(IxDyn(out_shape), data).expect("permute shape");
        let ng = self.ng(a);
        self.push(out, Op::Permute { a, perm: perm.to_vec() }, ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = &self.nodes[a.0].value;
        assert_eq!(shape.iter().product::<usize>(), v.len(), "reshape size");
        let data: Vec<f64> = v.iter().copied().collect();
        let out = ArrayD::from_shape_vec(IxDyn(shape), data).expect("reshape");
        let ng = self.ng(a);
        self.push(out, Op::Reshape { a }, ng)
    }

    /// 2D convolution of [C_in, H, W] with constant weight [C_out, C_in, k, k]
    /// and bias [C_out]. Gradients reach the input only; the weights must be
    /// constants (frozen backbone).
    pub fn conv2d(
        &mut self,
        a: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        assert!(
            !self.ng(weight) && !self.ng(bias),
            "conv weights must be frozen constants"
        );
        let inp = &self.nodes[a.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let out = conv2d_forward(inp, w, b, stride, pad);
        let ng = self.ng(a);
        self.push(out, Op::Conv2d { a, weight, stride, pad }, ng)
    }

    /// Mean squared difference against a constant target, over all elements.
    pub fn mse_vs_const(&mut self, a: NodeId, target: ArrayViewD<f64>) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape(), target.shape(), "mse shapes");
        let n = av.len() as f64;
        let v = av
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let ng = self.ng(a);
        self.push(
            scalar(v),
            Op::MseVsConst { a, target: target.to_owned() },
            ng,
        )
    }

    /// Cosine similarity between the flattened node and a constant vector.
    /// Defined as 0 when either operand's norm is below 1e-12.
    pub fn cosine_vs_const(&mut self, a: NodeId, target: &[f64]) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), target.len(), "cosine lengths");
        let v = cosine_flat(av.iter().copied(), target.iter().copied());
        let ng = self.ng(a);
        self.push(
            scalar(v),
            Op::CosineVsConst { a, target: target.to_vec() },
            ng,
        )
    }

    /// Cross entropy of softmax(logits) rows against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], mean: bool) -> NodeId {
        let lv = as2(&self.nodes[logits.0].value);
        assert_eq!(lv.shape()[0], labels.len(), "one label per row");
        let mut total = 0.0;
        for (row, &label) in lv.rows().into_iter().zip(labels.iter()) {
            assert!(label < row.len(), "label in range");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label];
        }
        if mean && !labels.is_empty() {
            total /= labels.len() as f64;
        }
        let ng = self.ng(logits);
        self.push(
            scalar(total),
            Op::CrossEntropy { logits, labels: labels.to_vec(), mean },
            ng,
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let v = av.sum() / av.len() as f64;
        let ng = self.ng(a);
        self.push(scalar(v), Op::MeanAll { a }, ng)
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, parts: &[(NodeId, f64)]) -> NodeId {
        let v = parts
            .iter()
            .map(|(id, w)| self.scalar_value(*id) * w)
            .sum::<f64>();
        let ng = parts.iter().any(|(id, _)| self.ng(*id));
        self.push(scalar(v), Op::Combine { parts: parts.to_vec() }, ng)
    }

    /// Backpropagate from a scalar loss node through the whole tape.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        assert!(self.nodes[loss.0].value.len() == 1, "loss must be scalar");
        grads[loss.0] = Some(scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            // Re-store for callers, then propagate into parents.
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(idx, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], id: NodeId, delta: ArrayD<f64>) {
        if !self.ng(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, gout: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let g = as2(gout);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(&bv.t()).into_dyn());
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, av.t().dot(&g).into_dyn());
                }
            }
            Op::Transpose { a } => {
                let g = as2(gout).t().to_owned().into_dyn();
                self.accumulate(grads, *a, g);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Mul { a, b } => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, gout * &self.nodes[b.0].value);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, gout * &self.nodes[a.0].value);
                }
            }
            Op::AddRowBias { a, bias } => {
                self.accumulate(grads, *a, gout.clone());
                if self.ng(*bias) {
                    let g = as2(gout);
                    let db = g.sum_axis(ndarray::Axis(0));
                    self.accumulate(grads, *bias, db.into_dyn());
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, gout.mapv(|v| v * c));
            }
            Op::SoftmaxRows { a } => {
                let y = as2(&self.nodes[idx].value);
                let g = as2(gout);
                let mut da = Array2::<f64>::zeros(y.raw_dim());
                for r in 0..y.shape()[0] {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = yr.iter().zip(gr.iter()).map(|(y, g)| y * g).sum::<f64>();
                    for c in 0..y.shape()[1] {
                        da[[r, c]] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, da.into_dyn());
            }
            Op::LayerNormRows { a, gamma, beta, eps } => {
                let x = as2(&self.nodes[a.0].value);
                let gm = &self.nodes[gamma.0].value;
                let g = as2(gout);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let nf = cols as f64;
                let mut da = Array2::<f64>::zeros((rows, cols));
                let mut dgamma = Array1::<f64>::zeros(cols);
                let mut dbeta = Array1::<f64>::zeros(cols);
                for r in 0..rows {
                    let xr = x.row(r);
                    let mean = xr.sum() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                    let gr = g.row(r);
                    let dxhat: Vec<f64> = (0..cols).map(|c| gr[c] * gm[c]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                    let mean_dxhat_xhat = dxhat
                        .iter()
                        .zip(xhat.iter())
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / nf;
                    for c in 0..cols {
                        da[[r, c]] =
                            rstd * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                }
                self.accumulate(grads, *a, da.into_dyn());
                if self.ng(*gamma) {
                    self.accumulate(grads, *gamma, dgamma.into_dyn());
                }
                if self.ng(*beta) {
                    self.accumulate(grads, *beta, dbeta.into_dyn());
                }
            }
            Op::Gelu { a } => {
                let x = &self.nodes[a.0].value;
                let mut da = gout.clone();
                da.zip_mut_with(x, |g, &x| *g *= gelu_grad_scalar(x));
                self.accumulate(grads, *a, da);
            }
            Op::Tanh { a } => {
                let y = &self.nodes[idx].value;
                let mut da = gout.clone();
                da.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y);
                self.accumulate(grads, *a, da);
            }
            Op::SliceCols { a, start, len } => {
                let av = as2(&self.nodes[a.0].value);
                let mut da = Array2::<f64>::zeros(av.raw_dim());
                da.slice_mut(ndarray::s![.., *start..*start + *len])
                    .assign(&as2(gout));
                self.accumulate(grads, *a, da.into_dyn());
            }
            Op::ConcatCols { parts } => {
                let g = as2(gout);
                let mut col = 0;
                for p in parts {
                    let w = as2(&self.nodes[p.0].value).shape()[1];
                    if self.ng(*p) {
                        let dp = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        self.accumulate(grads, *p, dp.into_dyn());
                    }
                    col += w;
                }
            }
            Op::GatherRows { a, indices } => {
                let av = as2(&self.nodes[a.0].value);
                let g = as2(gout);
                let mut da = Array2::<f64>::zeros(av.raw_dim());
                for (r, &i) in indices.iter().enumerate() {
                    let mut dst = da.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(grads, *a, da.into_dyn());
            }
            Op::SubstituteRows { base, tokens, assign } => {
                let g = as2(gout);
                if self.ng(*base) {
                    let mut db = g.to_owned();
                    for (i, a) in assign.iter().enumerate() {
                        if a.is_some() {
                            db.row_mut(i).fill(0.0);
                        }
                    }
                    self.accumulate(grads, *base, db.into_dyn());
                }
                if self.ng(*tokens) {
                    let tshape = self.nodes[tokens.0].value.shape().to_vec();
                    let (n, d) = (tshape[1], tshape[2]);
                    let mut dt = ArrayD::<f64>::zeros(IxDyn(&tshape));
                    let dtf = dt.as_slice_mut().expect("contiguous grad");
                    for (i, a) in assign.iter().enumerate() {
                        if let Some(j) = a {
                            let off = (i * n + j) * d;
                            for (c, gv) in g.row(i).iter().enumerate() {
                                dtf[off + c] += gv;
                            }
                        }
                    }
                    self.accumulate(grads, *tokens, dt);
                }
            }
            Op::Permute { a, perm } => {
                let gsrc: Vec<f64> = gout.iter().copied().collect();
                let mut da = vec![0.0f64; gsrc.len()];
                for (k, &i) in perm.iter().enumerate() {
                    da[i] += gsrc[k];
                }
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(
                    grads,
                    *a,
                    ArrayD::from_shape_vec(IxDyn(&shape), da).expect("permute grad"),
                );
            }
            Op::Reshape { a } => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let data: Vec<f64> = gout.iter().copied().collect();
                self.accumulate(
                    grads,
                    *a,
                    ArrayD::from_shape_vec(IxDyn(&shape), data).expect("reshape grad"),
                );
            }
            Op::Conv2d { a, weight, stride, pad } => {
                let w = &self.nodes[weight.0].value;
                let da = conv2d_input_grad(&self.nodes[a.0].value, w, gout, *stride, *pad);
                self.accumulate(grads, *a, da);
            }
            Op::MseVsConst { a, target } => {
                let gs = gout.iter().copied().next().unwrap();
                let av = &self.nodes[a.0].value;
                let n = av.len() as f64;
                let mut da = av - target;
                da.mapv_inplace(|v| gs * 2.0 * v / n);
                self.accumulate(grads, *a, da);
            }
            Op::CosineVsConst { a, target } => {
                let gs = gout.iter().copied().next().unwrap();
                let av = &self.nodes[a.0].value;
                let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
                let shape = av.shape().to_vec();
                let da = if na < COSINE_NORM_FLOOR || nt < COSINE_NORM_FLOOR {
                    ArrayD::zeros(IxDyn(&shape))
                } else {
                    let dot = av.iter().zip(target.iter()).map(|(a, t)| a * t).sum::<f64>();
                    let c = dot / (na * nt);
                    let data: Vec<f64> = av
                        .iter()
                        .zip(target.iter())
                        .map(|(a, t)| gs * (t / (na * nt) - c * a / (na * na)))
                        .collect();
                    ArrayD::from_shape_vec(IxDyn(&shape), data).expect("cosine grad")
                };
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy { logits, labels, mean } => {
                let gs = gout.iter().copied().next().unwrap();
                let lv = as2(&self.nodes[logits.0].value);
                let scalefac = if *mean && !labels.is_empty() {
                    gs / labels.len() as f64
                } else {
                    gs
                };
                let mut da = Array2::<f64>::zeros(lv.raw_dim());
                for (r, &label) in labels.iter().enumerate() {
                    let row = lv.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum = row.iter().map(|v| (v - max).exp()).sum::<f64>();
                    for c in 0..row.len() {
                        let p = (row[c] - max).exp() / sum;
                        let indicator = if c == label { 1.0 } else { 0.0 };
                        da[[r, c]] = scalefac * (p - indicator);
                    }
                }
                self.accumulate(grads, *logits, da.into_dyn());
            }
            Op::MeanAll { a } => {
                let gs = gout.iter().copied().next().unwrap();
                let av = &self.nodes[a.0].value;
                let n = av.len() as f64;
                let da = ArrayD::from_elem(av.raw_dim(), gs / n);
                self.accumulate(grads, *a, da);
            }
            Op::Combine { parts } => {
                let gs = gout.iter().copied().next().unwrap();
                for (id, w) in parts {
                    self.accumulate(grads, *id, scalar(gs * w));
                }
            }
        }
    }
}

/// Cosine between two flat sequences with the shared zero-norm convention.
pub fn cosine_flat(
    a: impl Iterator<Item = f64>,
    b: impl Iterator<Item = f64>,
) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn conv2d_forward(
    input: &ArrayD<f64>,
    weight: &ArrayD<f64>,
    bias: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let ishape = input.shape();
    let wshape = weight.shape();
    assert_eq!(ishape.len(), 3, "conv input [C,H,W]");
    assert_eq!(wshape.len(), 4, "conv weight [Co,Ci,kh,kw]");
    let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (co, wci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    assert_eq!(ci, wci, "conv channels");
    assert_eq!(bias.len(), co, "conv bias");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let inp = input.as_slice().expect("contiguous conv input");
    let wt = weight.as_slice().expect("contiguous conv weight");
    let bs = bias.as_slice().expect("contiguous conv bias");
    let mut out = vec![0.0f64; co * oh * ow];
    for c_out in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bs[c_out];
                for c_in in 0..ci {
                    for ky in 0..kh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += wt[((c_out * ci + c_in) * kh + ky) * kw + kx]
                                * inp[(c_in * h + y as usize) * w + x as usize];
                        }
                    }
                }
                out[(c_out * oh + oy) * ow + ox] = acc;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[co, oh, ow]), out).expect("conv shape")
}

fn conv2d_input_grad(
    input: &ArrayD<f64>,
    weight: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let ishape = input.shape();
    let wshape = weight.shape();
    let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (co, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let oshape = gout.shape();
    let (oh, ow) = (oshape[1], oshape[2]);
    let wt = weight.as_slice().expect("contiguous weight");
    let g = gout.as_slice().expect("contiguous grad");
    let mut da = vec![0.0f64; ci * h * w];
    for c_out in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(c_out * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for c_in in 0..ci {
                    for ky in 0..kh {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            da[(c_in * h + y as usize) * w + x as usize] +=
                                gv * wt[((c_out * ci + c_in) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[ci, h, w]), da).expect("conv grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn matmul_values_and_grads() {
        let mut g = Graph::new();
        let a = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn().view());
        let b = g.param(arr2(&[[0.5, -1.0], [2.0, 0.0]]).into_dyn().view());
        let c = g.matmul(a, b);
        let loss = g.mean_all(c);
        let grads = g.backward(loss);
        // d mean(AB) / dA = (1/4) * ones * B^T
        let da = grads.get(a).unwrap();
        let expect = arr2(&[[0.5, -1.0], [2.0, 0.0]]).t().dot(&arr2(&[
            [0.25, 0.25],
            [0.25, 0.25],
        ]));
        // dA = G B^T with G = 0.25 everywhere
        let gm = arr2(&[[0.25, 0.25], [0.25, 0.25]]);
        let want = gm.dot(&arr2(&[[0.5, -1.0], [2.0, 0.0]]).t());
        assert_eq!(da.shape(), [2, 2]);
        for (x, y) in da.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let _ = expect;
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let a = g.constant(arr2(&[[1.0, 2.0]]).into_dyn().view());
        let b = g.param(arr2(&[[3.0], [4.0]]).into_dyn().view());
        let c = g.matmul(a, b);
        let loss = g.mean_all(c);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.param(arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn().view());
        let s = g.softmax_rows(a);
        let v = as2(g.value(s));
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn substitute_routes_grads_to_selected_tokens_only() {
        let mut g = Graph::new();
        let base = g.param(Array2::<f64>::zeros((3, 2)).into_dyn().view());
        let tokens = g.param(
            ArrayD::from_shape_vec(IxDyn(&[3, 2, 2]), (0..12).map(|v| v as f64).collect())
                .unwrap()
                .view(),
        );
        let assign = vec![None, Some(1), None];
        let out = g.substitute_rows(base, tokens, &assign);
        let loss = g.mean_all(out);
        let grads = g.backward(loss);
        let dt = grads.get(tokens).unwrap();
        // Only tokens[1, 1, :] received gradient.
        for i in 0..3 {
            for j in 0..2 {
                for d in 0..2 {
                    let v = dt[[i, j, d]];
                    if i == 1 && j == 1 {
                        assert!(v != 0.0);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        let db = grads.get(base).unwrap();
        assert_eq!(db[[1, 0]], 0.0);
        assert!(db[[0, 0]] != 0.0);
    }

    #[test]
    fn permute_roundtrip_grad() {
        let mut g = Graph::new();
        let a = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn().view());
        let perm = vec![3, 2, 1, 0];
        let p = g.permute(a, &perm, &[4]);
        let loss = g.mean_all(p);
        let grads = g.backward(loss);
        let da = grads.get(a).unwrap();
        for v in da.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
