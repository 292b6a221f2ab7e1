//! Encoder, pixel decoder, and the frozen perceptual backbone.
//!
//! Parameters are plain ndarray structs; forward passes are built on the
//! autodiff graph by binding every named array as a leaf (trainable or
//! frozen) and assembling ops. The plain `encode`/`decode` entry points wrap
//! the same graph construction so there is exactly one forward definition.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayViewD, ArrayViewMutD};

use crate::error::{PacoError, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::params::{small_uniform2, xavier_uniform, zeros1, ParamVisit};
use crate::patch::{unpatchify_perm, ImageTensor};
use crate::rng::Rng;
use rand::Rng as _;

pub const LN_EPS: f64 = 1e-6;

/// One pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

impl BlockParams {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let hidden = 4 * dim;
        BlockParams {
            ln1_g: Array1::ones(dim),
            ln1_b: zeros1(dim),
            wq: xavier_uniform(rng, dim, dim),
            bq: zeros1(dim),
            wk: xavier_uniform(rng, dim, dim),
            bk: zeros1(dim),
            wv: xavier_uniform(rng, dim, dim),
            bv: zeros1(dim),
            wo: xavier_uniform(rng, dim, dim),
            bo: zeros1(dim),
            ln2_g: Array1::ones(dim),
            ln2_b: zeros1(dim),
            mlp_w1: xavier_uniform(rng, dim, hidden),
            mlp_b1: zeros1(hidden),
            mlp_w2: xavier_uniform(rng, hidden, dim),
            mlp_b2: zeros1(dim),
        }
    }

    /// All weights and biases zero, norms identity: the block becomes a
    /// no-op residual passthrough. Used by tests.
    pub fn zeroed(dim: usize) -> Self {
        let hidden = 4 * dim;
        BlockParams {
            ln1_g: Array1::ones(dim),
            ln1_b: zeros1(dim),
            wq: Array2::zeros((dim, dim)),
            bq: zeros1(dim),
            wk: Array2::zeros((dim, dim)),
            bk: zeros1(dim),
            wv: Array2::zeros((dim, dim)),
            bv: zeros1(dim),
            wo: Array2::zeros((dim, dim)),
            bo: zeros1(dim),
            ln2_g: Array1::ones(dim),
            ln2_b: zeros1(dim),
            mlp_w1: Array2::zeros((dim, hidden)),
            mlp_b1: zeros1(hidden),
            mlp_w2: Array2::zeros((hidden, dim)),
            mlp_b2: zeros1(dim),
        }
    }

    fn visit_fields(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("ln1_g", self.ln1_g.view().into_dyn());
        f("ln1_b", self.ln1_b.view().into_dyn());
        f("wq", self.wq.view().into_dyn());
        f("bq", self.bq.view().into_dyn());
        f("wk", self.wk.view().into_dyn());
        f("bk", self.bk.view().into_dyn());
        f("wv", self.wv.view().into_dyn());
        f("bv", self.bv.view().into_dyn());
        f("wo", self.wo.view().into_dyn());
        f("bo", self.bo.view().into_dyn());
        f("ln2_g", self.ln2_g.view().into_dyn());
        f("ln2_b", self.ln2_b.view().into_dyn());
        f("mlp_w1", self.mlp_w1.view().into_dyn());
        f("mlp_b1", self.mlp_b1.view().into_dyn());
        f("mlp_w2", self.mlp_w2.view().into_dyn());
        f("mlp_b2", self.mlp_b2.view().into_dyn());
    }

    fn visit_fields_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("ln1_g", self.ln1_g.view_mut().into_dyn());
        f("ln1_b", self.ln1_b.view_mut().into_dyn());
        f("wq", self.wq.view_mut().into_dyn());
        f("bq", self.bq.view_mut().into_dyn());
        f("wk", self.wk.view_mut().into_dyn());
        f("bk", self.bk.view_mut().into_dyn());
        f("wv", self.wv.view_mut().into_dyn());
        f("bv", self.bv.view_mut().into_dyn());
        f("wo", self.wo.view_mut().into_dyn());
        f("bo", self.bo.view_mut().into_dyn());
        f("ln2_g", self.ln2_g.view_mut().into_dyn());
        f("ln2_b", self.ln2_b.view_mut().into_dyn());
        f("mlp_w1", self.mlp_w1.view_mut().into_dyn());
        f("mlp_b1", self.mlp_b1.view_mut().into_dyn());
        f("mlp_w2", self.mlp_w2.view_mut().into_dyn());
        f("mlp_b2", self.mlp_b2.view_mut().into_dyn());
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub proj_w: Array2<f64>, // [patch_len, D]
    pub proj_b: Array1<f64>,
    pub pos_embed: Array2<f64>, // [K, D]
    pub blocks: Vec<BlockParams>,
    pub final_g: Array1<f64>,
    pub final_b: Array1<f64>,
    pub heads: usize,
}

impl EncoderParams {
    pub fn new(
        patch_len: usize,
        num_positions: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(dim % heads == 0, "heads must divide dim");
        EncoderParams {
            proj_w: xavier_uniform(rng, patch_len, dim),
            proj_b: zeros1(dim),
            pos_embed: small_uniform2(rng, num_positions, dim, 0.02),
            blocks: (0..depth).map(|_| BlockParams::new(dim, rng)).collect(),
            final_g: Array1::ones(dim),
            final_b: zeros1(dim),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj_w.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Plain linear patch embedding (projection + bias), no position info.
    pub fn embed(&self, patches: &Array2<f64>) -> Result<Array2<f64>> {
        if patches.shape()[1] != self.proj_w.shape()[0] {
            return Err(PacoError::shape(format!(
                "patch length {} vs projection input {}",
                patches.shape()[1],
                self.proj_w.shape()[0]
            )));
        }
        Ok(patches.dot(&self.proj_w) + &self.proj_b)
    }

    /// Eval-mode encode: final activations plus the tap-layer pyramid.
    pub fn encode(
        &self,
        substituted: &Array2<f64>,
        taps: &[usize],
    ) -> Result<(Array2<f64>, FeaturePyramid)> {
        if substituted.shape() != [self.pos_embed.shape()[0], self.dim()] {
            return Err(PacoError::shape(format!(
                "substituted embeddings {:?} vs [{}, {}]",
                substituted.shape(),
                self.pos_embed.shape()[0],
                self.dim()
            )));
        }
        let mut g = Graph::new();
        let bound = bind_params(&mut g, self, false);
        let x = g.constant2(substituted);
        let (out, block_outs) = encode_graph(&mut g, &bound, self, x);
        let features = taps
            .iter()
            .map(|&t| {
                block_outs
                    .get(t.checked_sub(1).ok_or_else(|| PacoError::arg("tap layers are 1-indexed"))?)
                    .map(|&id| to2(g.value(id)))
                    .ok_or_else(|| PacoError::arg(format!("tap layer {t} beyond depth")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            to2(g.value(out)),
            FeaturePyramid { taps: taps.to_vec(), features },
        ))
    }
}

impl ParamVisit for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("proj_w", self.proj_w.view().into_dyn());
        f("proj_b", self.proj_b.view().into_dyn());
        f("pos_embed", self.pos_embed.view().into_dyn());
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_fields(&mut |name, v| f(&format!("blocks.{i}.{name}"), v));
        }
        f("final_g", self.final_g.view().into_dyn());
        f("final_b", self.final_b.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("proj_w", self.proj_w.view_mut().into_dyn());
        f("proj_b", self.proj_b.view_mut().into_dyn());
        f("pos_embed", self.pos_embed.view_mut().into_dyn());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_fields_mut(&mut |name, v| f(&format!("blocks.{i}.{name}"), v));
        }
        f("final_g", self.final_g.view_mut().into_dyn());
        f("final_b", self.final_b.view_mut().into_dyn());
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub blocks: Vec<BlockParams>,
    pub out_w: Array2<f64>, // [D, patch_len]
    pub out_b: Array1<f64>,
    pub heads: usize,
}

impl DecoderParams {
    pub fn new(dim: usize, patch_len: usize, depth: usize, heads: usize, rng: &mut Rng) -> Self {
        DecoderParams {
            blocks: (0..depth).map(|_| BlockParams::new(dim, rng)).collect(),
            out_w: xavier_uniform(rng, dim, patch_len),
            out_b: zeros1(patch_len),
            heads,
        }
    }

    /// Eval-mode decode to flat patch rows [K, patch_len].
    pub fn decode_rows(&self, encoded: &Array2<f64>) -> Result<Array2<f64>> {
        if encoded.shape()[1] != self.out_w.shape()[0] {
            return Err(PacoError::shape(format!(
                "encoded dim {} vs decoder input {}",
                encoded.shape()[1],
                self.out_w.shape()[0]
            )));
        }
        let mut g = Graph::new();
        let bound = bind_params(&mut g, self, false);
        let x = g.constant2(encoded);
        let out = decode_graph(&mut g, &bound, self, x);
        Ok(to2(g.value(out)))
    }

    /// Eval-mode decode all the way to an image.
    pub fn decode(
        &self,
        encoded: &Array2<f64>,
        grid_rows: usize,
        grid_cols: usize,
        patch_size: usize,
        channels: usize,
    ) -> Result<ImageTensor> {
        let rows = self.decode_rows(encoded)?;
        crate::patch::patches_to_image(&rows, grid_rows, grid_cols, patch_size, channels)
    }
}

impl ParamVisit for DecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_fields(&mut |name, v| f(&format!("blocks.{i}.{name}"), v));
        }
        f("out_w", self.out_w.view().into_dyn());
        f("out_b", self.out_b.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_fields_mut(&mut |name, v| f(&format!("blocks.{i}.{name}"), v));
        }
        f("out_w", self.out_w.view_mut().into_dyn());
        f("out_b", self.out_b.view_mut().into_dyn());
    }
}

/// Encoder activations captured at the configured tap layers.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub taps: Vec<usize>,
    pub features: Vec<Array2<f64>>,
}

/// Frozen convolutional feature extractor standing in for a pretrained
/// perceptual model. Weights are set once and never updated; feature maps
/// are the pre-activation conv outputs, with tanh between layers.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Array4<f64>, // [C_out, C_in, k, k]
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct PerceptualBackbone {
    pub layers: Vec<ConvLayer>,
    pub stride: usize,
    pub pad: usize,
}

impl PerceptualBackbone {
    pub fn new(
        in_channels: usize,
        channels: &[usize],
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for &cout in channels {
            let fan = cin * kernel * kernel;
            let bound = (6.0 / (fan + cout * kernel * kernel) as f64).sqrt();
            let weight =
                Array4::from_shape_fn((cout, cin, kernel, kernel), |_| rng.gen_range(-bound..bound));
            layers.push(ConvLayer { weight, bias: zeros1(cout) });
            cin = cout;
        }
        PerceptualBackbone { layers, stride, pad: kernel / 2 }
    }

    /// One stride-1 layer whose kernel is a centered delta: features equal
    /// the input exactly. Used by tests.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "identity kernel must be odd");
        let mut weight = Array4::<f64>::zeros((channels, channels, kernel, kernel));
        for c in 0..channels {
            weight[[c, c, kernel / 2, kernel / 2]] = 1.0;
        }
        PerceptualBackbone {
            layers: vec![ConvLayer { weight, bias: zeros1(channels) }],
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Pre-activation feature maps at the given 1-indexed layers.
    pub fn features_at(&self, image: &ImageTensor, indices: &[usize]) -> Result<Vec<ArrayD<f64>>> {
        let all = self.features_all(image)?;
        indices
            .iter()
            .map(|&i| {
                all.get(i.checked_sub(1).ok_or_else(|| PacoError::arg("layer indices are 1-indexed"))?)
                    .cloned()
                    .ok_or_else(|| PacoError::arg(format!("layer {i} beyond backbone depth")))
            })
            .collect()
    }

    /// Pre-activation feature maps at every layer.
    pub fn features_all(&self, image: &ImageTensor) -> Result<Vec<ArrayD<f64>>> {
        if self.layers.is_empty() {
            return Ok(Vec::new());
        }
        if image.channels() != self.layers[0].weight.shape()[1] {
            return Err(PacoError::shape(format!(
                "image channels {} vs backbone input {}",
                image.channels(),
                self.layers[0].weight.shape()[1]
            )));
        }
        let mut g = Graph::new();
        let chw = hwc_to_chw(image);
        let x = g.constant(chw.view());
        let taps = backbone_graph(&mut g, self, x);
        Ok(taps.into_iter().map(|id| g.value(id).clone()).collect())
    }
}

impl ParamVisit for PerceptualBackbone {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layers.{i}.weight"), l.weight.view().into_dyn());
            f(&format!("layers.{i}.bias"), l.bias.view().into_dyn());
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.weight"), l.weight.view_mut().into_dyn());
            f(&format!("layers.{i}.bias"), l.bias.view_mut().into_dyn());
        }
    }
}

/// [H, W, C] image to contiguous [C, H, W] array for convolution.
pub fn hwc_to_chw(image: &ImageTensor) -> ArrayD<f64> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut out = ArrayD::<f64>::zeros(ndarray::IxDyn(&[c, h, w]));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[ch, y, x]] = image.data[[y, x, ch]];
            }
        }
    }
    out
}

/// Permutation taking flat [K, P*P*C] patch rows to a flat [C, H, W] image,
/// for in-graph reconstruction feeding the perceptual backbone.
pub fn rows_to_chw_perm(
    grid_rows: usize,
    grid_cols: usize,
    patch_size: usize,
    channels: usize,
) -> Vec<usize> {
    let h = grid_rows * patch_size;
    let w = grid_cols * patch_size;
    let inv = unpatchify_perm(h, w, channels, patch_size);
    let mut perm = vec![0usize; inv.len()];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                perm[(c * h + y) * w + x] = inv[(y * w + x) * channels + c];
            }
        }
    }
    perm
}

/// Bind every named parameter of a component into the graph, trainable or
/// frozen, returning name → node for the forward builders.
pub fn bind_params(
    g: &mut Graph,
    params: &dyn ParamVisit,
    trainable: bool,
) -> BTreeMap<String, NodeId> {
    let mut map = BTreeMap::new();
    params.visit(&mut |name, v| {
        let id = if trainable { g.param(v) } else { g.constant(v) };
        map.insert(name.to_string(), id);
    });
    map
}

/// Pull dense gradients for every bound parameter, keyed by prefixed name.
pub fn gather_grads(
    g: &Graph,
    grads: &Gradients,
    bound: &BTreeMap<String, NodeId>,
    prefix: &str,
) -> BTreeMap<String, ArrayD<f64>> {
    bound
        .iter()
        .map(|(name, &id)| (format!("{prefix}.{name}"), grads.dense(g, id)))
        .collect()
}

fn node(bound: &BTreeMap<String, NodeId>, name: &str) -> NodeId {
    *bound
        .get(name)
        .unwrap_or_else(|| panic!("parameter {name} not bound"))
}

fn to2(v: &ArrayD<f64>) -> Array2<f64> {
    v.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 value")
        .to_owned()
}

/// Linear patch embedding inside the graph: patches [K, plen] → [K, D].
pub fn embed_graph(g: &mut Graph, bound: &BTreeMap<String, NodeId>, patches: NodeId) -> NodeId {
    let w = node(bound, "proj_w");
    let b = node(bound, "proj_b");
    let proj = g.matmul(patches, w);
    g.add_row_bias(proj, b)
}

fn attention_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> NodeId {
    let dim = g.value(x).shape()[1];
    assert!(dim % heads == 0, "heads must divide dim");
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let wq = node(bound, &format!("{prefix}.wq"));
    let bq = node(bound, &format!("{prefix}.bq"));
    let wk = node(bound, &format!("{prefix}.wk"));
    let bk = node(bound, &format!("{prefix}.bk"));
    let wv = node(bound, &format!("{prefix}.wv"));
    let bv = node(bound, &format!("{prefix}.bv"));
    let wo = node(bound, &format!("{prefix}.wo"));
    let bo = node(bound, &format!("{prefix}.bo"));
    let q = g.matmul(x, wq);
    let q = g.add_row_bias(q, bq);
    let k = g.matmul(x, wk);
    let k = g.add_row_bias(k, bk);
    let v = g.matmul(x, wv);
    let v = g.add_row_bias(v, bv);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        head_outs.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&head_outs);
    let out = g.matmul(cat, wo);
    g.add_row_bias(out, bo)
}

fn block_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> NodeId {
    let ln1_g = node(bound, &format!("{prefix}.ln1_g"));
    let ln1_b = node(bound, &format!("{prefix}.ln1_b"));
    let normed = g.layer_norm_rows(x, ln1_g, ln1_b, LN_EPS);
    let attn = attention_graph(g, bound, prefix, normed, heads);
    let x = g.add(x, attn);
    let ln2_g = node(bound, &format!("{prefix}.ln2_g"));
    let ln2_b = node(bound, &format!("{prefix}.ln2_b"));
    let normed2 = g.layer_norm_rows(x, ln2_g, ln2_b, LN_EPS);
    let w1 = node(bound, &format!("{prefix}.mlp_w1"));
    let b1 = node(bound, &format!("{prefix}.mlp_b1"));
    let w2 = node(bound, &format!("{prefix}.mlp_w2"));
    let b2 = node(bound, &format!("{prefix}.mlp_b2"));
    let h = g.matmul(normed2, w1);
    let h = g.add_row_bias(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    let out = g.add_row_bias(out, b2);
    g.add(x, out)
}

/// Positional embedding addition, block stack, final norm. Returns the final
/// activations and every block's output (for tap selection).
pub fn encode_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    params: &EncoderParams,
    substituted: NodeId,
) -> (NodeId, Vec<NodeId>) {
    let pos = node(bound, "pos_embed");
    let mut x = g.add(substituted, pos);
    let mut block_outs = Vec::with_capacity(params.depth());
    for i in 0..params.depth() {
        x = block_graph(g, bound, &format!("blocks.{i}"), x, params.heads);
        block_outs.push(x);
    }
    let fg = node(bound, "final_g");
    let fb = node(bound, "final_b");
    let out = g.layer_norm_rows(x, fg, fb, LN_EPS);
    (out, block_outs)
}

/// Decoder blocks then the linear pixel projection: [K, D] → [K, patch_len].
pub fn decode_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    params: &DecoderParams,
    encoded: NodeId,
) -> NodeId {
    let mut x = encoded;
    for i in 0..params.blocks.len() {
        x = block_graph(g, bound, &format!("blocks.{i}"), x, params.heads);
    }
    let w = node(bound, "out_w");
    let b = node(bound, "out_b");
    let out = g.matmul(x, w);
    g.add_row_bias(out, b)
}

/// Frozen conv stack over a [C, H, W] node. Returns the pre-activation
/// output of every layer; tanh connects consecutive layers.
pub fn backbone_graph(g: &mut Graph, backbone: &PerceptualBackbone, image_chw: NodeId) -> Vec<NodeId> {
    let mut taps = Vec::with_capacity(backbone.layers.len());
    let mut x = image_chw;
    for (i, layer) in backbone.layers.iter().enumerate() {
        let w = g.constant(layer.weight.view().into_dyn());
        let b = g.constant(layer.bias.view().into_dyn());
        let pre = g.conv2d(x, w, b, backbone.stride, backbone.pad);
        taps.push(pre);
        if i + 1 < backbone.layers.len() {
            x = g.tanh(pre);
        }
    }
    taps
}
