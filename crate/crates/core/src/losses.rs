//! Reconstruction and belief objectives.
//!
//! Each loss exists in two forms that share their definitions: a plain
//! function over arrays (evaluation, logging) and a graph builder
//! (training). The graph builders are thin compositions of graph ops, so
//! gradient checks against the plain forms cover both.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codebook::TokenSelection;
use crate::error::{PacoError, Result};
use crate::graph::{cosine_flat, Graph, NodeId};
use crate::model::{backbone_graph, PerceptualBackbone};
use crate::patch::ImageTensor;

/// Component losses of one step (averaged over the batch by the caller).
/// `belief_ce` is zero outside incubation unless an ablation trains the
/// predictor synchronously; `total` always equals
/// mse + lambda·perceptual + belief_ce.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossReport {
    pub mse: f64,
    pub perceptual: f64,
    pub belief_ce: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.mse.is_finite()
            && self.perceptual.is_finite()
            && self.belief_ce.is_finite()
            && self.total.is_finite()
    }
}

/// Mean squared per-pixel difference over the entire image.
pub fn mse_loss(predicted: &ImageTensor, original: &ImageTensor) -> Result<f64> {
    if predicted.data.shape() != original.data.shape() {
        return Err(PacoError::shape(format!(
            "mse shapes {:?} vs {:?}",
            predicted.data.shape(),
            original.data.shape()
        )));
    }
    let n = predicted.data.len() as f64;
    Ok(predicted
        .data
        .iter()
        .zip(original.data.iter())
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / n)
}

/// Negated sum of per-layer cosine similarities between backbone features of
/// the two images, each feature map flattened to a vector.
pub fn perceptual_loss(
    backbone: &PerceptualBackbone,
    predicted: &ImageTensor,
    original: &ImageTensor,
    layer_indices: &[usize],
) -> Result<f64> {
    let fp = backbone.features_at(predicted, layer_indices)?;
    let fo = backbone.features_at(original, layer_indices)?;
    let mut total = 0.0;
    for (a, b) in fp.iter().zip(fo.iter()) {
        total -= cosine_flat(a.iter().copied(), b.iter().copied());
    }
    Ok(total)
}

/// Mean (or raw sum) negative log-probability of each labeled token under
/// the predictor's softmax, across all masked positions of all selections.
pub fn belief_ce_loss(
    selections: &[&TokenSelection],
    labels: &[Vec<usize>],
    sum_reduction: bool,
) -> Result<f64> {
    if selections.len() != labels.len() {
        return Err(PacoError::arg(
            "one label vector per selection required",
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (sel, ys) in selections.iter().zip(labels.iter()) {
        if sel.len() != ys.len() {
            return Err(PacoError::arg(format!(
                "selection covers {} positions but {} labels given",
                sel.len(),
                ys.len()
            )));
        }
        let n = sel.logits.shape()[1];
        for (r, &y) in ys.iter().enumerate() {
            if y >= n {
                return Err(PacoError::arg(format!("label {y} out of range (n={n})")));
            }
            let row = sel.logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y];
            count += 1;
        }
    }
    if !sum_reduction && count > 0 {
        total /= count as f64;
    }
    Ok(total)
}

/// Combine component losses. `belief_ce` participates only when given;
/// the caller decides that from phase and ablation.
pub fn total_loss(mse: f64, perceptual: f64, belief_ce: Option<f64>, lambda_perc: f64) -> LossReport {
    let ce = belief_ce.unwrap_or(0.0);
    LossReport {
        mse,
        perceptual,
        belief_ce: ce,
        total: mse + lambda_perc * perceptual + ce,
    }
}

/// Per-row normalization of target patch rows (mean 0, unit variance with a
/// 1e-6 variance floor), for the normalized-targets training variant.
pub fn per_patch_normalize(rows: &Array2<f64>) -> Array2<f64> {
    let mut out = rows.clone();
    let cols = rows.shape()[1] as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / cols;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
        let rstd = 1.0 / (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) * rstd);
    }
    out
}

/// Graph-side perceptual loss: run the frozen backbone over the predicted
/// [C, H, W] node and accumulate −cosine against the original's features.
pub fn perceptual_graph(
    g: &mut Graph,
    backbone: &PerceptualBackbone,
    predicted_chw: NodeId,
    original: &ImageTensor,
    layer_indices: &[usize],
) -> Result<NodeId> {
    let taps = backbone_graph(g, backbone, predicted_chw);
    let originals = backbone.features_at(original, layer_indices)?;
    let mut parts = Vec::with_capacity(layer_indices.len());
    for (&idx, ofeat) in layer_indices.iter().zip(originals.iter()) {
        let tap = *taps
            .get(idx.checked_sub(1).ok_or_else(|| PacoError::arg("layer indices are 1-indexed"))?)
            .ok_or_else(|| PacoError::arg(format!("layer {idx} beyond backbone depth")))?;
        let flat: Vec<f64> = ofeat.iter().copied().collect();
        let cos = g.cosine_vs_const(tap, &flat);
        parts.push((cos, -1.0));
    }
    Ok(g.combine(&parts))
}
