//! Patch codebook, belief predictor, substitution, and incubation labels.
//!
//! Each of the K patch positions owns n candidate tokens living in the
//! encoder embedding space. A small frozen-after-incubation MLP (the belief
//! predictor) scores the n candidates from raw patch pixels; the winning
//! token replaces the patch embedding at masked positions.

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};

use crate::error::{PacoError, Result};
use crate::graph::cosine_flat;
use crate::mask::MaskSet;
use crate::params::{small_uniform2, small_uniform3, xavier_uniform, zeros1, ParamVisit};
use crate::patch::PatchGrid;
use crate::rng::Rng;
use rand::Rng as _;

#[derive(Debug, Clone)]
pub struct PatchCodebook {
    /// [K, n, D]
    pub tokens: Array3<f64>,
}

impl PatchCodebook {
    pub fn new(num_positions: usize, candidates: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        PatchCodebook {
            tokens: small_uniform3(rng, num_positions, candidates, embed_dim, 0.02),
        }
    }

    pub fn num_positions(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn candidates(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

impl ParamVisit for PatchCodebook {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("tokens", self.tokens.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("tokens", self.tokens.view_mut().into_dyn());
    }
}

/// Two-layer MLP scoring the n candidate tokens of a position from that
/// patch's raw pixels. A learned per-position vector is added to the hidden
/// pre-activation so identical pixel content at different positions can still
/// receive different beliefs.
#[derive(Debug, Clone)]
pub struct BeliefPredictor {
    pub w1: Array2<f64>,        // [patch_len, hidden]
    pub b1: Array1<f64>,        // [hidden]
    pub pos_embed: Array2<f64>, // [K, hidden]
    pub w2: Array2<f64>,        // [hidden, n]
    pub b2: Array1<f64>,        // [n]
}

impl BeliefPredictor {
    pub fn new(
        patch_len: usize,
        num_positions: usize,
        candidates: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        BeliefPredictor {
            w1: xavier_uniform(rng, patch_len, hidden),
            b1: zeros1(hidden),
            pos_embed: small_uniform2(rng, num_positions, hidden, 0.02),
            w2: xavier_uniform(rng, hidden, candidates),
            b2: zeros1(candidates),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn candidates(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Raw logits for one position.
    pub fn logits_at(&self, patch_pixels: &[f64], position: usize) -> Vec<f64> {
        let hidden = self.b1.len();
        let mut h = vec![0.0f64; hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = self.b1[j] + self.pos_embed[[position, j]];
            for (i, &x) in patch_pixels.iter().enumerate() {
                acc += x * self.w1[[i, j]];
            }
            *hj = gelu(acc);
        }
        let n = self.candidates();
        let mut logits = vec![0.0f64; n];
        for (c, l) in logits.iter_mut().enumerate() {
            let mut acc = self.b2[c];
            for (j, &hj) in h.iter().enumerate() {
                acc += hj * self.w2[[j, c]];
            }
            *l = acc;
        }
        logits
    }
}

impl ParamVisit for BeliefPredictor {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f("w1", self.w1.view().into_dyn());
        f("b1", self.b1.view().into_dyn());
        f("pos_embed", self.pos_embed.view().into_dyn());
        f("w2", self.w2.view().into_dyn());
        f("b2", self.b2.view().into_dyn());
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f("w1", self.w1.view_mut().into_dyn());
        f("b1", self.b1.view_mut().into_dyn());
        f("pos_embed", self.pos_embed.view_mut().into_dyn());
        f("w2", self.w2.view_mut().into_dyn());
        f("b2", self.b2.view_mut().into_dyn());
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Token choices for the masked positions of one image, in mask order.
#[derive(Debug, Clone)]
pub struct TokenSelection {
    pub positions: Vec<usize>,
    pub alphas: Vec<usize>,
    /// [|M|, n]
    pub logits: Array2<f64>,
    /// [|M|, n]
    pub probs: Array2<f64>,
}

impl TokenSelection {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Per-position assignment vector for the substitution op: None keeps the
    /// original embedding, Some(j) installs token j.
    pub fn assignment(&self, num_positions: usize) -> Vec<Option<usize>> {
        let mut assign = vec![None; num_positions];
        for (&pos, &a) in self.positions.iter().zip(self.alphas.iter()) {
            assign[pos] = Some(a);
        }
        assign
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Score every masked position and pick its most probable token.
pub fn predict_beliefs(
    predictor: &BeliefPredictor,
    patches: &PatchGrid,
    mask: &MaskSet,
) -> Result<TokenSelection> {
    if patches.patch_len() != predictor.patch_len() {
        return Err(PacoError::shape(format!(
            "patch length {} does not match predictor input {}",
            patches.patch_len(),
            predictor.patch_len()
        )));
    }
    if mask.num_patches != patches.num_patches() {
        return Err(PacoError::shape(format!(
            "mask over {} positions but grid has {}",
            mask.num_patches,
            patches.num_patches()
        )));
    }
    let n = predictor.candidates();
    let m = mask.len();
    let mut logits = Array2::<f64>::zeros((m, n));
    let mut probs = Array2::<f64>::zeros((m, n));
    let mut alphas = Vec::with_capacity(m);
    for (r, &pos) in mask.positions.iter().enumerate() {
        let row = patches.patches.row(pos);
        let pixels: Vec<f64> = row.iter().copied().collect();
        let l = predictor.logits_at(&pixels, pos);
        let p = softmax(&l);
        alphas.push(argmax_lowest(&l));
        for c in 0..n {
            logits[[r, c]] = l[c];
            probs[[r, c]] = p[c];
        }
    }
    Ok(TokenSelection {
        positions: mask.positions.clone(),
        alphas,
        logits,
        probs,
    })
}

/// Replace masked rows of the embedded patches with their selected tokens.
/// Unmasked rows are returned bit-identical.
pub fn substitute(
    embedded: &Array2<f64>,
    codebook: &PatchCodebook,
    selection: &TokenSelection,
    mask: &MaskSet,
) -> Result<Array2<f64>> {
    if selection.positions != mask.positions {
        return Err(PacoError::arg(
            "token selection does not cover exactly the mask positions",
        ));
    }
    let k = embedded.shape()[0];
    if k != codebook.num_positions() || embedded.shape()[1] != codebook.embed_dim() {
        return Err(PacoError::shape(format!(
            "embedded patches {:?} vs codebook [{}, n, {}]",
            embedded.shape(),
            codebook.num_positions(),
            codebook.embed_dim()
        )));
    }
    let mut out = embedded.clone();
    for (&pos, &a) in selection.positions.iter().zip(selection.alphas.iter()) {
        if pos >= k {
            return Err(PacoError::arg(format!("mask position {pos} out of range")));
        }
        if a >= codebook.candidates() {
            return Err(PacoError::arg(format!("token index {a} out of range")));
        }
        for (c, v) in out.row_mut(pos).iter_mut().enumerate() {
            *v = codebook.tokens[[pos, a, c]];
        }
    }
    Ok(out)
}

/// Ground-truth token labels for the incubation phase.
///
/// For each candidate index j, every masked position is assigned token j and
/// the frozen model reconstructs the image; `reconstruct` returns the decoded
/// patch rows [K, patch_len] for that assignment. The label of masked
/// position i is the j whose reconstruction at i is most cosine-similar to
/// the original patch pixels, lowest j on ties.
pub fn incubation_labels(
    patches: &PatchGrid,
    mask: &MaskSet,
    candidates: usize,
    mut reconstruct: impl FnMut(&[Option<usize>]) -> Result<Array2<f64>>,
) -> Result<Vec<usize>> {
    let k = patches.num_patches();
    let m = mask.len();
    let mut best_sim = vec![f64::NEG_INFINITY; m];
    let mut labels = vec![0usize; m];
    for j in 0..candidates {
        let assign: Vec<Option<usize>> = (0..k)
            .map(|pos| if mask.contains(pos) { Some(j) } else { None })
            .collect();
        let decoded = reconstruct(&assign)?;
        if decoded.shape() != patches.patches.shape() {
            return Err(PacoError::shape(format!(
                "reconstruction shape {:?} vs patches {:?}",
                decoded.shape(),
                patches.patches.shape()
            )));
        }
        for (r, &pos) in mask.positions.iter().enumerate() {
            let sim = cosine_flat(
                decoded.row(pos).iter().copied(),
                patches.patches.row(pos).iter().copied(),
            );
            if sim > best_sim[r] {
                best_sim[r] = sim;
                labels[r] = j;
            }
        }
    }
    Ok(labels)
}

/// Number of masked positions whose token choice gets randomized during
/// incubation (round half up).
pub fn corrupt_count(fraction: f64, mask_len: usize) -> usize {
    (fraction * mask_len as f64).round() as usize
}

/// Randomize the token choice at a uniformly chosen subset of masked
/// positions. Labels and predictor outputs are untouched; only alphas move.
pub fn incubation_corrupt(
    selection: &TokenSelection,
    fraction: f64,
    candidates: usize,
    rng: &mut Rng,
) -> Result<TokenSelection> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(PacoError::arg(format!(
            "corrupt fraction {fraction} outside [0, 1]"
        )));
    }
    let m = selection.len();
    let count = corrupt_count(fraction, m);
    let mut out = selection.clone();
    if count == 0 {
        return Ok(out);
    }
    let chosen = rand::seq::index::sample(rng, m, count);
    for idx in chosen {
        out.alphas[idx] = rng.gen_range(0..candidates);
    }
    Ok(out)
}
