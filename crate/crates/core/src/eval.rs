//! Downstream evaluation: parsing F1, landmark NME/FR/AUC, and the probe
//! heads that read multi-level encoder features for both tasks.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticFaceSample;
use crate::error::{PacoError, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{bind_params, embed_graph, encode_graph, EncoderParams};
use crate::optim::AdamW;
use crate::params::{xavier_uniform, zeros1, ParamVisit};
use crate::patch::{patchify, ImageTensor};
use crate::rng::stream_rng;
use crate::RunConfig;

/// Per-pixel class assignment over a known vocabulary.
#[derive(Debug, Clone)]
pub struct ParsingPrediction {
    pub classes: Array2<u8>,
    pub num_classes: usize,
}

impl ParsingPrediction {
    pub fn new(classes: Array2<u8>, num_classes: usize) -> Result<Self> {
        if let Some(&c) = classes.iter().find(|&&c| c as usize >= num_classes) {
            return Err(PacoError::arg(format!(
                "class id {c} outside vocabulary of {num_classes}"
            )));
        }
        Ok(ParsingPrediction { classes, num_classes })
    }
}

/// Per-class F1 over pixels. `absent` lists classes that appeared in
/// neither prediction nor ground truth and were scored by convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub absent: Vec<usize>,
}

/// Running confusion counts, so F1 can be computed over one image or
/// accumulated across a dataset.
#[derive(Debug, Clone)]
pub struct ConfusionCounts {
    pub num_classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    seen: Vec<bool>,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            seen: vec![false; num_classes],
        }
    }

    pub fn add(&mut self, pred: &ParsingPrediction, gt: &ParsingPrediction) -> Result<()> {
        if pred.classes.shape() != gt.classes.shape() {
            return Err(PacoError::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.classes.shape(),
                gt.classes.shape()
            )));
        }
        if pred.num_classes != self.num_classes || gt.num_classes != self.num_classes {
            return Err(PacoError::arg("vocabulary size mismatch"));
        }
        for (&p, &g) in pred.classes.iter().zip(gt.classes.iter()) {
            let (p, g) = (p as usize, g as usize);
            self.seen[p] = true;
            self.seen[g] = true;
            if p == g {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    /// F1_c = 2·TP / (2·TP + FP + FN); classes absent on both sides score
    /// 1.0 and are flagged. The mean skips class 0 (background) unless
    /// `include_background`.
    pub fn f1(&self, include_background: bool) -> F1Report {
        let mut per_class = Vec::with_capacity(self.num_classes);
        let mut absent = Vec::new();
        for c in 0..self.num_classes {
            if !self.seen[c] {
                absent.push(c);
                per_class.push(1.0);
                continue;
            }
            let denom = 2 * self.tp[c] + self.fp[c] + self.fn_[c];
            per_class.push(if denom == 0 {
                1.0
            } else {
                2.0 * self.tp[c] as f64 / denom as f64
            });
        }
        let start = usize::from(!include_background);
        let scored = &per_class[start.min(per_class.len())..];
        let mean = if scored.is_empty() {
            f64::NAN
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        };
        F1Report { per_class, mean, absent }
    }
}

/// F1 of a single prediction/ground-truth pair.
pub fn f1_per_class(
    pred: &ParsingPrediction,
    gt: &ParsingPrediction,
    include_background: bool,
) -> Result<F1Report> {
    let mut counts = ConfusionCounts::new(gt.num_classes);
    counts.add(pred, gt)?;
    Ok(counts.f1(include_background))
}

/// Normalizer choice for landmark error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    InterOcular,
    Diag,
    Box,
}

impl std::str::FromStr for NormMode {
    type Err = PacoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter_ocular" => Ok(NormMode::InterOcular),
            "diag" => Ok(NormMode::Diag),
            "box" => Ok(NormMode::Box),
            other => Err(PacoError::arg(format!(
                "unknown normalization '{other}' (inter_ocular, diag, box)"
            ))),
        }
    }
}

/// One sample's predicted and true landmarks plus whichever normalizers
/// the dataset provides.
#[derive(Debug, Clone)]
pub struct LandmarkPrediction {
    pub predicted: Array2<f64>,
    pub ground_truth: Array2<f64>,
    pub inter_ocular: Option<f64>,
    pub diag: Option<f64>,
    pub box_size: Option<f64>,
}

impl LandmarkPrediction {
    pub fn new(predicted: Array2<f64>, ground_truth: Array2<f64>) -> Result<Self> {
        if predicted.shape() != ground_truth.shape() || predicted.shape()[1] != 2 {
            return Err(PacoError::shape(format!(
                "landmarks {:?} vs {:?}",
                predicted.shape(),
                ground_truth.shape()
            )));
        }
        Ok(LandmarkPrediction {
            predicted,
            ground_truth,
            inter_ocular: None,
            diag: None,
            box_size: None,
        })
    }

    /// Fill the normalizers the synthetic convention supports: inter-ocular
    /// from ground-truth eye centers (rows 4 and 5), image diagonal, and the
    /// geometric-mean side of the ground-truth bounding box.
    pub fn with_standard_normalizers(mut self, height: usize, width: usize) -> Self {
        let gt = &self.ground_truth;
        if gt.shape()[0] >= 6 {
            let dx = gt[[4, 0]] - gt[[5, 0]];
            let dy = gt[[4, 1]] - gt[[5, 1]];
            self.inter_ocular = Some((dx * dx + dy * dy).sqrt());
        }
        self.diag = Some(((height * height + width * width) as f64).sqrt());
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in gt.rows() {
            min_x = min_x.min(row[0]);
            max_x = max_x.max(row[0]);
            min_y = min_y.min(row[1]);
            max_y = max_y.max(row[1]);
        }
        self.box_size = Some(((max_x - min_x) * (max_y - min_y)).sqrt());
        self
    }

    fn normalizer(&self, mode: NormMode) -> Result<f64> {
        let value = match mode {
            NormMode::InterOcular => self.inter_ocular,
            NormMode::Diag => self.diag,
            NormMode::Box => self.box_size,
        };
        match value {
            Some(v) if v > 0.0 => Ok(v),
            Some(v) => Err(PacoError::arg(format!(
                "normalizer {v} must be positive"
            ))),
            None => Err(PacoError::arg(format!(
                "normalizer for {mode:?} not provided"
            ))),
        }
    }
}

/// Normalized mean error of one sample as a FRACTION of the normalizer
/// (multiply by 100 for percent).
pub fn nme_fraction(sample: &LandmarkPrediction, mode: NormMode) -> Result<f64> {
    let norm = sample.normalizer(mode)?;
    let l = sample.predicted.shape()[0];
    if l == 0 {
        return Err(PacoError::arg("no landmarks"));
    }
    let mut sum = 0.0;
    for (p, g) in sample
        .predicted
        .rows()
        .into_iter()
        .zip(sample.ground_truth.rows())
    {
        let dx = p[0] - g[0];
        let dy = p[1] - g[1];
        sum += (dx * dx + dy * dy).sqrt();
    }
    Ok(sum / l as f64 / norm)
}

/// Mean NME over samples, in percent.
pub fn nme(samples: &[LandmarkPrediction], mode: NormMode) -> Result<f64> {
    if samples.is_empty() {
        return Err(PacoError::arg("no samples"));
    }
    let mut sum = 0.0;
    for s in samples {
        sum += nme_fraction(s, mode)?;
    }
    Ok(100.0 * sum / samples.len() as f64)
}

/// Area under the cumulative-error-distribution curve up to `threshold`
/// (exact step-function integration, normalized so a perfect model scores
/// 1.0) and the failure rate (fraction of samples above the threshold).
/// Errors and threshold share units.
pub fn auc_fr(per_sample_error: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if per_sample_error.is_empty() {
        return Err(PacoError::arg("no samples"));
    }
    if threshold <= 0.0 {
        return Err(PacoError::arg("threshold must be positive"));
    }
    if per_sample_error.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(PacoError::arg("errors must be finite and non-negative"));
    }
    let mut sorted = per_sample_error.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut area = 0.0;
    let mut prev = 0.0;
    let mut below = 0usize;
    for &e in &sorted {
        if e > threshold {
            break;
        }
        if e > prev {
            area += (e - prev) * below as f64 / n;
            prev = e;
        }
        below += 1;
    }
    area += (threshold - prev).max(0.0) * below as f64 / n;
    let auc = area / threshold;
    let fr = sorted.iter().filter(|&&e| e > threshold).count() as f64 / n;
    Ok((auc, fr))
}

// ---------------------------------------------------------------------------
// Probes: small heads over multi-level encoder features.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Parsing,
    Alignment,
}

impl std::str::FromStr for ProbeTask {
    type Err = PacoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parsing" => Ok(ProbeTask::Parsing),
            "alignment" => Ok(ProbeTask::Alignment),
            other => Err(PacoError::arg(format!(
                "unknown task '{other}' (parsing, alignment)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Frozen,
    Finetune,
}

impl std::str::FromStr for ProbeMode {
    type Err = PacoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(ProbeMode::Frozen),
            "finetune" => Ok(ProbeMode::Finetune),
            other => Err(PacoError::arg(format!(
                "unknown mode '{other}' (frozen, finetune)"
            ))),
        }
    }
}

/// Per-tap linear projections, sum fusion, one nonlinearity, and a task
/// output layer: per-patch pixel logits for parsing, a global coordinate
/// regression for alignment.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub tap_ws: Vec<Array2<f64>>,
    pub fuse_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl ProbeHead {
    pub fn new(
        task: ProbeTask,
        embed_dim: usize,
        num_taps: usize,
        fusion: usize,
        num_patches: usize,
        patch_size: usize,
        num_classes: usize,
        num_landmarks: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        let out_cols = match task {
            ProbeTask::Parsing => patch_size * patch_size * num_classes,
            ProbeTask::Alignment => 2 * num_landmarks,
        };
        let out_rows = match task {
            ProbeTask::Parsing => fusion,
            ProbeTask::Alignment => num_patches * fusion,
        };
        ProbeHead {
            tap_ws: (0..num_taps)
                .map(|_| xavier_uniform(rng, embed_dim, fusion))
                .collect(),
            fuse_b: zeros1(fusion),
            out_w: xavier_uniform(rng, out_rows, out_cols),
            out_b: zeros1(out_cols),
        }
    }

    pub fn fusion_width(&self) -> usize {
        self.fuse_b.len()
    }
}

impl ParamVisit for ProbeHead {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        for (i, w) in self.tap_ws.iter().enumerate() {
            f(&format!("taps.{i}.w"), w.view().into_dyn());
        }
        f("fuse_b", self.fuse_b.view().into_dyn());
        f("out_w", self.out_w.view().into_dyn());
        f("out_b", self.out_b.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        for (i, w) in self.tap_ws.iter_mut().enumerate() {
            f(&format!("taps.{i}.w"), w.view_mut().into_dyn());
        }
        f("fuse_b", self.fuse_b.view_mut().into_dyn());
        f("out_w", self.out_w.view_mut().into_dyn());
        f("out_b", self.out_b.view_mut().into_dyn());
    }
}

/// Fused head activation [K, fusion] from the tap feature nodes. Each tap is
/// row-normalized (parameter-free) before its projection so probe quality is
/// insensitive to the backbone's activation scale.
pub fn head_fuse_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    taps: &[NodeId],
) -> NodeId {
    let mut fused: Option<NodeId> = None;
    for (i, &tap) in taps.iter().enumerate() {
        let width = g.value(tap).shape()[1];
        let ones = g.constant(Array1::<f64>::ones(width).view().into_dyn());
        let zeros = g.constant(Array1::<f64>::zeros(width).view().into_dyn());
        let normed = g.layer_norm_rows(tap, ones, zeros, 1e-6);
        let proj = g.matmul(normed, bound[&format!("taps.{i}.w")]);
        fused = Some(match fused {
            Some(acc) => g.add(acc, proj),
            None => proj,
        });
    }
    let fused = fused.expect("at least one tap");
    let fused = g.add_row_bias(fused, bound["fuse_b"]);
    g.gelu(fused)
}

/// Parsing output: per-pixel logits [K·P², num_classes] in patch-row order.
pub fn parsing_logits_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    taps: &[NodeId],
    num_patches: usize,
    patch_size: usize,
    num_classes: usize,
) -> NodeId {
    let act = head_fuse_graph(g, bound, taps);
    let out = g.matmul(act, bound["out_w"]);
    let out = g.add_row_bias(out, bound["out_b"]);
    g.reshape(out, &[num_patches * patch_size * patch_size, num_classes])
}

/// Alignment output: normalized coordinates [1, 2L].
pub fn alignment_coords_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    taps: &[NodeId],
    num_patches: usize,
    fusion: usize,
) -> NodeId {
    let act = head_fuse_graph(g, bound, taps);
    let flat = g.reshape(act, &[1, num_patches * fusion]);
    let out = g.matmul(flat, bound["out_w"]);
    g.add_row_bias(out, bound["out_b"])
}

/// Ground-truth class per (patch, local pixel) row, matching the parsing
/// logits layout.
pub fn parsing_labels(seg: &Array2<u8>, patch_size: usize) -> Vec<usize> {
    let (h, w) = (seg.shape()[0], seg.shape()[1]);
    let (grid_rows, grid_cols) = (h / patch_size, w / patch_size);
    let mut labels = Vec::with_capacity(h * w);
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    labels.push(seg[[gr * patch_size + py, gc * patch_size + px]] as usize);
                }
            }
        }
    }
    labels
}

/// Per-pixel argmax of patch-row-ordered logits back in image layout.
pub fn parsing_prediction_from_logits(
    logits: &Array2<f64>,
    height: usize,
    width: usize,
    patch_size: usize,
    num_classes: usize,
) -> Result<ParsingPrediction> {
    let (grid_rows, grid_cols) = (height / patch_size, width / patch_size);
    if logits.shape() != [height * width, num_classes] {
        return Err(PacoError::shape(format!(
            "logits {:?} vs [{}, {}]",
            logits.shape(),
            height * width,
            num_classes
        )));
    }
    let mut classes = Array2::<u8>::zeros((height, width));
    let mut row = 0usize;
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let c = crate::codebook::argmax_lowest(
                        logits.row(row).as_slice().expect("contiguous row"),
                    );
                    classes[[gr * patch_size + py, gc * patch_size + px]] = c as u8;
                    row += 1;
                }
            }
        }
    }
    ParsingPrediction::new(classes, num_classes)
}

/// Normalized [x, y] targets flattened to [1, 2L].
fn alignment_targets(landmarks: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let l = landmarks.shape()[0];
    let mut t = Array2::<f64>::zeros((1, 2 * l));
    for i in 0..l {
        t[[0, 2 * i]] = landmarks[[i, 0]] / width as f64;
        t[[0, 2 * i + 1]] = landmarks[[i, 1]] / height as f64;
    }
    t
}

fn coords_from_row(row: &[f64], height: usize, width: usize) -> Array2<f64> {
    let l = row.len() / 2;
    let mut out = Array2::<f64>::zeros((l, 2));
    for i in 0..l {
        out[[i, 0]] = row[2 * i] * width as f64;
        out[[i, 1]] = row[2 * i + 1] * height as f64;
    }
    out
}

/// A labeled image for probe training/evaluation.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub image: ImageTensor,
    pub seg: Option<Array2<u8>>,
    pub landmarks: Option<Array2<f64>>,
}

impl From<SyntheticFaceSample> for ProbeSample {
    fn from(s: SyntheticFaceSample) -> Self {
        ProbeSample {
            image: s.image,
            seg: Some(s.seg),
            landmarks: Some(s.landmarks),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    pub nme_percent: f64,
    pub auc: f64,
    pub fr: f64,
    pub per_sample_nme: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub mode: ProbeMode,
    pub steps: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    pub f1: Option<F1Report>,
    pub alignment: Option<AlignmentMetrics>,
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion_width: usize,
    pub num_classes: usize,
    /// AUC/FR threshold on the NME fraction.
    pub auc_threshold: f64,
    pub norm_mode: NormMode,
    pub include_background: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            steps: 500,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
            fusion_width: 64,
            num_classes: crate::data::NUM_SEG_CLASSES,
            auc_threshold: 0.07,
            norm_mode: NormMode::InterOcular,
            include_background: false,
        }
    }
}

struct ProbeParams<'a> {
    head: &'a mut ProbeHead,
    encoder: Option<&'a mut EncoderParams>,
}

impl ParamVisit for ProbeParams<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.head.visit(&mut |name, v| f(&format!("head.{name}"), v));
        if let Some(enc) = &self.encoder {
            enc.visit(&mut |name, v| f(&format!("encoder.{name}"), v));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.head.visit_mut(&mut |name, v| f(&format!("head.{name}"), v));
        if let Some(enc) = &mut self.encoder {
            enc.visit_mut(&mut |name, v| f(&format!("encoder.{name}"), v));
        }
    }
}

fn tap_features(
    encoder: &EncoderParams,
    config: &RunConfig,
    image: &ImageTensor,
) -> Result<Vec<Array2<f64>>> {
    let patches = patchify(image, config.patch_size)?;
    let embedded = encoder.embed(&patches.patches)?;
    let (_, pyramid) = encoder.encode(&embedded, &config.feature_tap_layers)?;
    Ok(pyramid.features)
}

/// Build the full probe graph for one image. In frozen mode precomputed
/// features arrive as constants; in finetune mode the encoder is part of
/// the graph and receives gradients.
#[allow(clippy::too_many_arguments)]
fn probe_output_graph(
    g: &mut Graph,
    encoder: &EncoderParams,
    enc_bound: Option<&BTreeMap<String, NodeId>>,
    head_bound: &BTreeMap<String, NodeId>,
    config: &RunConfig,
    image: &ImageTensor,
    frozen_features: Option<&[Array2<f64>]>,
    task: ProbeTask,
    fusion: usize,
    num_classes: usize,
) -> Result<NodeId> {
    let k = config.num_patches();
    let tap_nodes: Vec<NodeId> = match frozen_features {
        Some(features) => features.iter().map(|f| g.constant2(f)).collect(),
        None => {
            let bound = enc_bound.expect("encoder bound for finetune");
            let patches = patchify(image, config.patch_size)?;
            let patches_node = g.constant2(&patches.patches);
            let embedded = embed_graph(g, bound, patches_node);
            let (_, block_outs) = encode_graph(g, bound, encoder, embedded);
            config
                .feature_tap_layers
                .iter()
                .map(|&t| {
                    block_outs
                        .get(t.checked_sub(1).ok_or_else(|| {
                            PacoError::arg("tap layers are 1-indexed")
                        })?)
                        .copied()
                        .ok_or_else(|| PacoError::arg(format!("tap layer {t} beyond depth")))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(match task {
        ProbeTask::Parsing => parsing_logits_graph(
            g,
            head_bound,
            &tap_nodes,
            k,
            config.patch_size,
            num_classes,
        ),
        ProbeTask::Alignment => alignment_coords_graph(g, head_bound, &tap_nodes, k, fusion),
    })
}

/// Train a probe head on the train split and evaluate on the test split.
/// Frozen mode leaves the encoder bit-identical; finetune updates it.
pub fn run_probe(
    encoder: &mut EncoderParams,
    config: &RunConfig,
    task: ProbeTask,
    mode: ProbeMode,
    train: &[ProbeSample],
    test: &[ProbeSample],
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(PacoError::Dataset("probe needs train and test samples".into()));
    }
    for (what, set) in [("train", train), ("test", test)] {
        for (i, s) in set.iter().enumerate() {
            match task {
                ProbeTask::Parsing if s.seg.is_none() => {
                    return Err(PacoError::Dataset(format!(
                        "{what} sample {i} lacks segmentation labels"
                    )));
                }
                ProbeTask::Alignment if s.landmarks.is_none() => {
                    return Err(PacoError::Dataset(format!(
                        "{what} sample {i} lacks landmarks"
                    )));
                }
                _ => {}
            }
        }
    }
    let k = config.num_patches();
    let num_landmarks = train[0]
        .landmarks
        .as_ref()
        .map(|l| l.shape()[0])
        .unwrap_or(0);
    let mut head = ProbeHead::new(
        task,
        config.embed_dim,
        config.feature_tap_layers.len(),
        opts.fusion_width,
        k,
        config.patch_size,
        opts.num_classes,
        num_landmarks,
        &mut stream_rng(opts.seed, 7_000),
    );
    let mut optimizer = AdamW::new(0.9, 0.999, 1e-8, 0.0);

    // Frozen features never change, so compute them once per sample.
    let frozen_features: Option<Vec<Vec<Array2<f64>>>> = match mode {
        ProbeMode::Frozen => Some(
            train
                .iter()
                .map(|s| tap_features(encoder, config, &s.image))
                .collect::<Result<Vec<_>>>()?,
        ),
        ProbeMode::Finetune => None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream_rng(opts.seed, 7_001));
    let mut cursor = 0usize;
    let mut final_loss = f64::NAN;
    for _ in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size.max(1) {
            batch.push(order[cursor]);
            cursor = (cursor + 1) % order.len();
        }
        let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for &idx in &batch {
            let sample = &train[idx];
            let mut g = Graph::new();
            let head_bound = bind_params(&mut g, &head, true);
            let enc_bound = match mode {
                ProbeMode::Finetune => Some(bind_params(&mut g, encoder, true)),
                ProbeMode::Frozen => None,
            };
            let out = probe_output_graph(
                &mut g,
                encoder,
                enc_bound.as_ref(),
                &head_bound,
                config,
                &sample.image,
                frozen_features.as_ref().map(|f| f[idx].as_slice()),
                task,
                opts.fusion_width,
                opts.num_classes,
            )?;
            let loss = match task {
                ProbeTask::Parsing => {
                    let labels =
                        parsing_labels(sample.seg.as_ref().expect("checked"), config.patch_size);
                    g.cross_entropy(out, &labels, true)
                }
                ProbeTask::Alignment => {
                    let target = alignment_targets(
                        sample.landmarks.as_ref().expect("checked"),
                        sample.image.height(),
                        sample.image.width(),
                    );
                    g.mse_vs_const(out, target.view().into_dyn())
                }
            };
            loss_sum += g.scalar_value(loss);
            let raw = g.backward(loss);
            for (name, &id) in &head_bound {
                if let Some(grad) = raw.get(id) {
                    let key = format!("head.{name}");
                    match grads.get_mut(&key) {
                        Some(acc) => *acc += grad,
                        None => {
                            grads.insert(key, grad.clone());
                        }
                    }
                }
            }
            if let Some(bound) = &enc_bound {
                for (name, &id) in bound {
                    if let Some(grad) = raw.get(id) {
                        let key = format!("encoder.{name}");
                        match grads.get_mut(&key) {
                            Some(acc) => *acc += grad,
                            None => {
                                grads.insert(key, grad.clone());
                            }
                        }
                    }
                }
            }
        }
        let count = batch.len() as f64;
        for grad in grads.values_mut() {
            grad.mapv_inplace(|v| v / count);
        }
        final_loss = loss_sum / count;
        if !final_loss.is_finite() {
            return Err(PacoError::NonFiniteLoss {
                step: optimizer.step_count as usize,
                detail: format!("probe loss {final_loss}"),
            });
        }
        let mut params = ProbeParams {
            head: &mut head,
            encoder: match mode {
                ProbeMode::Finetune => Some(encoder),
                ProbeMode::Frozen => None,
            },
        };
        optimizer.step(&mut params, &grads, opts.lr);
    }

    // Evaluation on the test split.
    let mut report = ProbeReport {
        task,
        mode,
        steps: opts.steps,
        seed: opts.seed,
        final_train_loss: final_loss,
        f1: None,
        alignment: None,
    };
    match task {
        ProbeTask::Parsing => {
            let mut counts = ConfusionCounts::new(opts.num_classes);
            for sample in test {
                let logits = probe_eval_output(encoder, config, &head, task, opts, sample)?;
                let pred = parsing_prediction_from_logits(
                    &logits,
                    sample.image.height(),
                    sample.image.width(),
                    config.patch_size,
                    opts.num_classes,
                )?;
                let gt = ParsingPrediction::new(
                    sample.seg.clone().expect("checked"),
                    opts.num_classes,
                )?;
                counts.add(&pred, &gt)?;
            }
            report.f1 = Some(counts.f1(opts.include_background));
        }
        ProbeTask::Alignment => {
            let mut predictions = Vec::with_capacity(test.len());
            for sample in test {
                let coords = probe_eval_output(encoder, config, &head, task, opts, sample)?;
                let row: Vec<f64> = coords.row(0).iter().copied().collect();
                let predicted =
                    coords_from_row(&row, sample.image.height(), sample.image.width());
                let pred = LandmarkPrediction::new(
                    predicted,
                    sample.landmarks.clone().expect("checked"),
                )?
                .with_standard_normalizers(sample.image.height(), sample.image.width());
                predictions.push(pred);
            }
            let per_sample: Vec<f64> = predictions
                .iter()
                .map(|p| nme_fraction(p, opts.norm_mode))
                .collect::<Result<Vec<_>>>()?;
            let (auc, fr) = auc_fr(&per_sample, opts.auc_threshold)?;
            report.alignment = Some(AlignmentMetrics {
                nme_percent: nme(&predictions, opts.norm_mode)?,
                auc,
                fr,
                per_sample_nme: per_sample,
            });
        }
    }
    Ok(report)
}

/// Head output for one sample with everything frozen (evaluation path).
fn probe_eval_output(
    encoder: &EncoderParams,
    config: &RunConfig,
    head: &ProbeHead,
    task: ProbeTask,
    opts: &ProbeOptions,
    sample: &ProbeSample,
) -> Result<Array2<f64>> {
    let features = tap_features(encoder, config, &sample.image)?;
    let mut g = Graph::new();
    let head_bound = bind_params(&mut g, head, false);
    let out = probe_output_graph(
        &mut g,
        encoder,
        None,
        &head_bound,
        config,
        &sample.image,
        Some(features.as_slice()),
        task,
        opts.fusion_width,
        opts.num_classes,
    )?;
    let value = g.value(out);
    Ok(value
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 output")
        .to_owned())
}
