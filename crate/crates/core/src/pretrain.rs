//! Two-phase pre-training orchestration.
//!
//! Epoch 0 is the incubation epoch: token-choice labels are computed with
//! the model frozen, the belief predictor is supervised against them with
//! cross-entropy, and the reconstruction losses keep training the rest of
//! the pipeline in the same optimizer step. Every later epoch is the main
//! phase, where the (now frozen) predictor picks substitution tokens and
//! only encoder, decoder, and codebook receive updates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::codebook::{
    incubation_corrupt, incubation_labels, predict_beliefs, BeliefPredictor, PatchCodebook,
    TokenSelection,
};
use crate::config::{Phase, RunConfig};
use crate::error::{PacoError, Result};
use crate::graph::{Graph, NodeId};
use crate::losses::{per_patch_normalize, perceptual_graph, LossReport};
use crate::mask::{sample_mask, MaskSet};
use crate::model::{
    bind_params, decode_graph, embed_graph, encode_graph, rows_to_chw_perm, DecoderParams,
    EncoderParams, PerceptualBackbone,
};
use crate::optim::{lr_at, AdamW};
use crate::params::{params_checksum, ParamVisit};
use crate::patch::{patchify, ImageTensor, PatchGrid};
use crate::rng::{stream_rng, Rng, RngState};

/// RNG stream indices, kept disjoint so every consumer is independent.
const INIT_STREAM_CODEBOOK: u64 = 1;
const INIT_STREAM_PREDICTOR: u64 = 2;
const INIT_STREAM_ENCODER: u64 = 3;
const INIT_STREAM_DECODER: u64 = 4;
const INIT_STREAM_BACKBONE: u64 = 5;
const SHUFFLE_STREAM_BASE: u64 = 1_000_000;
const OP_STREAM_BASE: u64 = 2_000_000;

/// How substitution tokens are chosen for masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// The belief predictor's argmax (the full method).
    Belief,
    /// Uniform random token index; the predictor is bypassed.
    Random,
    /// One candidate per position; selection is trivial.
    SingleToken,
}

impl std::str::FromStr for SelectionMode {
    type Err = PacoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "belief" => Ok(SelectionMode::Belief),
            "random" => Ok(SelectionMode::Random),
            "single_token" => Ok(SelectionMode::SingleToken),
            other => Err(PacoError::arg(format!(
                "unknown selection mode '{other}' (belief, random, single_token)"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SelectionMode::Belief => "belief",
            SelectionMode::Random => "random",
            SelectionMode::SingleToken => "single_token",
        };
        f.write_str(s)
    }
}

/// Ablation switches mirroring the comparison arms of the method study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub selection_mode: SelectionMode,
    /// Candidates per position; 0 keeps the configured count.
    pub n_override: usize,
    /// When false the incubation epoch is skipped and the predictor is
    /// supervised inside main steps instead.
    pub incubation_enabled: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            selection_mode: SelectionMode::Belief,
            n_override: 0,
            incubation_enabled: true,
        }
    }
}

impl AblationSpec {
    /// Effective candidates per position (single_token forces 1).
    pub fn candidates(&self, config: &RunConfig) -> usize {
        if self.selection_mode == SelectionMode::SingleToken {
            return 1;
        }
        if self.n_override > 0 {
            self.n_override
        } else {
            config.tokens_per_position
        }
    }

    /// Whether epoch 0 runs as a dedicated incubation epoch.
    pub fn incubation_active(&self, config: &RunConfig) -> bool {
        self.incubation_enabled && config.incubation_enabled
    }
}

/// Everything the training loop mutates, plus the frozen components.
#[derive(Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub ablation: AblationSpec,
    pub codebook: PatchCodebook,
    pub predictor: BeliefPredictor,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub backbone: PerceptualBackbone,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub phase: Phase,
    pub global_step: u64,
}

/// Borrow-split view over the five parameter-bearing components, used for
/// optimizer updates while the rest of the state stays accessible.
struct Components<'a> {
    encoder: &'a mut EncoderParams,
    decoder: &'a mut DecoderParams,
    codebook: &'a mut PatchCodebook,
    predictor: &'a mut BeliefPredictor,
    backbone: &'a mut PerceptualBackbone,
}

fn visit_prefixed(
    component: &dyn ParamVisit,
    prefix: &str,
    f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>),
) {
    component.visit(&mut |name, v| f(&format!("{prefix}.{name}"), v));
}

fn visit_prefixed_mut(
    component: &mut dyn ParamVisit,
    prefix: &str,
    f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>),
) {
    component.visit_mut(&mut |name, v| f(&format!("{prefix}.{name}"), v));
}

impl ParamVisit for Components<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        visit_prefixed(self.encoder, "encoder", f);
        visit_prefixed(self.decoder, "decoder", f);
        visit_prefixed(self.codebook, "codebook", f);
        visit_prefixed(self.predictor, "predictor", f);
        visit_prefixed(self.backbone, "backbone", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        visit_prefixed_mut(self.encoder, "encoder", f);
        visit_prefixed_mut(self.decoder, "decoder", f);
        visit_prefixed_mut(self.codebook, "codebook", f);
        visit_prefixed_mut(self.predictor, "predictor", f);
        visit_prefixed_mut(self.backbone, "backbone", f);
    }
}

impl ParamVisit for TrainState {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        visit_prefixed(&self.encoder, "encoder", f);
        visit_prefixed(&self.decoder, "decoder", f);
        visit_prefixed(&self.codebook, "codebook", f);
        visit_prefixed(&self.predictor, "predictor", f);
        visit_prefixed(&self.backbone, "backbone", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        visit_prefixed_mut(&mut self.encoder, "encoder", f);
        visit_prefixed_mut(&mut self.decoder, "decoder", f);
        visit_prefixed_mut(&mut self.codebook, "codebook", f);
        visit_prefixed_mut(&mut self.predictor, "predictor", f);
        visit_prefixed_mut(&mut self.backbone, "backbone", f);
    }
}

impl TrainState {
    pub fn new(config: &RunConfig, ablation: &AblationSpec) -> Result<Self> {
        config.validate()?;
        let n = ablation.candidates(config);
        let hidden = if config.predictor_hidden > 0 {
            config.predictor_hidden
        } else {
            4 * n * 8
        };
        let k = config.num_patches();
        let plen = config.patch_len();
        let seed = config.seed;
        let codebook = PatchCodebook::new(
            k,
            n,
            config.embed_dim,
            &mut stream_rng(seed, INIT_STREAM_CODEBOOK),
        );
        let predictor = BeliefPredictor::new(
            plen,
            k,
            n,
            hidden,
            &mut stream_rng(seed, INIT_STREAM_PREDICTOR),
        );
        let encoder = EncoderParams::new(
            plen,
            k,
            config.embed_dim,
            config.encoder_depth,
            config.encoder_heads,
            &mut stream_rng(seed, INIT_STREAM_ENCODER),
        );
        let decoder = DecoderParams::new(
            config.embed_dim,
            plen,
            config.decoder_depth,
            config.encoder_heads,
            &mut stream_rng(seed, INIT_STREAM_DECODER),
        );
        let backbone = PerceptualBackbone::new(
            config.channels,
            &config.backbone_channels,
            config.backbone_kernel,
            config.backbone_stride,
            &mut stream_rng(seed, INIT_STREAM_BACKBONE),
        );
        let phase = if ablation.incubation_active(config) {
            Phase::Incubation
        } else {
            Phase::Main
        };
        Ok(TrainState {
            optimizer: AdamW::new(config.beta1, config.beta2, config.adam_eps, config.weight_decay),
            config: config.clone(),
            ablation: ablation.clone(),
            codebook,
            predictor,
            encoder,
            decoder,
            backbone,
            epoch: 0,
            phase,
            global_step: 0,
        })
    }

    pub fn candidates(&self) -> usize {
        self.codebook.candidates()
    }

    /// One optimizer step over whatever has gradients; frozen components
    /// are untouched because their names never appear in `grads`.
    pub fn apply_update(&mut self, grads: &BTreeMap<String, ArrayD<f64>>, lr: f64) {
        let TrainState {
            encoder,
            decoder,
            codebook,
            predictor,
            backbone,
            optimizer,
            ..
        } = self;
        let mut components = Components {
            encoder,
            decoder,
            codebook,
            predictor,
            backbone,
        };
        optimizer.step(&mut components, grads, lr);
    }

    pub fn collect_arrays(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut arrays = BTreeMap::new();
        self.visit(&mut |name, v| {
            arrays.insert(format!("model.{name}"), v.to_owned());
        });
        for (name, m) in &self.optimizer.m {
            arrays.insert(format!("optim.m.{name}"), m.clone());
        }
        for (name, v) in &self.optimizer.v {
            arrays.insert(format!("optim.v.{name}"), v.clone());
        }
        arrays
    }

    pub fn restore_arrays(&mut self, arrays: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
        let mut problems = Vec::new();
        self.visit_mut(&mut |name, mut p| {
            match arrays.get(&format!("model.{name}")) {
                Some(a) if a.shape() == p.shape() => p.assign(a),
                Some(_) => problems.push(format!("{name} (shape mismatch)")),
                None => problems.push(format!("{name} (missing)")),
            }
        });
        if !problems.is_empty() {
            return Err(PacoError::Checkpoint(format!(
                "cannot restore parameters: {}",
                problems.join(", ")
            )));
        }
        self.optimizer.m.clear();
        self.optimizer.v.clear();
        for (key, value) in arrays {
            if let Some(name) = key.strip_prefix("optim.m.") {
                self.optimizer.m.insert(name.to_string(), value.clone());
            } else if let Some(name) = key.strip_prefix("optim.v.") {
                self.optimizer.v.insert(name.to_string(), value.clone());
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, rng: RngState) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.to_flat_string(),
            epoch: self.epoch,
            phase: self.phase,
            global_step: self.global_step,
            rng,
            ablation: serde_json::to_value(&self.ablation)?,
        };
        save_checkpoint(path, &meta, &self.collect_arrays())
    }

    /// Rebuild a state from a checkpoint, verifying it matches the supplied
    /// configuration and ablation.
    pub fn load(path: &Path, config: &RunConfig, ablation: &AblationSpec) -> Result<Self> {
        let (header, arrays) = load_checkpoint(path)?;
        if header.config != config.to_flat_string() {
            return Err(PacoError::Checkpoint(
                "checkpoint was written under a different configuration".into(),
            ));
        }
        let stored: AblationSpec = serde_json::from_value(header.ablation.clone())
            .map_err(|e| PacoError::Checkpoint(format!("bad ablation record: {e}")))?;
        if stored != *ablation {
            return Err(PacoError::Checkpoint(
                "checkpoint was written under a different ablation".into(),
            ));
        }
        let mut state = TrainState::new(config, ablation)?;
        state.restore_arrays(&arrays)?;
        state.epoch = header.epoch;
        state.phase = header.phase;
        state.global_step = header.global_step;
        state.optimizer.step_count = header.global_step;
        Ok(state)
    }
}

/// Token selection for one image according to the ablation mode.
pub fn select_tokens(
    state: &TrainState,
    patches: &PatchGrid,
    mask: &MaskSet,
    rng: &mut Rng,
) -> Result<TokenSelection> {
    let n = state.candidates();
    match state.ablation.selection_mode {
        SelectionMode::Belief => predict_beliefs(&state.predictor, patches, mask),
        SelectionMode::Random => {
            let alphas = (0..mask.len()).map(|_| rng.gen_range(0..n)).collect();
            Ok(flat_selection(mask, alphas, n))
        }
        SelectionMode::SingleToken => Ok(flat_selection(mask, vec![0; mask.len()], 1)),
    }
}

/// Selection with uninformative logits (used by random/single-token modes
/// and for carrying oracle labels).
fn flat_selection(mask: &MaskSet, alphas: Vec<usize>, n: usize) -> TokenSelection {
    let m = mask.len();
    TokenSelection {
        positions: mask.positions.clone(),
        alphas,
        logits: Array2::zeros((m, n)),
        probs: Array2::from_elem((m, n), 1.0 / n as f64),
    }
}

/// Replace assigned rows of the embedded patches with codebook tokens
/// (plain-value path used for label computation).
fn substitute_assign(
    embedded: &Array2<f64>,
    codebook: &PatchCodebook,
    assign: &[Option<usize>],
) -> Result<Array2<f64>> {
    let k = embedded.shape()[0];
    if assign.len() != k || codebook.num_positions() != k {
        return Err(PacoError::shape("assignment length vs patch count"));
    }
    let mut out = embedded.clone();
    for (pos, a) in assign.iter().enumerate() {
        if let Some(j) = a {
            for (c, v) in out.row_mut(pos).iter_mut().enumerate() {
                *v = codebook.tokens[[pos, *j, c]];
            }
        }
    }
    Ok(out)
}

/// Full no-gradient forward for a fixed token assignment.
fn reconstruct_rows(
    state: &TrainState,
    patches: &PatchGrid,
    assign: &[Option<usize>],
) -> Result<Array2<f64>> {
    let embedded = state.encoder.embed(&patches.patches)?;
    let substituted = substitute_assign(&embedded, &state.codebook, assign)?;
    let (encoded, _) = state.encoder.encode(&substituted, &[])?;
    state.decoder.decode_rows(&encoded)
}

/// Token-choice labels for the masked positions, computed with the model
/// frozen: the best token is the one whose all-masked reconstruction is
/// closest (cosine) to the original patch.
pub fn oracle_labels(
    state: &TrainState,
    patches: &PatchGrid,
    mask: &MaskSet,
) -> Result<Vec<usize>> {
    incubation_labels(patches, mask, state.candidates(), |assign| {
        reconstruct_rows(state, patches, assign)
    })
}

/// Belief-predictor forward inside the graph, returning the logits node
/// [|positions|, n]. Mirrors `BeliefPredictor::logits_at` exactly.
pub fn predictor_logits_graph(
    g: &mut Graph,
    bound: &BTreeMap<String, NodeId>,
    patches: &PatchGrid,
    positions: &[usize],
) -> NodeId {
    let m = positions.len();
    let plen = patches.patch_len();
    let mut x = Array2::<f64>::zeros((m, plen));
    for (r, &pos) in positions.iter().enumerate() {
        x.row_mut(r).assign(&patches.patches.row(pos));
    }
    let xn = g.constant2(&x);
    let h = g.matmul(xn, bound["w1"]);
    let h = g.add_row_bias(h, bound["b1"]);
    let pe = g.gather_rows(bound["pos_embed"], positions);
    let h = g.add(h, pe);
    let h = g.gelu(h);
    let logits = g.matmul(h, bound["w2"]);
    g.add_row_bias(logits, bound["b2"])
}

/// Per-image losses and gradients from one backward pass.
struct ImageOutcome {
    grads: BTreeMap<String, ArrayD<f64>>,
    report: LossReport,
}

/// Which parts of the pipeline receive gradients this step.
struct StepPlan<'a> {
    /// Substitution choice for the reconstruction branch.
    selection: &'a TokenSelection,
    /// Predictor supervision targets (None = predictor stays out of the
    /// graph entirely).
    ce_labels: Option<&'a [usize]>,
    /// Train only the predictor; reconstruction losses are reported but
    /// carry no gradient.
    ce_only: bool,
}

fn gather_present(
    g: &Graph,
    grads: &crate::graph::Gradients,
    bound: &BTreeMap<String, NodeId>,
    prefix: &str,
    out: &mut BTreeMap<String, ArrayD<f64>>,
) {
    let _ = g;
    for (name, &id) in bound {
        if let Some(grad) = grads.get(id) {
            let key = format!("{prefix}.{name}");
            match out.get_mut(&key) {
                Some(acc) => *acc += grad,
                None => {
                    out.insert(key, grad.clone());
                }
            }
        }
    }
}

/// Build the masked-reconstruction graph for one image, run backward, and
/// collect gradients plus the loss report.
fn image_step(state: &TrainState, image: &ImageTensor, plan: &StepPlan<'_>) -> Result<ImageOutcome> {
    let cfg = &state.config;
    let patches = patchify(image, cfg.patch_size)?;
    let k = patches.num_patches();
    let mut g = Graph::new();

    let enc_bound = bind_params(&mut g, &state.encoder, true);
    let dec_bound = bind_params(&mut g, &state.decoder, true);
    let cb_bound = bind_params(&mut g, &state.codebook, true);

    let patches_node = g.constant2(&patches.patches);
    let embedded = embed_graph(&mut g, &enc_bound, patches_node);
    let assign = plan.selection.assignment(k);
    let substituted = g.substitute_rows(embedded, cb_bound["tokens"], &assign);
    let (encoded, _) = encode_graph(&mut g, &enc_bound, &state.encoder, substituted);
    let rows = decode_graph(&mut g, &dec_bound, &state.decoder, encoded);

    let target = if cfg.per_patch_norm_targets {
        per_patch_normalize(&patches.patches)
    } else {
        patches.patches.clone()
    };
    let mse = g.mse_vs_const(rows, target.view().into_dyn());

    let perm = rows_to_chw_perm(patches.grid_rows, patches.grid_cols, cfg.patch_size, cfg.channels);
    let chw = g.permute(
        rows,
        &perm,
        &[cfg.channels, image.height(), image.width()],
    );
    let perceptual = perceptual_graph(
        &mut g,
        &state.backbone,
        chw,
        image,
        &cfg.perceptual_layer_indices,
    )?;

    let mut pred_bound = None;
    let ce = plan.ce_labels.map(|labels| {
        let bound = bind_params(&mut g, &state.predictor, true);
        let logits = predictor_logits_graph(&mut g, &bound, &patches, &plan.selection.positions);
        let node = g.cross_entropy(logits, labels, !cfg.ce_sum_reduction);
        pred_bound = Some(bound);
        node
    });

    let mut parts: Vec<(NodeId, f64)> = Vec::new();
    if !plan.ce_only {
        parts.push((mse, 1.0));
        parts.push((perceptual, cfg.loss_weight_perceptual));
    }
    if let Some(ce_node) = ce {
        parts.push((ce_node, 1.0));
    }
    if parts.is_empty() {
        return Err(PacoError::arg("step has no loss terms"));
    }
    let total = g.combine(&parts);

    let grads = g.backward(total);
    let mut out = BTreeMap::new();
    gather_present(&g, &grads, &enc_bound, "encoder", &mut out);
    gather_present(&g, &grads, &dec_bound, "decoder", &mut out);
    gather_present(&g, &grads, &cb_bound, "codebook", &mut out);
    if let Some(bound) = &pred_bound {
        gather_present(&g, &grads, bound, "predictor", &mut out);
    }

    let report = LossReport {
        mse: g.scalar_value(mse),
        perceptual: g.scalar_value(perceptual),
        belief_ce: ce.map(|n| g.scalar_value(n)).unwrap_or(0.0),
        total: g.scalar_value(total),
    };
    Ok(ImageOutcome { grads: out, report })
}

fn merge_outcomes(outcomes: Vec<ImageOutcome>) -> (LossReport, BTreeMap<String, ArrayD<f64>>) {
    let count = outcomes.len() as f64;
    let mut grads: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut mse = 0.0;
    let mut perceptual = 0.0;
    let mut total = 0.0;
    let mut ce_sum = 0.0;
    for outcome in outcomes {
        mse += outcome.report.mse;
        perceptual += outcome.report.perceptual;
        total += outcome.report.total;
        ce_sum += outcome.report.belief_ce;
        for (name, grad) in outcome.grads {
            match grads.get_mut(&name) {
                Some(acc) => *acc += &grad,
                None => {
                    grads.insert(name, grad);
                }
            }
        }
    }
    for grad in grads.values_mut() {
        grad.mapv_inplace(|v| v / count);
    }
    let report = LossReport {
        mse: mse / count,
        perceptual: perceptual / count,
        belief_ce: ce_sum / count,
        total: total / count,
    };
    (report, grads)
}

fn check_batch(state: &TrainState, batch: &[ImageTensor]) -> Result<()> {
    if batch.is_empty() {
        return Err(PacoError::arg("empty batch"));
    }
    let cfg = &state.config;
    for image in batch {
        if image.height() != cfg.image_size
            || image.width() != cfg.image_size
            || image.channels() != cfg.channels
        {
            return Err(PacoError::shape(format!(
                "image {}x{}x{} does not match configured {}x{}x{}",
                image.height(),
                image.width(),
                image.channels(),
                cfg.image_size,
                cfg.image_size,
                cfg.channels
            )));
        }
    }
    Ok(())
}

fn ensure_finite(state: &TrainState, report: &LossReport) -> Result<()> {
    if report.is_finite() {
        return Ok(());
    }
    Err(PacoError::NonFiniteLoss {
        step: state.global_step as usize,
        detail: format!(
            "mse={} perceptual={} belief_ce={:?} total={} params={}",
            report.mse,
            report.perceptual,
            report.belief_ce,
            report.total,
            params_checksum(state)
        ),
    })
}

/// Gradients for one main-phase batch without applying the update. The
/// predictor stays frozen unless the incubation stage is disabled, in which
/// case it receives its cross-entropy supervision here.
pub fn main_step_grads(
    state: &TrainState,
    batch: &[ImageTensor],
    rng: &mut Rng,
) -> Result<(LossReport, BTreeMap<String, ArrayD<f64>>)> {
    if state.phase != Phase::Main {
        return Err(PacoError::arg("main step requires the main phase"));
    }
    check_batch(state, batch)?;
    let cfg = &state.config;
    let k = cfg.num_patches();
    let supervise_predictor = !state.ablation.incubation_active(cfg)
        && state.ablation.selection_mode == SelectionMode::Belief
        && state.candidates() > 1;
    let mut outcomes = Vec::with_capacity(batch.len());
    for image in batch {
        let patches = patchify(image, cfg.patch_size)?;
        let mask = sample_mask(k, cfg.mask_ratio, rng)?;
        let selection = select_tokens(state, &patches, &mask, rng)?;
        let labels = if supervise_predictor {
            Some(oracle_labels(state, &patches, &mask)?)
        } else {
            None
        };
        let plan = StepPlan {
            selection: &selection,
            ce_labels: labels.as_deref(),
            ce_only: false,
        };
        outcomes.push(image_step(state, image, &plan)?);
    }
    Ok(merge_outcomes(outcomes))
}

/// One main-phase optimizer step: reconstruction losses drive encoder,
/// decoder, and codebook; the predictor and backbone stay frozen.
pub fn train_step_main(
    state: &mut TrainState,
    batch: &[ImageTensor],
    lr: f64,
    rng: &mut Rng,
) -> Result<LossReport> {
    let (report, grads) = main_step_grads(state, batch, rng)?;
    ensure_finite(state, &report)?;
    state.apply_update(&grads, lr);
    state.global_step += 1;
    Ok(report)
}

/// One incubation-phase optimizer step: oracle labels are computed with the
/// model frozen, the substitution choice is the corrupted oracle, the
/// predictor trains against the labels, and (unless `incubation_ce_only`)
/// the reconstruction losses keep training the rest jointly.
pub fn train_step_incubation(
    state: &mut TrainState,
    batch: &[ImageTensor],
    lr: f64,
    rng: &mut Rng,
) -> Result<LossReport> {
    if state.phase != Phase::Incubation {
        return Err(PacoError::arg("incubation step requires the incubation phase"));
    }
    check_batch(state, batch)?;
    let cfg = state.config.clone();
    let k = cfg.num_patches();
    let n = state.candidates();
    let mut outcomes = Vec::with_capacity(batch.len());
    for image in batch {
        let patches = patchify(image, cfg.patch_size)?;
        let mask = sample_mask(k, cfg.mask_ratio, rng)?;
        let labels = oracle_labels(state, &patches, &mask)?;
        let oracle = flat_selection(&mask, labels.clone(), n);
        let corrupted = incubation_corrupt(&oracle, cfg.incubation_random_fraction, n, rng)?;
        let plan = StepPlan {
            selection: &corrupted,
            ce_labels: Some(&labels),
            ce_only: cfg.incubation_ce_only,
        };
        outcomes.push(image_step(state, image, &plan)?);
    }
    let (report, grads) = merge_outcomes(outcomes);
    ensure_finite(state, &report)?;
    state.apply_update(&grads, lr);
    state.global_step += 1;
    Ok(report)
}

/// One row of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub mse: f64,
    pub perceptual: f64,
    pub belief_ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_mse: f64,
    pub mean_total: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepRecord>,
    pub params_checksum: String,
}

fn csv_row(record: &StepRecord) -> String {
    format!(
        "{},{},{},{},{},{}\n",
        record.step, record.phase, record.mse, record.perceptual, record.belief_ce, record.total
    )
}

/// The full two-phase loop: incubation epoch (when enabled), then main
/// epochs with linear warmup over the first of them and cosine decay after.
/// Writes per-epoch checkpoints, a CSV loss log, and a JSON summary into
/// `out_dir`; returns the curve for inspection.
pub fn run_pretraining(
    config: &RunConfig,
    ablation: &AblationSpec,
    images: &[ImageTensor],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary> {
    config.validate()?;
    if images.is_empty() {
        return Err(PacoError::Dataset("pre-training dataset is empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(path) => TrainState::load(path, config, ablation)?,
        None => TrainState::new(config, ablation)?,
    };
    check_batch(&state, images)?;

    let batch_size = config.batch_size.max(1);
    let steps_per_epoch = images.len().div_ceil(batch_size) as u64;
    let incubating = ablation.incubation_active(config);
    let first_main = usize::from(incubating);
    let main_epochs = config.epochs.saturating_sub(first_main) as u64;
    let warmup_steps = (config.warmup_epochs as u64 * steps_per_epoch).min(main_epochs * steps_per_epoch);
    let total_main_steps = main_epochs * steps_per_epoch;

    let mut csv = String::from("step,phase,mse,perceptual,belief_ce,total\n");
    let mut steps_log: Vec<StepRecord> = Vec::new();
    let mut epoch_stats: Vec<EpochStats> = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        state.phase = if incubating && epoch == 0 {
            Phase::Incubation
        } else {
            Phase::Main
        };
        let phase = state.phase;

        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, SHUFFLE_STREAM_BASE + epoch as u64));
        let mut op_rng = stream_rng(config.seed, OP_STREAM_BASE + epoch as u64);

        let mut sum_mse = 0.0;
        let mut sum_total = 0.0;
        let mut batches = 0u64;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<ImageTensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let lr = if phase == Phase::Incubation {
                config.base_lr * (batches + 1) as f64 / steps_per_epoch as f64
            } else {
                let main_step = (epoch - first_main) as u64 * steps_per_epoch + batches;
                lr_at(
                    config.base_lr,
                    config.min_lr,
                    main_step,
                    warmup_steps,
                    total_main_steps,
                )
            };
            let result = match phase {
                Phase::Incubation => train_step_incubation(&mut state, &batch, lr, &mut op_rng),
                Phase::Main => train_step_main(&mut state, &batch, lr, &mut op_rng),
            };
            let report = match result {
                Ok(report) => report,
                Err(err) => {
                    if let PacoError::NonFiniteLoss { step, detail } = &err {
                        let dump = serde_json::json!({
                            "step": step,
                            "epoch": state.epoch,
                            "phase": state.phase,
                            "detail": detail,
                        });
                        let _ = fs::write(
                            out_dir.join("nonfinite_dump.json"),
                            serde_json::to_string_pretty(&dump).unwrap_or_default(),
                        );
                    }
                    return Err(err);
                }
            };
            let record = StepRecord {
                step: state.global_step,
                epoch,
                phase,
                mse: report.mse,
                perceptual: report.perceptual,
                belief_ce: report.belief_ce,
                total: report.total,
            };
            csv.push_str(&csv_row(&record));
            sum_mse += report.mse;
            sum_total += report.total;
            steps_log.push(record);
            batches += 1;
        }

        state.epoch += 1;
        state.phase = Phase::Main;
        let name = format!("checkpoint_epoch_{:03}.ckpt", state.epoch);
        let path = out_dir.join(&name);
        state.save(&path, RngState::capture(&op_rng))?;
        last_checkpoint = Some(path);
        epoch_stats.push(EpochStats {
            epoch,
            phase,
            mean_mse: sum_mse / batches as f64,
            mean_total: sum_total / batches as f64,
            checkpoint: name,
        });
    }

    let final_path = out_dir.join("checkpoint_final.ckpt");
    match &last_checkpoint {
        Some(path) => {
            fs::copy(path, &final_path)?;
        }
        None => {
            // Resumed past the end: nothing ran, still leave a final artifact.
            let rng = stream_rng(config.seed, OP_STREAM_BASE + state.epoch as u64);
            state.save(&final_path, RngState::capture(&rng))?;
        }
    }
    fs::write(out_dir.join("train_log.csv"), &csv)?;
    let summary = RunSummary {
        final_checkpoint: final_path,
        epochs: epoch_stats,
        steps: steps_log,
        params_checksum: params_checksum(&state),
    };
    fs::write(
        out_dir.join("run_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}
