//! Image-domain (SimSiam-style) backbone pre-training, the box-domain step
//! with its momentum branch, checkpoints, and the fine-tune loading rule.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{
    assign_center, assign_hungarian, assign_iou, default_scale_ranges, kmeans, sample_predictions, AssignError,
    AssignmentResult, ClassCost, GridPoint, IouAssignConfig, KMeansResult, MatchWeights,
};
use crate::augment::{augment_view, sample_transform, AugConfig};
use crate::data::UnlabeledImage;
use crate::geometry::{BBox, Label};
use crate::image::Image;
use crate::losses::{
    contrastive_loss, negative_cosine, regression_loss, softmax, softmax_cross_entropy, EmbeddingSet, LossConfig,
    LossError, RegKind, RegTerm,
};
use crate::metrics::StepMetrics;
use crate::netcore::checkpoint::{decode_arrays, encode_arrays};
use crate::netcore::net::{
    backbone, con_features, decode_predictions, forward, linear, project, reg_head, Pyramid, Reference,
    BACKBONE_PREFIX, HEAD_PREFIX, NECK_PREFIX, PROJ_PREFIX, PSEUDO_CLS_HEAD, TOTAL_STRIDE,
};
use crate::netcore::{he_uniform, sgd_step, DetectorNet, Flavor, Graph, NetConfig, NetError, ParamSet, Tensor, Var};
use crate::proposals::ProposalSet;
use crate::stream_rng;

const STREAM_INIT: u64 = 10;
const STREAM_EPOCH: u64 = 11;
const STREAM_STEP: u64 = 12;
const STREAM_IMAGE_EPOCH: u64 = 13;
const STREAM_IMAGE_STEP: u64 = 14;
const STREAM_KMEANS: u64 = 15;
const STREAM_HEAD_INIT: u64 = 16;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("checkpoint is missing arrays: {}", .0.join(", "))]
    MissingArrays(Vec<String>),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint state: {0}")]
    State(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PretrainError + '_ {
    move |source| PretrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub m: f64,
    /// Also average the projection `proj.*`.
    pub include_projection: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { m: 0.999, include_projection: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignConfig {
    pub iou: IouAssignConfig,
    /// Max-side split between the two pyramid levels for center assignment.
    pub scale_split: f64,
    pub match_weights: MatchWeights,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { iou: IouAssignConfig::default(), scale_split: 24.0, match_weights: MatchWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema: EmaConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub assign: AssignConfig,
    pub net: NetConfig,
    pub sample_cap_dense: usize,
    pub sample_cap_query: usize,
    /// Weight of the pseudo-class cross-entropy (query flavor).
    pub pseudo_cls_weight: f64,
    /// Class weight of the no-object pseudo class.
    pub no_object_weight: f64,
    pub kmeans_iters: usize,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

/// Regression terms each flavor uses by default.
pub fn default_reg_terms(flavor: Flavor) -> Vec<RegTerm> {
    match flavor {
        Flavor::Anchor => vec![RegTerm { kind: RegKind::L1Deltas, weight: 1.0 }],
        Flavor::Point => vec![RegTerm { kind: RegKind::Iou, weight: 1.0 }],
        Flavor::Query => vec![RegTerm { kind: RegKind::L1Deltas, weight: 1.0 }, RegTerm { kind: RegKind::Iou, weight: 1.0 }],
    }
}

impl TrainConfig {
    pub fn new(flavor: Flavor) -> Self {
        Self {
            seed: 0,
            epochs: if flavor == Flavor::Query { 24 } else { 12 },
            batch_size: 4,
            lr: 0.02,
            weight_decay: 1e-4,
            ema: EmaConfig::default(),
            loss: LossConfig {
                reg_terms: default_reg_terms(flavor),
                // One-to-one matching leaves no second online row per proposal.
                positives_from_momentum: flavor == Flavor::Query,
                ..LossConfig::default()
            },
            aug: AugConfig::default(),
            assign: AssignConfig::default(),
            net: NetConfig::new(flavor),
            sample_cap_dense: 256,
            sample_cap_query: 64,
            pseudo_cls_weight: 1.0,
            no_object_weight: 0.1,
            kmeans_iters: 50,
            checkpoint_every: 0,
        }
    }

    pub fn flavor(&self) -> Flavor {
        self.net.flavor
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and weight decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.ema.m) {
            return bad("EMA momentum must lie in [0, 1)");
        }
        if self.sample_cap_dense == 0 || self.sample_cap_query == 0 {
            return bad("sampling caps must be positive");
        }
        self.loss.validate()?;
        Ok(())
    }

    fn sample_cap(&self) -> usize {
        match self.flavor() {
            Flavor::Query => self.sample_cap_query,
            _ => self.sample_cap_dense,
        }
    }
}

/// Rounds to the nearest value representable as an `f32` pair `hi + lo`.
/// The momentum tree accumulates at this precision: plain `f32` storage
/// drifts from the geometric recursion by about one ulp per 20 steps.
pub fn round_to_f32_pair(x: f64) -> f64 {
    let hi = x as f32;
    hi as f64 + (x - hi as f64) as f32 as f64
}

fn split_f32_pair(x: f64) -> (f32, f32) {
    let hi = x as f32;
    (hi, (x - hi as f64) as f32)
}

/// `k <- m k + (1 - m) q` over the momentum tree, see [`round_to_f32_pair`].
pub fn ema_update(online: &ParamSet, momentum: &mut ParamSet, ema: &EmaConfig) -> Result<(), PretrainError> {
    let m = ema.m;
    for (name, k) in momentum.iter_mut() {
        if !ema.include_projection && name.starts_with(PROJ_PREFIX) {
            continue;
        }
        let q = online.get(name).ok_or_else(|| PretrainError::Mismatch(format!("online branch lacks {name}")))?;
        if q.tensor.shape() != k.tensor.shape() {
            return Err(PretrainError::Mismatch(format!(
                "{name}: shapes {:?} and {:?}",
                q.tensor.shape(),
                k.tensor.shape()
            )));
        }
        for (kv, qv) in k.tensor.data_mut().iter_mut().zip(q.tensor.data()) {
            *kv = round_to_f32_pair(m * *kv + (1.0 - m) * qv);
        }
    }
    Ok(())
}

/// Trees duplicated into the momentum branch.
pub fn momentum_prefixes() -> [&'static str; 3] {
    [NECK_PREFIX, HEAD_PREFIX, PROJ_PREFIX]
}

/// Online and momentum networks of the box-domain stage.
#[derive(Debug, Clone)]
pub struct BoxState {
    pub online: DetectorNet,
    pub momentum: ParamSet,
    pub step: u64,
}

impl BoxState {
    /// Fresh neck/head/projection around a given backbone; the backbone is frozen.
    pub fn new(cfg: &TrainConfig, backbone_params: &ParamSet) -> Result<Self, PretrainError> {
        let mut online = DetectorNet::new(cfg.net.clone(), &mut stream_rng(cfg.seed, STREAM_INIT, 0));
        for (name, p) in backbone_params.iter() {
            if !name.starts_with(BACKBONE_PREFIX) {
                continue;
            }
            let dst = online
                .params
                .get_mut(name)
                .ok_or_else(|| PretrainError::Mismatch(format!("unexpected backbone array {name}")))?;
            if dst.tensor.shape() != p.tensor.shape() {
                return Err(PretrainError::Mismatch(format!("{name}: backbone shape differs")));
            }
            dst.tensor = p.tensor.clone();
        }
        online.params.set_frozen(BACKBONE_PREFIX, true);
        let momentum = online.params.subset(&momentum_prefixes());
        Ok(Self { online, momentum, step: 0 })
    }
}

/// Pseudo classes of every proposal, keyed by image id.
pub type PseudoClasses = HashMap<u64, Vec<usize>>;

/// Backbone features pooled over each proposal (C4, 2x2 grid).
pub fn proposal_features(backbone_params: &ParamSet, image: &Image, boxes: &[BBox]) -> Result<Vec<f64>, PretrainError> {
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::inference();
    let padded = image.pad_to_multiple(TOTAL_STRIDE);
    let [_, c4] = backbone(&mut g, backbone_params, &padded)?;
    let rois: Vec<(BBox, usize)> = boxes.iter().map(|b| (*b, 0)).collect();
    let pooled = g.roi_align(&[c4], &[16.0], &rois, 2)?;
    Ok(g.value(pooled).to_vec())
}

/// Cluster proposal features into `k` pseudo classes.
pub fn cluster_pseudo_classes(
    backbone_params: &ParamSet,
    data: &[UnlabeledImage],
    proposals: &HashMap<u64, ProposalSet>,
    k: usize,
    seed: u64,
    iters: usize,
) -> Result<(PseudoClasses, Option<KMeansResult>), PretrainError> {
    let mut feats = Vec::new();
    let mut owners = Vec::new();
    let mut dim = 0;
    for item in data {
        let Some(p) = proposals.get(&item.id) else { continue };
        let f = proposal_features(backbone_params, &item.image, &p.boxes)?;
        if !p.boxes.is_empty() {
            dim = f.len() / p.boxes.len();
        }
        feats.extend(f);
        owners.push((item.id, p.boxes.len()));
    }
    let rows = owners.iter().map(|o| o.1).sum::<usize>();
    let mut map = PseudoClasses::new();
    if rows == 0 {
        return Ok((map, None));
    }
    let km = kmeans(&feats, dim, k.min(rows), stream_rng(seed, STREAM_KMEANS, 0).random(), iters)?;
    let mut at = 0;
    for (id, n) in owners {
        map.insert(id, km.assignments[at..at + n].to_vec());
        at += n;
    }
    Ok((map, Some(km)))
}

/// Forward pass of one branch on one view.
struct BranchOut {
    pyr: Pyramid,
    deltas: Var,
    refs: Vec<Reference>,
    boxes: Vec<BBox>,
    /// `f^con` of every prediction (query flavor only).
    con_all: Option<Var>,
    pcls_logits: Option<Var>,
}

fn branch_forward(
    g: &mut Graph,
    cfg: &NetConfig,
    backbone_params: &ParamSet,
    branch: &ParamSet,
    image: &Image,
    view_size: (usize, usize),
    with_pcls: bool,
) -> Result<BranchOut, PretrainError> {
    let pyr = forward(g, backbone_params, branch, image)?;
    let preds = reg_head(g, cfg, branch, &pyr)?;
    let boxes = decode_predictions(g.value(preds.deltas), &preds.refs, view_size);
    let (con_all, pcls_logits) = if cfg.flavor == Flavor::Query {
        let f = con_features(g, cfg, branch, &pyr, &boxes)?;
        let logits = if with_pcls { Some(linear(g, branch, PSEUDO_CLS_HEAD, f)?) } else { None };
        (Some(f), logits)
    } else {
        (None, None)
    };
    Ok(BranchOut { pyr, deltas: preds.deltas, refs: preds.refs, boxes, con_all, pcls_logits })
}

/// Flavor-specific assignment of one branch's predictions to `targets`.
/// `class_cost` supplies per-prediction class probabilities and the class of
/// each target for set prediction.
pub fn assign_predictions(
    flavor: Flavor,
    cfg: &AssignConfig,
    refs: &[Reference],
    pred_boxes: &[BBox],
    targets: &[BBox],
    class_cost: Option<ClassCost<'_>>,
    image_size: (usize, usize),
) -> Result<AssignmentResult, PretrainError> {
    Ok(match flavor {
        Flavor::Anchor => {
            let anchors: Vec<BBox> = refs.iter().map(|r| r.bbox).collect();
            assign_iou(&anchors, targets, &cfg.iou)?
        }
        Flavor::Point => {
            let pts: Vec<GridPoint> = refs.iter().map(|r| GridPoint { x: r.point.0, y: r.point.1, level: r.level }).collect();
            assign_center(&pts, targets, &default_scale_ranges(cfg.scale_split))
        }
        Flavor::Query => {
            let size = (image_size.0 as f64, image_size.1 as f64);
            assign_hungarian(pred_boxes, targets, class_cost, size, &cfg.match_weights)?.result
        }
    })
}

fn probs_of(g: &Graph, logits: Var) -> Vec<f64> {
    let c = g.shape(logits)[1];
    g.value(logits).chunks_exact(c).flat_map(softmax).collect()
}

struct ImageTerms {
    con: f64,
    reg: f64,
    total: f64,
    positives: usize,
}

/// Loss of one image's two views; accumulates `scale * d loss` into the
/// online parameters.
#[allow(clippy::too_many_arguments)]
fn box_image_loss(
    state: &mut BoxState,
    cfg: &TrainConfig,
    item: &UnlabeledImage,
    proposals: &ProposalSet,
    pseudo: Option<&[usize]>,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTerms, PretrainError> {
    let flavor = cfg.flavor();
    let (w, h) = (item.image.width(), item.image.height());
    let t1 = sample_transform(rng, &cfg.aug, w, h);
    let t2 = sample_transform(rng, &cfg.aug, w, h);
    let v1 = augment_view(&item.image, proposals, &t1);
    let v2 = augment_view(&item.image, proposals, &t2);
    let size1 = (v1.image.width(), v1.image.height());
    let size2 = (v2.image.width(), v2.image.height());
    let p1 = &v1.proposals.boxes;
    let p2 = &v2.proposals.boxes;
    let k_pseudo = cfg.net.pseudo_classes;
    let is_query = flavor == Flavor::Query;

    // Momentum branch: no gradient, values only.
    let z2 = {
        let mut g = Graph::inference();
        let out = branch_forward(&mut g, &cfg.net, &state.online.params, &state.momentum, &v2.image.pad_to_multiple(TOTAL_STRIDE), size2, is_query)?;
        let probs = out.pcls_logits.map(|l| probs_of(&g, l));
        let cc = match (&probs, pseudo) {
            (Some(pr), Some(ps)) => Some(ClassCost { probs: pr, classes: k_pseudo + 1, proposal_class: ps }),
            _ => None,
        };
        let a2 = assign_predictions(flavor, &cfg.assign, &out.refs, &out.boxes, p2, cc, size2)?;
        let idx = sample_predictions(&a2, cfg.sample_cap(), rng);
        let labels: Vec<Label> = idx.iter().map(|&i| a2.labels[i]).collect();
        let z = if idx.is_empty() {
            Vec::new()
        } else {
            let f = match out.con_all {
                Some(all) => g.select_rows(all, &idx)?,
                None => {
                    let boxes: Vec<BBox> = idx.iter().map(|&i| out.boxes[i]).collect();
                    con_features(&mut g, &cfg.net, &state.momentum, &out.pyr, &boxes)?
                }
            };
            let z = project(&mut g, &cfg.net, &state.momentum, f)?;
            g.value(z).to_vec()
        };
        EmbeddingSet::new(cfg.net.embed_dim, z, labels)?
    };

    let mut g = Graph::new();
    let out = branch_forward(&mut g, &cfg.net, &state.online.params, &state.online.params, &v1.image.pad_to_multiple(TOTAL_STRIDE), size1, is_query)?;
    let probs = out.pcls_logits.map(|l| probs_of(&g, l));
    let cc = match (&probs, pseudo) {
        (Some(pr), Some(ps)) => Some(ClassCost { probs: pr, classes: k_pseudo + 1, proposal_class: ps }),
        _ => None,
    };
    let a1 = assign_predictions(flavor, &cfg.assign, &out.refs, &out.boxes, p1, cc, size1)?;
    let idx = sample_predictions(&a1, cfg.sample_cap(), rng);
    let positives = idx.iter().filter(|&&i| a1.labels[i].is_positive()).count();

    let mut terms = Vec::new();
    let (mut con, mut reg) = (0.0, 0.0);
    if !idx.is_empty() {
        let labels: Vec<Label> = idx.iter().map(|&i| a1.labels[i]).collect();
        let f = match out.con_all {
            Some(all) => g.select_rows(all, &idx)?,
            None => {
                let boxes: Vec<BBox> = idx.iter().map(|&i| out.boxes[i]).collect();
                con_features(&mut g, &cfg.net, &state.online.params, &out.pyr, &boxes)?
            }
        };
        let z1 = project(&mut g, &cfg.net, &state.online.params, f)?;
        let (lcon, _) = contrastive_loss(&mut g, z1, &labels, &z2, &cfg.loss)?;
        con = g.scalar(lcon);
        terms.push((lcon, cfg.loss.lambda_con));

        let sel = g.select_rows(out.deltas, &idx)?;
        let refs: Vec<BBox> = idx.iter().map(|&i| out.refs[i].bbox).collect();
        let targets: Vec<Option<BBox>> = idx.iter().map(|&i| a1.matched[i]).collect();
        let (lreg, _) = regression_loss(&mut g, sel, &refs, &targets, &cfg.loss)?;
        reg = g.scalar(lreg);
        terms.push((lreg, cfg.loss.lambda_reg));
    }
    if let (Some(logits), Some(ps)) = (out.pcls_logits, pseudo) {
        let targets: Vec<usize> = a1.labels.iter().map(|l| l.proposal().map_or(k_pseudo, |j| ps[j])).collect();
        let mut weights = vec![1.0; k_pseudo + 1];
        weights[k_pseudo] = cfg.no_object_weight;
        let lp = softmax_cross_entropy(&mut g, logits, &targets, Some(&weights))?;
        terms.push((lp, cfg.pseudo_cls_weight));
    }
    if terms.is_empty() {
        return Ok(ImageTerms { con, reg, total: 0.0, positives });
    }
    let total = g.weighted_sum(&terms)?;
    let total_value = g.scalar(total);
    if !total_value.is_finite() {
        return Err(PretrainError::NonFinite { step: state.step });
    }
    let scaled = g.scale(total, scale);
    g.backward(scaled, &mut state.online.params)?;
    Ok(ImageTerms { con, reg, total: total_value, positives })
}

/// One optimizer step of box-domain pre-training over `batch`.
pub fn box_domain_step(
    state: &mut BoxState,
    cfg: &TrainConfig,
    batch: &[&UnlabeledImage],
    proposals: &HashMap<u64, ProposalSet>,
    pseudo: &PseudoClasses,
) -> Result<StepMetrics, PretrainError> {
    let mut rng = stream_rng(cfg.seed, STREAM_STEP, state.step);
    let usable: Vec<(&UnlabeledImage, &ProposalSet)> = batch
        .iter()
        .filter_map(|item| proposals.get(&item.id).filter(|p| !p.is_empty()).map(|p| (*item, p)))
        .collect();
    let mut metrics = StepMetrics {
        step: state.step,
        lr: cfg.lr,
        skipped_images: batch.len() - usable.len(),
        ..Default::default()
    };
    state.online.params.zero_grad();
    if !usable.is_empty() {
        let scale = 1.0 / usable.len() as f64;
        for (item, props) in &usable {
            let ps = pseudo.get(&item.id).map(Vec::as_slice);
            let t = box_image_loss(state, cfg, item, props, ps, scale, &mut rng)?;
            metrics.loss_total += t.total * scale;
            metrics.loss_con += t.con * scale;
            metrics.loss_reg += t.reg * scale;
            metrics.pos_count += t.positives;
        }
        sgd_step(&mut state.online.params, cfg.lr, cfg.weight_decay);
        ema_update(&state.online.params, &mut state.momentum, &cfg.ema)?;
    }
    state.online.params.zero_grad();
    state.step += 1;
    Ok(metrics)
}

/// Named arrays, config snapshot and step counter of a box-domain run. The
/// rng state is implied: every step draws from the stream `(seed, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointManifest {
    pub online: ParamSet,
    pub momentum: ParamSet,
    pub step: u64,
    pub seed: u64,
    pub config: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    step: u64,
    seed: u64,
    rng: String,
    config: String,
}

const ONLINE: &str = "online/";
const MOMENTUM: &str = "momentum/";
/// Low halves of the momentum values, see [`round_to_f32_pair`].
const MOMENTUM_LO: &str = "momentum_lo/";

pub fn save_checkpoint(dir: &Path, ckpt: &CheckpointManifest) -> Result<(), PretrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let online: Vec<(String, &Tensor)> = ckpt.online.iter().map(|(n, p)| (format!("{ONLINE}{n}"), &p.tensor)).collect();
    let mut momentum: Vec<(String, Tensor)> = Vec::new();
    let mut momentum_lo: Vec<(String, Tensor)> = Vec::new();
    for (n, p) in ckpt.momentum.iter() {
        let (hi, lo): (Vec<f64>, Vec<f64>) =
            p.tensor.data().iter().map(|&v| split_f32_pair(v)).map(|(h, l)| (h as f64, l as f64)).unzip();
        momentum.push((format!("{MOMENTUM}{n}"), Tensor::from_vec(p.tensor.shape(), hi)?));
        momentum_lo.push((format!("{MOMENTUM_LO}{n}"), Tensor::from_vec(p.tensor.shape(), lo)?));
    }
    let bytes = encode_arrays(
        online.iter().map(|(n, t)| (n.as_str(), *t)).chain(momentum.iter().chain(&momentum_lo).map(|(n, t)| (n.as_str(), t))),
    )?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, bytes).map_err(io_err(&wpath))?;
    let state = StateFile {
        step: ckpt.step,
        seed: ckpt.seed,
        rng: format!("stream(seed={}, step={})", ckpt.seed, ckpt.step),
        config: ckpt.config.clone(),
    };
    let spath = dir.join(STATE_FILE);
    let text = serde_json::to_string_pretty(&state).map_err(|e| PretrainError::State(e.to_string()))?;
    fs::write(&spath, text).map_err(io_err(&spath))
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointManifest, PretrainError> {
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(io_err(&wpath))?;
    let mut online = ParamSet::new();
    let mut momentum = ParamSet::new();
    let mut low = Vec::new();
    for (name, t) in decode_arrays(&bytes)? {
        if let Some(n) = name.strip_prefix(ONLINE) {
            online.insert(n, t);
        } else if let Some(n) = name.strip_prefix(MOMENTUM) {
            momentum.insert(n, t);
        } else if let Some(n) = name.strip_prefix(MOMENTUM_LO) {
            low.push((n.to_string(), t));
        } else {
            return Err(PretrainError::State(format!("unexpected array {name}")));
        }
    }
    for (n, lo) in low {
        let k = momentum.get_mut(&n).ok_or_else(|| PretrainError::State(format!("{MOMENTUM_LO}{n} without {MOMENTUM}{n}")))?;
        if k.tensor.shape() != lo.shape() {
            return Err(PretrainError::Mismatch(format!("{n}: momentum halves differ in shape")));
        }
        k.tensor.data_mut().iter_mut().zip(lo.data()).for_each(|(h, l)| *h += l);
    }
    let spath = dir.join(STATE_FILE);
    let text = fs::read_to_string(&spath).map_err(io_err(&spath))?;
    let state: StateFile = serde_json::from_str(&text).map_err(|e| PretrainError::State(e.to_string()))?;
    Ok(CheckpointManifest { online, momentum, step: state.step, seed: state.seed, config: state.config })
}

impl BoxState {
    pub fn to_manifest(&self, seed: u64, config: &str) -> CheckpointManifest {
        let mut online = self.online.params.clone();
        online.set_frozen("", false);
        CheckpointManifest {
            online,
            momentum: self.momentum.clone(),
            step: self.step,
            seed,
            config: config.to_string(),
        }
    }

    pub fn from_manifest(cfg: &TrainConfig, m: &CheckpointManifest) -> Result<Self, PretrainError> {
        let mut state = BoxState::new(cfg, &m.online)?;
        let missing: Vec<String> = state
            .online
            .params
            .names()
            .filter(|n| !m.online.contains(n))
            .map(|n| format!("{ONLINE}{n}"))
            .chain(state.momentum.names().filter(|n| !m.momentum.contains(n)).map(|n| format!("{MOMENTUM}{n}")))
            .collect();
        if !missing.is_empty() {
            return Err(PretrainError::MissingArrays(missing));
        }
        state.online.params.load_from(&m.online);
        state.momentum.load_from(&m.momentum);
        state.step = m.step;
        Ok(state)
    }
}

/// Where and how often a run writes checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub config_snapshot: String,
    /// Stop after this global step (exclusive) even if epochs remain.
    pub stop_at: Option<u64>,
}

pub fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

/// Image order of an epoch.
pub fn epoch_order(seed: u64, tag: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, tag, epoch));
    order
}

/// Epoch loop of box-domain pre-training, from `state.step` to the end.
pub fn run_box_pretrain(
    data: &[UnlabeledImage],
    proposals: &HashMap<u64, ProposalSet>,
    mut state: BoxState,
    cfg: &TrainConfig,
    opts: &RunOptions,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<BoxState, PretrainError> {
    cfg.validate()?;
    let pseudo = if cfg.flavor() == Flavor::Query {
        cluster_pseudo_classes(&state.online.params, data, proposals, cfg.net.pseudo_classes, cfg.seed, cfg.kmeans_iters)?.0
    } else {
        PseudoClasses::new()
    };
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let total = spe * cfg.epochs as u64;
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.step < end {
        let epoch = state.step / spe;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, STREAM_EPOCH, epoch, data.len());
            order_epoch = epoch;
        }
        let pos = ((state.step % spe) as usize) * cfg.batch_size;
        let batch: Vec<&UnlabeledImage> = order[pos..(pos + cfg.batch_size).min(data.len())].iter().map(|&i| &data[i]).collect();
        let m = box_domain_step(&mut state, cfg, &batch, proposals, &pseudo)?;
        on_step(&m);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("step_{:06}", state.step)), &state.to_manifest(cfg.seed, &opts.config_snapshot))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join("final"), &state.to_manifest(cfg.seed, &opts.config_snapshot))?;
    }
    Ok(state)
}

/// Detector initialized from a box-domain checkpoint: backbone, neck and head
/// from the online branch, fresh projection and classifier.
pub fn load_for_finetune(m: &CheckpointManifest, net_cfg: &NetConfig, seed: u64) -> Result<DetectorNet, PretrainError> {
    let mut rng = stream_rng(seed, STREAM_HEAD_INIT, 0);
    let mut net = DetectorNet::new(net_cfg.clone(), &mut rng);
    let missing: Vec<String> = net
        .params
        .names()
        .filter(|n| !n.starts_with(PROJ_PREFIX) && !m.online.contains(n))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(PretrainError::MissingArrays(missing));
    }
    let keep: ParamSet = m.online.subset(&[BACKBONE_PREFIX, NECK_PREFIX, HEAD_PREFIX]);
    for (name, p) in keep.iter() {
        if let Some(dst) = net.params.get_mut(name) {
            if dst.tensor.shape() != p.tensor.shape() {
                return Err(PretrainError::Mismatch(format!("{name}: checkpoint shape differs")));
            }
            dst.tensor = p.tensor.clone();
        }
    }
    net.add_classifier(&mut rng);
    net.params.set_frozen("", false);
    Ok(net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePretrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub aug: AugConfig,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for ImagePretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 4,
            batch_size: 8,
            lr: 0.05,
            weight_decay: 1e-4,
            aug: AugConfig::default(),
            proj_dim: 64,
            pred_hidden: 32,
        }
    }
}

pub const SIMSIAM_PREFIX: &str = "simsiam.";

/// Backbone plus SimSiam projector and predictor.
pub fn simsiam_params(net_cfg: &NetConfig, cfg: &ImagePretrainConfig, seed: u64) -> ParamSet {
    let mut rng = stream_rng(seed, STREAM_INIT, 1);
    let mut params = DetectorNet::new(net_cfg.clone(), &mut rng).params.subset(&[BACKBONE_PREFIX]);
    let c4 = net_cfg.backbone_channels[3];
    let layers = [
        ("simsiam.proj.fc1", c4, cfg.proj_dim),
        ("simsiam.proj.fc2", cfg.proj_dim, cfg.proj_dim),
        ("simsiam.pred.fc1", cfg.proj_dim, cfg.pred_hidden),
        ("simsiam.pred.fc2", cfg.pred_hidden, cfg.proj_dim),
    ];
    for (name, din, dout) in layers {
        params.insert(format!("{name}.weight"), he_uniform(&mut rng, &[dout, din], din));
        params.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
    }
    params
}

/// Projector output `z` and predictor output `p` for a batch of views. The
/// hidden layers and the projector output are batch-normalized, so a batch
/// needs at least two views.
pub fn simsiam_forward(g: &mut Graph, params: &ParamSet, views: &[Image]) -> Result<(Var, Var), PretrainError> {
    let mut pooled = Vec::with_capacity(views.len());
    for v in views {
        let [_, c4] = backbone(g, params, &v.pad_to_multiple(TOTAL_STRIDE))?;
        pooled.push(g.global_avg_pool(c4)?);
    }
    let x = g.concat_rows(&pooled)?;
    let h = linear(g, params, "simsiam.proj.fc1", x)?;
    let h = g.batch_norm_rows(h)?;
    let h = g.relu(h);
    let z = linear(g, params, "simsiam.proj.fc2", h)?;
    let z = g.batch_norm_rows(z)?;
    let h = linear(g, params, "simsiam.pred.fc1", z)?;
    let h = g.batch_norm_rows(h)?;
    let h = g.relu(h);
    let p = linear(g, params, "simsiam.pred.fc2", h)?;
    Ok((z, p))
}

/// Symmetrized negative cosine with stop-gradient on the projector side.
pub fn simsiam_loss(g: &mut Graph, params: &ParamSet, views1: &[Image], views2: &[Image]) -> Result<Var, PretrainError> {
    let (z1, p1) = simsiam_forward(g, params, views1)?;
    let (z2, p2) = simsiam_forward(g, params, views2)?;
    let z1v = g.value(z1).to_vec();
    let z2v = g.value(z2).to_vec();
    let a = negative_cosine(g, p1, &z2v)?;
    let b = negative_cosine(g, p2, &z1v)?;
    Ok(g.weighted_sum(&[(a, 0.5), (b, 0.5)])?)
}

/// Self-supervised backbone training. Returns the full SimSiam parameter
/// set; callers keep `backbone.*` only.
pub fn image_domain_pretrain(
    data: &[UnlabeledImage],
    net_cfg: &NetConfig,
    cfg: &ImagePretrainConfig,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<ParamSet, PretrainError> {
    if cfg.batch_size < 2 {
        return Err(PretrainError::Config("batch size must be at least 2".into()));
    }
    let mut params = simsiam_params(net_cfg, cfg, cfg.seed);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let order = epoch_order(cfg.seed, STREAM_IMAGE_EPOCH, epoch, data.len());
        // A trailing single image cannot form batch statistics.
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let mut rng = stream_rng(cfg.seed, STREAM_IMAGE_STEP, step);
            let mut v1 = Vec::new();
            let mut v2 = Vec::new();
            for &i in chunk {
                let img = &data[i].image;
                let empty = ProposalSet::new(data[i].id, Vec::new());
                for views in [&mut v1, &mut v2] {
                    let t = sample_transform(&mut rng, &cfg.aug, img.width(), img.height());
                    views.push(augment_view(img, &empty, &t).image);
                }
            }
            let mut g = Graph::new();
            let loss = simsiam_loss(&mut g, &params, &v1, &v2)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(PretrainError::NonFinite { step });
            }
            params.zero_grad();
            g.backward(loss, &mut params)?;
            sgd_step(&mut params, cfg.lr, cfg.weight_decay);
            params.zero_grad();
            on_step(&StepMetrics { step, loss_total: value, loss_con: value, lr: cfg.lr, ..Default::default() });
            step += 1;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SyntheticSceneSpec};
    use crate::proposals::{generate_proposals, ProposalConfig};
    use rand::SeedableRng;

    fn tiny_data(n: usize) -> (Vec<UnlabeledImage>, HashMap<u64, ProposalSet>) {
        let spec = SyntheticSceneSpec::default();
        let mut data = Vec::new();
        let mut props = HashMap::new();
        for id in 0..n as u64 {
            let scene = generate_scene(&mut ChaCha8Rng::seed_from_u64(id), &spec).unwrap();
            props.insert(id, generate_proposals(id, &scene.image, &ProposalConfig::default()));
            data.push(UnlabeledImage { id, image: scene.image });
        }
        (data, props)
    }

    fn backbone_only(cfg: &TrainConfig) -> ParamSet {
        DetectorNet::new(cfg.net.clone(), &mut ChaCha8Rng::seed_from_u64(99)).params.subset(&[BACKBONE_PREFIX])
    }

    #[test]
    fn ema_examples() {
        let mut q = ParamSet::new();
        q.insert("neck.a", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut k = ParamSet::new();
        k.insert("neck.a", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        ema_update(&q, &mut k, &EmaConfig { m: 0.9, include_projection: true }).unwrap();
        let v = k.tensor("neck.a").unwrap().data()[0];
        assert!((v - 0.1).abs() < 1e-15);
        assert_eq!(round_to_f32_pair(v), v);

        let before = q.clone();
        let mut same = q.clone();
        ema_update(&q, &mut same, &EmaConfig::default()).unwrap();
        assert_eq!(same, before);

        let mut bad = ParamSet::new();
        bad.insert("neck.a", Tensor::zeros(&[2]));
        assert!(matches!(ema_update(&q, &mut bad, &EmaConfig::default()), Err(PretrainError::Mismatch(_))));
    }

    #[test]
    fn step_contracts_each_flavor() {
        let (data, props) = tiny_data(2);
        for flavor in Flavor::ALL {
            let mut cfg = TrainConfig::new(flavor);
            cfg.ema.m = 0.0;
            let mut state = BoxState::new(&cfg, &backbone_only(&cfg)).unwrap();
            let backbone_before = state.online.params.subset(&[BACKBONE_PREFIX]);
            let pseudo = if flavor == Flavor::Query {
                cluster_pseudo_classes(&state.online.params, &data, &props, 4, 0, 10).unwrap().0
            } else {
                PseudoClasses::new()
            };
            let batch: Vec<&UnlabeledImage> = data.iter().collect();
            let m = box_domain_step(&mut state, &cfg, &batch, &props, &pseudo).unwrap();
            assert!(m.loss_total.is_finite() && m.pos_count > 0, "{flavor}: {m:?}");
            assert_eq!(state.online.params.subset(&[BACKBONE_PREFIX]), backbone_before);
            assert!(state.momentum.iter().all(|(_, p)| p.tensor.grad.is_none()));
            // m = 0 copies the online branch.
            for (name, p) in state.momentum.iter() {
                assert_eq!(p.tensor.data(), state.online.params.tensor(name).unwrap().data(), "{name}");
            }
        }
    }

    #[test]
    fn skipped_images_counted() {
        let (data, mut props) = tiny_data(2);
        props.insert(1, ProposalSet::new(1, vec![]));
        let cfg = TrainConfig::new(Flavor::Anchor);
        let mut state = BoxState::new(&cfg, &backbone_only(&cfg)).unwrap();
        let batch: Vec<&UnlabeledImage> = data.iter().collect();
        let m = box_domain_step(&mut state, &cfg, &batch, &props, &PseudoClasses::new()).unwrap();
        assert_eq!(m.skipped_images, 1);
    }

    #[test]
    fn checkpoint_roundtrip_and_finetune_load() {
        let cfg = TrainConfig::new(Flavor::Point);
        let state = BoxState::new(&cfg, &backbone_only(&cfg)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = state.to_manifest(7, "train.seed=7\n");
        save_checkpoint(dir.path(), &m).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, m);

        let net = load_for_finetune(&back, &cfg.net, 3).unwrap();
        assert_eq!(net.params.tensor("neck.lateral3.weight").unwrap(), back.online.tensor("neck.lateral3.weight").unwrap());
        assert_ne!(net.params.tensor("proj.fc1.weight").unwrap(), back.online.tensor("proj.fc1.weight").unwrap());
        assert!(net.params.contains("head.cls.weight"));

        let mut partial = back.clone();
        partial.online.remove("head.reg.out.bias");
        match load_for_finetune(&partial, &cfg.net, 3) {
            Err(PretrainError::MissingArrays(names)) => assert_eq!(names, vec!["head.reg.out.bias".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn simsiam_identical_views_and_stop_gradient() {
        let net_cfg = NetConfig::new(Flavor::Anchor);
        let icfg = ImagePretrainConfig::default();
        let params = simsiam_params(&net_cfg, &icfg, 1);
        let mut g = Graph::new();
        let p = g.variable(&[2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.0]).unwrap();
        let l = negative_cosine(&mut g, p, &[0.2, 0.4, 0.6, -2.0, 1.0, 0.0]).unwrap();
        assert!((g.scalar(l) + 1.0).abs() < 1e-12);

        let (data, _) = tiny_data(2);
        let imgs: Vec<Image> = data.iter().map(|d| d.image.clone()).collect();
        let mut g = Graph::new();
        let loss = simsiam_loss(&mut g, &params, &imgs, &imgs).unwrap();
        assert!(g.scalar(loss) >= -1.0 - 1e-12);
    }
}
