//! Supervised fine-tuning, detection, COCO-style AP, embedding purity and
//! result reports.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{assign_iou, sample_balanced, ClassCost, IouAssignConfig};
use crate::augment::{apply_to_image, sample_transform, transform_box, AugConfig};
use crate::data::Dataset;
use crate::geometry::{iou, nms, BBox, ScoredBox};
use crate::image::Image;
use crate::losses::{regression_loss, softmax, softmax_cross_entropy, LossConfig, LossError};
use crate::metrics::StepMetrics;
use crate::netcore::net::{con_features, decode_predictions, forward, linear, project, reg_head, CLS_HEAD, TOTAL_STRIDE};
use crate::netcore::{sgd_step, DetectorNet, Flavor, Graph, NetConfig, NetError, ParamSet};
use crate::pretrain::{
    assign_predictions, default_reg_terms, ema_update, epoch_order, load_for_finetune, steps_per_epoch, AssignConfig,
    CheckpointManifest, EmaConfig, PretrainError,
};
use crate::stream_rng;

const STREAM_FT_EPOCH: u64 = 20;
const STREAM_FT_STEP: u64 = 21;
const STREAM_RANDOM_ARM: u64 = 22;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error("invalid evaluation input: {0}")]
    Invalid(String),
    #[error("non-finite fine-tune loss at step {0}")]
    NonFinite(u64),
}

impl From<crate::assign::AssignError> for EvalError {
    fn from(e: crate::assign::AssignError) -> Self {
        EvalError::Pretrain(PretrainError::Assign(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub seed: u64,
    /// Optimizer steps; identical for both arms.
    pub steps: u64,
    pub batch_size: usize,
    /// Base rate; the effective rate is `lr * lr_mult`.
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_mult: f64,
    pub wd_mult: f64,
    pub aug: AugConfig,
    pub assign: AssignConfig,
    pub loss: LossConfig,
    /// Dense flavors: predictions sampled per image for classification.
    pub sample_cap: usize,
    /// Largest share of positives among the sampled predictions.
    pub positive_fraction: f64,
    /// Momentum of the weight average that is returned for evaluation;
    /// 0 returns the last iterate.
    pub eval_ema: f64,
    /// Class weight of background in the query flavor.
    pub no_object_weight: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl FinetuneConfig {
    pub fn new(flavor: Flavor) -> Self {
        Self {
            seed: 0,
            steps: 600,
            batch_size: 4,
            lr: 0.02,
            weight_decay: 1e-4,
            lr_mult: 1.5,
            wd_mult: 0.5,
            aug: AugConfig { brightness: 0.05, contrast_range: (0.9, 1.1), channel_gain_range: (1.0, 1.0), ..AugConfig::default() },
            assign: AssignConfig::default(),
            loss: LossConfig { reg_terms: default_reg_terms(flavor), ..LossConfig::default() },
            sample_cap: 64,
            positive_fraction: 0.25,
            eval_ema: 0.99,
            no_object_weight: 0.1,
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.lr * self.lr_mult
    }

    pub fn effective_wd(&self) -> f64 {
        self.weight_decay * self.wd_mult
    }
}

/// Per-image fine-tune loss; accumulates `scale * gradient` into `net`.
fn finetune_image_loss(
    net: &mut DetectorNet,
    cfg: &FinetuneConfig,
    image: &Image,
    gt: &[BBox],
    gt_classes: &[usize],
    scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(f64, f64, f64, usize), EvalError> {
    let ncls = net.cfg.num_classes;
    let flavor = net.cfg.flavor;
    let t = sample_transform(rng, &cfg.aug, image.width(), image.height());
    let view = apply_to_image(image, &t);
    let size = (view.width(), view.height());
    let boxes: Vec<BBox> = gt.iter().map(|b| transform_box(b, &t)).collect();

    let mut g = Graph::new();
    let pyr = forward(&mut g, &net.params, &net.params, &view.pad_to_multiple(TOTAL_STRIDE))?;
    let preds = reg_head(&mut g, &net.cfg, &net.params, &pyr)?;
    let pred_boxes = decode_predictions(g.value(preds.deltas), &preds.refs, size);

    // Regression follows the flavor's assigner. The classifier pools at the
    // predicted boxes, so dense flavors label each box by its own IoU with
    // the ground truth; Hungarian matching already works on those boxes.
    // `rows` lists the regression rows of the query flavor only.
    let (reg_assigned, rows, cls_labels, logits) = if flavor == Flavor::Query {
        let f = con_features(&mut g, &net.cfg, &net.params, &pyr, &pred_boxes)?;
        let logits = linear(&mut g, &net.params, CLS_HEAD, f)?;
        let probs: Vec<f64> = g.value(logits).chunks_exact(ncls + 1).flat_map(softmax).collect();
        let cc = ClassCost { probs: &probs, classes: ncls + 1, proposal_class: gt_classes };
        let a = assign_predictions(flavor, &cfg.assign, &preds.refs, &pred_boxes, &boxes, Some(cc), size)?;
        let labels = a.labels.clone();
        (a, (0..pred_boxes.len()).collect::<Vec<_>>(), labels, logits)
    } else {
        let a = assign_predictions(flavor, &cfg.assign, &preds.refs, &pred_boxes, &boxes, None, size)?;
        // Ground-truth boxes join the candidates, as in two-stage RoI heads.
        let candidates: Vec<BBox> = pred_boxes.iter().chain(&boxes).copied().collect();
        let by_box = assign_iou(&candidates, &boxes, &IouAssignConfig { low_quality_rescue: false, ..cfg.assign.iou })?;
        let picked = sample_balanced(&by_box, cfg.sample_cap, cfg.positive_fraction, rng);
        let sel: Vec<BBox> = picked.iter().map(|&i| candidates[i]).collect();
        let f = con_features(&mut g, &net.cfg, &net.params, &pyr, &sel)?;
        let logits = linear(&mut g, &net.params, CLS_HEAD, f)?;
        let labels = picked.iter().map(|&i| by_box.labels[i]).collect();
        (a, Vec::new(), labels, logits)
    };
    let targets: Vec<usize> = cls_labels.iter().map(|l| l.proposal().map_or(ncls, |j| gt_classes[j])).collect();
    let mut weights = vec![1.0; ncls + 1];
    if flavor == Flavor::Query {
        weights[ncls] = cfg.no_object_weight;
    }
    let lcls = softmax_cross_entropy(&mut g, logits, &targets, Some(&weights))?;

    let reg_rows = if flavor == Flavor::Query { rows } else { reg_assigned.positives() };
    let sel = g.select_rows(preds.deltas, &reg_rows)?;
    let refs: Vec<BBox> = reg_rows.iter().map(|&i| preds.refs[i].bbox).collect();
    let matched: Vec<Option<BBox>> = reg_rows.iter().map(|&i| reg_assigned.matched[i]).collect();
    let (lreg, stats) = regression_loss(&mut g, sel, &refs, &matched, &cfg.loss)?;
    let total = g.weighted_sum(&[(lcls, 1.0), (lreg, cfg.loss.lambda_reg)])?;
    let (c, r, tv) = (g.scalar(lcls), g.scalar(lreg), g.scalar(total));
    if !tv.is_finite() {
        return Err(EvalError::NonFinite(0));
    }
    let scaled = g.scale(total, scale);
    g.backward(scaled, &mut net.params)?;
    Ok((tv, c, r, stats.positives))
}

/// Supervised training of every parameter for `cfg.steps` steps. The batch
/// order depends only on `cfg.seed`, so two arms see the same images.
/// Returns the running weight average when `cfg.eval_ema > 0`; metrics
/// always describe the trained iterate.
pub fn finetune(
    mut net: DetectorNet,
    data: &Dataset,
    cfg: &FinetuneConfig,
    on_step: &mut dyn FnMut(&StepMetrics),
) -> Result<DetectorNet, EvalError> {
    if !net.params.contains(&format!("{CLS_HEAD}.weight")) {
        return Err(EvalError::Invalid("network has no classification layer".into()));
    }
    if cfg.steps > 0 && (data.is_empty() || cfg.batch_size == 0) {
        return Err(EvalError::Invalid("fine-tuning needs images and a positive batch size".into()));
    }
    net.params.set_frozen("", false);
    let ema = EmaConfig { m: cfg.eval_ema, include_projection: true };
    let mut average = (cfg.eval_ema > 0.0).then(|| net.params.clone());
    let records = &data.manifest.images;
    let spe = steps_per_epoch(data.len(), cfg.batch_size.max(1)).max(1);
    let mut order = Vec::new();
    for step in 0..cfg.steps {
        let epoch = step / spe;
        if step % spe == 0 {
            order = epoch_order(cfg.seed, STREAM_FT_EPOCH, epoch, data.len());
        }
        let pos = ((step % spe) as usize) * cfg.batch_size;
        let batch = &order[pos..(pos + cfg.batch_size).min(data.len())];
        let mut rng = stream_rng(cfg.seed, STREAM_FT_STEP, step);
        let scale = 1.0 / batch.len() as f64;
        let mut m = StepMetrics { step, lr: cfg.effective_lr(), ..Default::default() };
        net.params.zero_grad();
        for &i in batch {
            let gt = records[i].gt_boxes();
            let (t, c, r, pos) = finetune_image_loss(&mut net, cfg, &data.images[i], &gt, &records[i].classes, scale, &mut rng)
                .map_err(|e| match e {
                    EvalError::NonFinite(_) => EvalError::NonFinite(step),
                    other => other,
                })?;
            m.loss_total += t * scale;
            m.loss_con += c * scale;
            m.loss_reg += r * scale;
            m.pos_count += pos;
        }
        sgd_step(&mut net.params, cfg.effective_lr(), cfg.effective_wd());
        net.params.zero_grad();
        if let Some(avg) = average.as_mut() {
            ema_update(&net.params, avg, &ema)?;
        }
        on_step(&m);
    }
    if let Some(mut avg) = average {
        avg.iter_mut().for_each(|(_, p)| p.tensor.round_to_f32());
        net.params.load_from(&avg);
    }
    Ok(net)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    /// Corner format `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub score: f64,
}

/// Class-wise NMS detections of one image.
pub fn detect(net: &DetectorNet, image: &Image, image_id: u64, cfg: &FinetuneConfig) -> Result<Vec<Detection>, EvalError> {
    let ncls = net.cfg.num_classes;
    let mut g = Graph::inference();
    let size = (image.width(), image.height());
    let pyr = forward(&mut g, &net.params, &net.params, &image.pad_to_multiple(TOTAL_STRIDE))?;
    let preds = reg_head(&mut g, &net.cfg, &net.params, &pyr)?;
    let boxes = decode_predictions(g.value(preds.deltas), &preds.refs, size);
    let f = con_features(&mut g, &net.cfg, &net.params, &pyr, &boxes)?;
    let logits = linear(&mut g, &net.params, CLS_HEAD, f)?;
    let probs: Vec<Vec<f64>> = g.value(logits).chunks_exact(ncls + 1).map(softmax).collect();
    let mut out = Vec::new();
    for c in 0..ncls {
        let cands: Vec<ScoredBox> = boxes
            .iter()
            .zip(&probs)
            .filter(|(_, p)| p[c] > cfg.score_threshold)
            .map(|(b, p)| ScoredBox { bbox: *b, score: p[c] })
            .collect();
        for k in nms(&cands, cfg.nms_threshold) {
            out.push(Detection { image_id, bbox: cands[k].bbox.corners(), class_id: c, score: cands[k].score });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.max_detections);
    Ok(out)
}

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
}

pub fn ground_truth(data: &Dataset) -> Vec<GroundTruth> {
    data.manifest
        .images
        .iter()
        .map(|r| GroundTruth { image_id: r.id, boxes: r.gt_boxes(), classes: r.classes.clone() })
        .collect()
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over the IoU thresholds of the per-class mean.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Per-class AP averaged over thresholds; `None` for classes without GT.
    pub per_class: Vec<Option<f64>>,
}

/// 101-point interpolated AP of one class at one IoU threshold.
pub fn class_ap(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
    let mut gt_by_image: HashMap<u64, Vec<BBox>> = HashMap::new();
    let mut n_gt = 0;
    for g in gts {
        let boxes: Vec<BBox> = g.boxes.iter().zip(&g.classes).filter(|(_, &c)| c == class).map(|(b, _)| *b).collect();
        n_gt += boxes.len();
        gt_by_image.entry(g.image_id).or_default().extend(boxes);
    }
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: HashMap<u64, Vec<bool>> = gt_by_image.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    for (rank, d) in order.iter().enumerate() {
        let db = BBox::from_corners(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]).ok();
        let mut best: Option<(usize, f64)> = None;
        if let (Some(db), Some(boxes)) = (db, gt_by_image.get(&d.image_id)) {
            let flags = &used[&d.image_id];
            for (j, gb) in boxes.iter().enumerate() {
                let v = iou(&db, gb);
                if !flags[j] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
        }
        if let Some((j, _)) = best {
            used.get_mut(&d.image_id).expect("image with GT")[j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if let Some(i) = recall.iter().position(|&x| x >= r - 1e-12) {
            sum += precision[i];
        }
    }
    Some(sum / 101.0)
}

fn mean_over_classes(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, thr: f64) -> (f64, Vec<Option<f64>>) {
    let per: Vec<Option<f64>> = (0..num_classes).map(|c| class_ap(dets, gts, c, thr)).collect();
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    (mean, per)
}

pub fn evaluate_ap(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, thresholds: &[f64]) -> ApReport {
    let mut per_class_sum = vec![0.0; num_classes];
    let mut present = vec![false; num_classes];
    let mut total = 0.0;
    for &t in thresholds {
        let (m, per) = mean_over_classes(dets, gts, num_classes, t);
        total += m;
        for (c, v) in per.iter().enumerate() {
            if let Some(v) = v {
                per_class_sum[c] += v;
                present[c] = true;
            }
        }
    }
    let n = thresholds.len().max(1) as f64;
    ApReport {
        ap: total / n,
        ap50: mean_over_classes(dets, gts, num_classes, 0.5).0,
        ap75: mean_over_classes(dets, gts, num_classes, 0.75).0,
        per_class: (0..num_classes).map(|c| present[c].then(|| per_class_sum[c] / n)).collect(),
    }
}

/// Mean fraction of each row's `k` cosine-nearest neighbors sharing its class.
pub fn knn_purity(rows: &[f64], dim: usize, classes: &[usize], k: usize) -> Result<f64, EvalError> {
    let n = classes.len();
    if dim == 0 || rows.len() != n * dim {
        return Err(EvalError::Invalid("embedding rows do not match class tags".into()));
    }
    if k == 0 || k >= n {
        return Err(EvalError::Invalid(format!("k = {k} needs more than k rows (have {n})")));
    }
    let unit: Vec<Vec<f64>> = rows
        .chunks_exact(dim)
        .map(|r| {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect()
        })
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum(), j))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let same = sims[..k].iter().filter(|(_, j)| classes[*j] == classes[i]).count();
        total += same as f64 / k as f64;
    }
    Ok(total / n as f64)
}

/// `g(f^con)` embeddings of every GT box (un-augmented images) with class tags.
pub fn gt_embeddings(net_cfg: &NetConfig, params: &ParamSet, data: &Dataset) -> Result<(Vec<f64>, Vec<usize>), EvalError> {
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (r, img) in data.manifest.images.iter().zip(&data.images) {
        if r.boxes.is_empty() {
            continue;
        }
        let mut g = Graph::inference();
        let pyr = forward(&mut g, params, params, &img.pad_to_multiple(TOTAL_STRIDE))?;
        let f = con_features(&mut g, net_cfg, params, &pyr, &r.gt_boxes())?;
        let z = project(&mut g, net_cfg, params, f)?;
        rows.extend_from_slice(g.value(z));
        classes.extend_from_slice(&r.classes);
    }
    Ok((rows, classes))
}

pub fn detect_all(net: &DetectorNet, data: &Dataset, cfg: &FinetuneConfig) -> Result<Vec<Detection>, EvalError> {
    let mut out = Vec::new();
    for (r, img) in data.manifest.images.iter().zip(&data.images) {
        out.extend(detect(net, img, r.id, cfg)?);
    }
    Ok(out)
}

/// Mean total loss over the steps in `[lo, hi)` of the budget, widened to at
/// least one step; `None` without steps.
pub fn window_loss(metrics: &[StepMetrics], lo: f64, hi: f64) -> Option<f64> {
    let n = metrics.len();
    if n == 0 {
        return None;
    }
    let start = ((lo * n as f64).floor() as usize).min(n - 1);
    let end = ((hi * n as f64).ceil() as usize).clamp(start + 1, n);
    let sel = &metrics[start..end];
    Some(sel.iter().map(|m| m.loss_total).sum::<f64>() / sel.len() as f64)
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub net: DetectorNet,
    pub metrics: Vec<StepMetrics>,
    pub ap: ApReport,
}

#[derive(Debug, Clone)]
pub struct PairedRun {
    pub pretrained: ArmRun,
    pub random: ArmRun,
}

/// The two arms: neck/head from the box-domain checkpoint, or random; the
/// backbone and classifier initialization are shared.
pub fn paired_initializations(manifest: &CheckpointManifest, net_cfg: &NetConfig, seed: u64) -> Result<(DetectorNet, DetectorNet), EvalError> {
    let pretrained = load_for_finetune(manifest, net_cfg, seed)?;
    let mut random = pretrained.clone();
    random.reinit_neck_head(&mut stream_rng(seed, STREAM_RANDOM_ARM, 0));
    Ok((pretrained, random))
}

pub fn paired_finetune(
    manifest: &CheckpointManifest,
    net_cfg: &NetConfig,
    train: &Dataset,
    eval: &Dataset,
    cfg: &FinetuneConfig,
    on_step: &mut dyn FnMut(&str, &StepMetrics),
) -> Result<PairedRun, EvalError> {
    let (pre, rnd) = paired_initializations(manifest, net_cfg, cfg.seed)?;
    let gts = ground_truth(eval);
    let num_classes = net_cfg.num_classes;
    let mut run_arm = |name: &str, init: DetectorNet| -> Result<ArmRun, EvalError> {
        let mut metrics = Vec::new();
        let net = finetune(init, train, cfg, &mut |m| {
            metrics.push(*m);
            on_step(name, m);
        })?;
        let dets = detect_all(&net, eval, cfg)?;
        let ap = evaluate_ap(&dets, &gts, num_classes, &coco_thresholds());
        Ok(ArmRun { net, metrics, ap })
    };
    let pretrained = run_arm("pretrained", pre)?;
    let random = run_arm("random", rnd)?;
    Ok(PairedRun { pretrained, random })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub ap: ApReport,
    /// Mean loss over 20-30% of the budget.
    pub loss_at_quarter: Option<f64>,
    pub final_loss: Option<f64>,
}

/// One paired fine-tune result as written by the `finetune` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub flavor: String,
    pub seed: u64,
    pub fraction: f64,
    pub fold: usize,
    pub steps: u64,
    pub pretrained: ArmSummary,
    pub random: ArmSummary,
}

impl ArmSummary {
    pub fn from_run(run: &ArmRun) -> Self {
        Self {
            ap: run.ap.clone(),
            loss_at_quarter: window_loss(&run.metrics, 0.2, 0.3),
            final_loss: window_loss(&run.metrics, 0.9, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub folds: Vec<FoldResult>,
    pub mean_ap50_pretrained: f64,
    pub mean_ap50_random: f64,
    pub mean_ap_pretrained: f64,
    pub mean_ap_random: f64,
    /// Folds where the pre-trained arm's AP50 is at least the random arm's.
    pub ap50_wins: usize,
}

pub fn summarize(folds: Vec<FoldResult>) -> ReportSummary {
    let n = folds.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FoldResult) -> f64| folds.iter().map(f).sum::<f64>() / n;
    ReportSummary {
        mean_ap50_pretrained: mean(&|r| r.pretrained.ap.ap50),
        mean_ap50_random: mean(&|r| r.random.ap.ap50),
        mean_ap_pretrained: mean(&|r| r.pretrained.ap.ap),
        mean_ap_random: mean(&|r| r.random.ap.ap),
        ap50_wins: folds.iter().filter(|r| r.pretrained.ap.ap50 >= r.random.ap.ap50).count(),
        folds,
    }
}

/// Aligned-column text form of a report.
pub fn report_text(s: &ReportSummary) -> String {
    let mut out = format!(
        "{:<8} {:>6} {:>8} {:>5} {:>10} {:>10} {:>10} {:>10}\n",
        "flavor", "seed", "fraction", "fold", "AP50(pre)", "AP50(rnd)", "AP(pre)", "AP(rnd)"
    );
    for r in &s.folds {
        out.push_str(&format!(
            "{:<8} {:>6} {:>8.2} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            r.flavor, r.seed, r.fraction, r.fold, r.pretrained.ap.ap50, r.random.ap.ap50, r.pretrained.ap.ap, r.random.ap.ap
        ));
    }
    out.push_str(&format!(
        "{:<8} {:>6} {:>8} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
        "mean", "", "", s.folds.len(), s.mean_ap50_pretrained, s.mean_ap50_random, s.mean_ap_pretrained, s.mean_ap_random
    ));
    out.push_str(&format!("pre-trained AP50 >= random in {}/{} folds\n", s.ap50_wins, s.folds.len()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(id: u64, b: [f64; 4], class_id: usize, score: f64) -> Detection {
        Detection { image_id: id, bbox: b, class_id, score }
    }

    fn gt(id: u64, boxes: &[[f64; 4]], classes: &[usize]) -> GroundTruth {
        GroundTruth {
            image_id: id,
            boxes: boxes.iter().map(|b| BBox::from_corners(b[0], b[1], b[2], b[3]).unwrap()).collect(),
            classes: classes.to_vec(),
        }
    }

    #[test]
    fn ap_examples() {
        let g = [gt(1, &[[0.0, 0.0, 10.0, 10.0]], &[0])];
        let hit = det(1, [0.0, 0.0, 10.0, 9.0], 0, 0.9);
        let r = evaluate_ap(&[hit], &g, 1, &coco_thresholds());
        assert_eq!(r.ap50, 1.0);
        assert_eq!(evaluate_ap(&[], &g, 1, &coco_thresholds()).ap, 0.0);

        let fp = det(1, [30.0, 30.0, 40.0, 40.0], 0, 0.95);
        let r = evaluate_ap(&[fp, hit], &g, 1, &coco_thresholds());
        assert!((r.ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn class_without_gt_excluded() {
        let g = [gt(1, &[[0.0, 0.0, 10.0, 10.0]], &[0])];
        let r = evaluate_ap(&[det(1, [0.0, 0.0, 10.0, 10.0], 0, 0.5)], &g, 3, &[0.5]);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.per_class, vec![Some(1.0), None, None]);
    }

    #[test]
    fn purity_examples() {
        let rows = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(knn_purity(&rows, 2, &[0, 0, 0], 2).unwrap(), 1.0);
        let rows = vec![1.0, 0.0, 0.9, 0.1, 0.95, 0.05, 0.0, 1.0, 0.1, 0.9, 0.05, 0.95];
        assert_eq!(knn_purity(&rows, 2, &[0, 0, 0, 1, 1, 1], 1).unwrap(), 1.0);
        assert!(knn_purity(&rows, 2, &[0, 0, 0, 1, 1, 1], 6).is_err());
    }

    #[test]
    fn purity_random_labels_near_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut classes: Vec<usize> = (0..200).map(|i| i % 2).collect();
        rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), &mut rng);
        let p = knn_purity(&rows, 2, &classes, 1).unwrap();
        assert!((p - 0.5).abs() < 0.1, "{p}");
    }

    #[test]
    fn window_loss_means() {
        let ms: Vec<StepMetrics> = (0..10).map(|i| StepMetrics { step: i, loss_total: i as f64, ..Default::default() }).collect();
        assert_eq!(window_loss(&ms, 0.2, 0.3), Some(2.0));
        assert_eq!(window_loss(&ms, 0.9, 1.0), Some(9.0));
        assert_eq!(window_loss(&ms[..3], 0.2, 0.3), Some(0.0));
        assert_eq!(window_loss(&[], 0.2, 0.3), None);
    }

    fn cell_box(cell: usize, jitter: f64) -> [f64; 4] {
        let x = cell as f64 * 20.0;
        [x + 2.0 + jitter, 2.0, x + 16.0 + jitter, 16.0]
    }

    proptest! {
        // A top-scoring detection on a GT no other detection touches only
        // raises precision at every rank and adds recall.
        #[test]
        fn ap_monotone_in_isolated_true_positive(
            n_gt in 1usize..6,
            raw in prop::collection::vec((0usize..8, -3.0f64..3.0, 0.01f64..1.0), 0..10),
        ) {
            let target = n_gt - 1;
            let boxes: Vec<[f64; 4]> = (0..n_gt).map(|c| cell_box(c, 0.0)).collect();
            let g = [gt(0, &boxes, &vec![0; n_gt])];
            // Cells at or past `target` other than the target itself are empty of GT.
            let dets: Vec<Detection> = raw
                .iter()
                .map(|&(cell, j, score)| det(0, cell_box(if cell >= target { cell + 1 } else { cell }, j), 0, score))
                .collect();
            let before = evaluate_ap(&dets, &g, 1, &coco_thresholds());
            let mut more = dets.clone();
            more.push(det(0, boxes[target], 0, 2.0));
            let after = evaluate_ap(&more, &g, 1, &coco_thresholds());
            prop_assert!(after.ap >= before.ap - 1e-12);
            prop_assert!(after.ap50 >= before.ap50 - 1e-12);
            prop_assert!(after.ap75 >= before.ap75 - 1e-12);
        }
    }
}
