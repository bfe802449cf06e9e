//! Box-level contrastive loss, coordinate regression losses and the
//! auxiliary classification/cosine losses, each as a fused graph node whose
//! gradient is computed analytically here.

use thiserror::Error;

use crate::geometry::{encode_deltas, BBox, Label};
use crate::netcore::{Graph, NetError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss config: {0}")]
    Config(String),
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
    #[error("embedding rows: {0}")]
    Embedding(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    /// L1 on encoded deltas.
    L1Deltas,
    /// `1 - IoU(pred, target)`.
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTerm {
    pub kind: RegKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_con: f64,
    pub lambda_reg: f64,
    pub reg_terms: Vec<RegTerm>,
    /// Add the matching momentum rows to each query's positive set.
    pub positives_from_momentum: bool,
    /// Drop background rows from the negative set.
    pub exclude_background_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda_con: 1.0,
            lambda_reg: 1.0,
            reg_terms: vec![RegTerm { kind: RegKind::L1Deltas, weight: 1.0 }],
            positives_from_momentum: false,
            exclude_background_negatives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        let weights = [self.lambda_con, self.lambda_reg]
            .into_iter()
            .chain(self.reg_terms.iter().map(|t| t.weight));
        if weights.into_iter().any(|w| !(w >= 0.0 && w.is_finite())) {
            return Err(LossError::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Row-major embeddings with one assignment label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub rows: Vec<f64>,
    pub labels: Vec<Label>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, rows: Vec<f64>, labels: Vec<Label>) -> Result<Self, LossError> {
        if dim == 0 || rows.len() != dim * labels.len() {
            return Err(LossError::Embedding(format!(
                "{} values for {} labels of dim {dim}",
                rows.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, rows, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Checks every row has unit norm within `tol`.
    pub fn check_unit(&self, tol: f64) -> Result<(), LossError> {
        for i in 0..self.len() {
            let n = dot(self.row(i), self.row(i)).sqrt();
            if (n - 1.0).abs() > tol {
                return Err(LossError::Embedding(format!("row {i} has norm {n}")));
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Number of (query, positive) terms averaged.
    pub pairs: usize,
    pub queries: usize,
    pub queries_without_positive: usize,
    /// `d loss / d Z1`, row-major like `z1.rows`.
    pub grad_z1: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Branch {
    Online,
    Momentum,
}

/// Box-level InfoNCE over queries `Q = {rows of Z1 with a proposal label}`,
/// averaged over (query, positive) pairs.
pub fn contrastive_forward(z1: &EmbeddingSet, z2: &EmbeddingSet, cfg: &LossConfig) -> Result<ContrastiveOutput, LossError> {
    if z1.dim != z2.dim {
        return Err(LossError::Embedding(format!("dims {} and {}", z1.dim, z2.dim)));
    }
    let dim = z1.dim;
    let tau = cfg.tau;
    let mut out = ContrastiveOutput { grad_z1: vec![0.0; z1.rows.len()], ..Default::default() };

    let keys: Vec<(Branch, usize, Label)> = z1
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (Branch::Online, i, l))
        .chain(z2.labels.iter().enumerate().map(|(i, &l)| (Branch::Momentum, i, l)))
        .filter(|&(_, _, l)| l != Label::Ignore)
        .collect();
    let key_row = |b: Branch, i: usize| match b {
        Branch::Online => z1.row(i),
        Branch::Momentum => z2.row(i),
    };

    // Per-term gradients are accumulated unnormalized, then scaled once.
    let mut total = 0.0;
    for (q, &lq) in z1.labels.iter().enumerate() {
        let Some(target) = lq.proposal() else { continue };
        out.queries += 1;
        let zq = z1.row(q);
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for &(b, i, l) in &keys {
            let is_self = matches!(b, Branch::Online) && i == q;
            if l == Label::Proposal(target) {
                let allowed = matches!(b, Branch::Online) || cfg.positives_from_momentum;
                if allowed && !is_self {
                    positives.push((b, i));
                }
            } else if !(cfg.exclude_background_negatives && l == Label::Background) {
                negatives.push((b, i));
            }
        }
        if positives.is_empty() {
            out.queries_without_positive += 1;
            continue;
        }
        let neg_s: Vec<f64> = negatives.iter().map(|&(b, i)| dot(zq, key_row(b, i)) / tau).collect();
        for &(pb, pi) in &positives {
            let zp = key_row(pb, pi);
            let sp = dot(zq, zp) / tau;
            let m = neg_s.iter().copied().fold(sp, f64::max);
            let ep = (sp - m).exp();
            let en: Vec<f64> = neg_s.iter().map(|s| (s - m).exp()).collect();
            let denom = ep + en.iter().sum::<f64>();
            total += -(sp - m) + denom.ln();
            out.pairs += 1;

            // d/ds_p = -1 + e_p/D, d/ds_n = e_n/D, ds/dz = other / tau.
            let wp = (-1.0 + ep / denom) / tau;
            let gq = &mut out.grad_z1[q * dim..(q + 1) * dim];
            for d in 0..dim {
                gq[d] += wp * zp[d];
            }
            for (&(nb, ni), e) in negatives.iter().zip(&en) {
                let wn = e / denom / tau;
                let zn = key_row(nb, ni);
                let gq = &mut out.grad_z1[q * dim..(q + 1) * dim];
                for d in 0..dim {
                    gq[d] += wn * zn[d];
                }
                if let Branch::Online = nb {
                    let gn = &mut out.grad_z1[ni * dim..(ni + 1) * dim];
                    for d in 0..dim {
                        gn[d] += wn * zq[d];
                    }
                }
            }
            if let Branch::Online = pb {
                let gp = &mut out.grad_z1[pi * dim..(pi + 1) * dim];
                for d in 0..dim {
                    gp[d] += wp * zq[d];
                }
            }
        }
    }
    if out.pairs > 0 {
        let scale = 1.0 / out.pairs as f64;
        out.loss = total * scale;
        out.grad_z1.iter_mut().for_each(|g| *g *= scale);
    }
    if !out.loss.is_finite() {
        return Err(LossError::NonFinite("contrastive"));
    }
    Ok(out)
}

/// Graph form of [`contrastive_forward`]: gradients flow into `z1` only.
pub fn contrastive_loss(
    g: &mut Graph,
    z1: Var,
    labels1: &[Label],
    z2: &EmbeddingSet,
    cfg: &LossConfig,
) -> Result<(Var, ContrastiveOutput), LossError> {
    let dim = g.shape(z1).get(1).copied().unwrap_or(0);
    let online = EmbeddingSet::new(dim, g.value(z1).to_vec(), labels1.to_vec())?;
    let mut out = contrastive_forward(&online, z2, cfg)?;
    let grad = std::mem::take(&mut out.grad_z1);
    let v = g.fused_scalar(out.loss, vec![(z1, grad)], Vec::new())?;
    Ok((v, out))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RegStats {
    pub positives: usize,
    pub no_positives: bool,
}

/// Sum over rows of `|d - t|_1` with its gradient.
pub fn l1_delta_terms(deltas: &[f64], targets: &[[f64; 4]]) -> (f64, Vec<f64>, Vec<bool>) {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(deltas.len());
    let mut kinks = Vec::with_capacity(deltas.len());
    for (d, t) in deltas.chunks_exact(4).zip(targets) {
        for k in 0..4 {
            let r = d[k] - t[k];
            value += r.abs();
            grad.push(if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 });
            kinks.push(r > 0.0);
        }
    }
    (value, grad, kinks)
}

/// `1 - IoU` for one `(cx, cy, w, h)` prediction against a target, with the
/// gradient with respect to the four prediction values.
pub fn iou_loss_single(p: &[f64], t: &BBox) -> (f64, [f64; 4], [bool; 6]) {
    let (cx, cy, w, h) = (p[0], p[1], p[2], p[3]);
    let axis = |c: f64, s: f64, t0: f64, t1: f64| {
        let (a0, a1) = (c - s * 0.5, c + s * 0.5);
        let lo_inner = a0 > t0;
        let hi_inner = a1 < t1;
        let len = a1.min(t1) - a0.max(t0);
        let live = len > 0.0;
        let (dc, ds) = if live {
            (
                f64::from(u8::from(hi_inner)) - f64::from(u8::from(lo_inner)),
                0.5 * (f64::from(u8::from(hi_inner)) + f64::from(u8::from(lo_inner))),
            )
        } else {
            (0.0, 0.0)
        };
        (len.max(0.0), dc, ds, [lo_inner, hi_inner, live])
    };
    let (iw, diw_dcx, diw_dw, kx) = axis(cx, w, t.x0(), t.x1());
    let (ih, dih_dcy, dih_dh, ky) = axis(cy, h, t.y0(), t.y1());
    let inter = iw * ih;
    let union = w * h + t.area() - inter;
    let iou = inter / union;
    // dIoU = dI * (U + I) / U^2 - I * dA / U^2
    let a = (union + inter) / (union * union);
    let b = inter / (union * union);
    let d_cx = a * ih * diw_dcx;
    let d_cy = a * iw * dih_dcy;
    let d_w = a * ih * diw_dw - b * h;
    let d_h = a * iw * dih_dh - b * w;
    let kinks = [kx[0], kx[1], kx[2] && ky[2], ky[0], ky[1], kx[2] || ky[2]];
    (1.0 - iou, [-d_cx, -d_cy, -d_w, -d_h], kinks)
}

/// Weighted regression loss over positive rows, averaged over their count.
///
/// `deltas` is `[N, 4]`; `targets[i]` is the assigned proposal of row `i`
/// (`None` rows are skipped).
pub fn regression_loss(
    g: &mut Graph,
    deltas: Var,
    refs: &[BBox],
    targets: &[Option<BBox>],
    cfg: &LossConfig,
) -> Result<(Var, RegStats), LossError> {
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
    let stats = RegStats { positives: rows.len(), no_positives: rows.is_empty() };
    if rows.is_empty() {
        return Ok((g.input(&[1], vec![0.0])?, stats));
    }
    let sel = g.select_rows(deltas, &rows)?;
    let sel_refs: Vec<BBox> = rows.iter().map(|&i| refs[i]).collect();
    let sel_targets: Vec<BBox> = rows.iter().map(|&i| targets[i].expect("positive row")).collect();
    let scale = 1.0 / rows.len() as f64;
    let mut terms = Vec::new();
    for term in &cfg.reg_terms {
        let v = match term.kind {
            RegKind::L1Deltas => {
                let enc: Vec<[f64; 4]> = sel_refs.iter().zip(&sel_targets).map(|(r, t)| encode_deltas(r, t)).collect();
                let (value, grad, kinks) = l1_delta_terms(g.value(sel), &enc);
                g.fused_scalar(value, vec![(sel, grad)], kinks)?
            }
            RegKind::Iou => {
                let boxes = g.decode_boxes(sel, &sel_refs)?;
                iou_loss_node(g, boxes, &sel_targets)?
            }
        };
        terms.push((v, term.weight * scale));
    }
    Ok((g.weighted_sum(&terms)?, stats))
}

/// Sum of `1 - IoU` over rows of a `[N, 4]` box node.
pub fn iou_loss_node(g: &mut Graph, boxes: Var, targets: &[BBox]) -> Result<Var, LossError> {
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(targets.len() * 4);
    let mut kinks = Vec::new();
    for (p, t) in g.value(boxes).chunks_exact(4).zip(targets) {
        let (v, gr, k) = iou_loss_single(p, t);
        value += v;
        grad.extend(gr);
        kinks.extend(k);
    }
    Ok(g.fused_scalar(value, vec![(boxes, grad)], kinks)?)
}

/// `λ_con · L_con + λ_reg · L_reg`.
pub fn total_loss(l_con: f64, l_reg: f64, cfg: &LossConfig) -> Result<f64, LossError> {
    if !l_con.is_finite() {
        return Err(LossError::NonFinite("contrastive"));
    }
    if !l_reg.is_finite() {
        return Err(LossError::NonFinite("regression"));
    }
    Ok(cfg.lambda_con * l_con + cfg.lambda_reg * l_reg)
}

/// Softmax cross-entropy over `[N, C]` logits, normalized by the summed
/// weight of the targets (`class_weights[target]`, default 1).
pub fn softmax_cross_entropy(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Var, LossError> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(LossError::Net(NetError::Shape(format!("logits {s:?} for {} targets", targets.len()))));
    }
    let c = s[1];
    let weight = |t: usize| class_weights.map_or(1.0, |w| w[t]);
    let norm: f64 = targets.iter().map(|&t| weight(t)).sum();
    let mut value = 0.0;
    let mut grad = vec![0.0; targets.len() * c];
    if norm > 0.0 {
        for (i, (row, &t)) in g.value(logits).chunks_exact(c).zip(targets).enumerate() {
            let probs = softmax(row);
            let w = weight(t) / norm;
            value -= w * probs[t].max(f64::MIN_POSITIVE).ln();
            for k in 0..c {
                grad[i * c + k] = w * (probs[k] - f64::from(u8::from(k == t)));
            }
        }
    }
    if !value.is_finite() {
        return Err(LossError::NonFinite("classification"));
    }
    Ok(g.fused_scalar(value, vec![(logits, grad)], Vec::new())?)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean over rows of `-cos(p_i, z_i)` with `z` treated as a constant.
pub fn negative_cosine(g: &mut Graph, p: Var, z: &[f64]) -> Result<Var, LossError> {
    let s = g.shape(p).to_vec();
    if s.len() != 2 || z.len() != s[0] * s[1] {
        return Err(LossError::Net(NetError::Shape(format!("negative_cosine {s:?} vs {}", z.len()))));
    }
    let (n, d) = (s[0], s[1]);
    let mut value = 0.0;
    let mut grad = vec![0.0; n * d];
    for (i, (pr, zr)) in g.value(p).chunks_exact(d).zip(z.chunks_exact(d)).enumerate() {
        let np = dot(pr, pr).sqrt();
        let nz = dot(zr, zr).sqrt();
        if np == 0.0 || nz == 0.0 {
            return Err(LossError::Net(NetError::ZeroNorm));
        }
        let cos = dot(pr, zr) / (np * nz);
        value -= cos / n as f64;
        for k in 0..d {
            grad[i * d + k] = -(zr[k] / (np * nz) - cos * pr[k] / (np * np)) / n as f64;
        }
    }
    Ok(g.fused_scalar(value, vec![(p, grad)], Vec::new())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::netcore::gradcheck::check_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    /// Term-by-term evaluation straight from the definition.
    fn brute(z1: &EmbeddingSet, z2: &EmbeddingSet, cfg: &LossConfig) -> f64 {
        let mut terms = Vec::new();
        for q in 0..z1.len() {
            let Label::Proposal(i) = z1.labels[q] else { continue };
            let mut pos: Vec<&[f64]> = (0..z1.len()).filter(|&j| j != q && z1.labels[j] == Label::Proposal(i)).map(|j| z1.row(j)).collect();
            if cfg.positives_from_momentum {
                pos.extend((0..z2.len()).filter(|&j| z2.labels[j] == Label::Proposal(i)).map(|j| z2.row(j)));
            }
            let neg_ok = |l: Label| l != Label::Proposal(i) && l != Label::Ignore && !(cfg.exclude_background_negatives && l == Label::Background);
            let negs: Vec<&[f64]> = (0..z1.len())
                .filter(|&j| neg_ok(z1.labels[j]))
                .map(|j| z1.row(j))
                .chain((0..z2.len()).filter(|&j| neg_ok(z2.labels[j])).map(|j| z2.row(j)))
                .collect();
            for zp in pos {
                let e = (dot(z1.row(q), zp) / cfg.tau).exp();
                let s: f64 = negs.iter().map(|zn| (dot(z1.row(q), zn) / cfg.tau).exp()).sum();
                terms.push(-(e / (e + s)).ln());
            }
        }
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().sum::<f64>() / terms.len() as f64
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, props: usize) -> EmbeddingSet {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            rows.extend(unit(&v));
            labels.push(match rng.random_range(0..props + 2) {
                0 => Label::Background,
                1 => Label::Ignore,
                k => Label::Proposal(k - 2),
            });
        }
        EmbeddingSet::new(dim, rows, labels).unwrap()
    }

    #[test]
    fn scalar_examples() {
        let cfg = LossConfig::default();
        let z = EmbeddingSet::new(2, vec![1.0, 0.0, 1.0, 0.0], vec![Label::Proposal(0); 2]).unwrap();
        let empty = EmbeddingSet::new(2, vec![], vec![]).unwrap();
        assert_eq!(contrastive_forward(&z, &empty, &cfg).unwrap().loss, 0.0);

        let neg = EmbeddingSet::new(2, vec![0.0, 1.0], vec![Label::Background]).unwrap();
        let out = contrastive_forward(&z, &neg, &cfg).unwrap();
        assert!((out.loss - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((out.loss - 0.126928).abs() < 1e-6);
        assert_eq!(out.pairs, 2);
    }

    #[test]
    fn lonely_query_counted() {
        let z = EmbeddingSet::new(1, vec![1.0, -1.0], vec![Label::Proposal(0), Label::Proposal(1)]).unwrap();
        let out = contrastive_forward(&z, &z.clone(), &LossConfig::default()).unwrap();
        assert_eq!((out.loss, out.queries, out.queries_without_positive), (0.0, 2, 2));
        let cfg = LossConfig { positives_from_momentum: true, ..Default::default() };
        let out = contrastive_forward(&z, &z.clone(), &cfg).unwrap();
        assert_eq!(out.pairs, 2);
        assert!(out.loss > 0.0);
    }

    #[test]
    fn matches_brute_force_all_switches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..400 {
            let cfg = LossConfig {
                tau: rng.random_range(0.1..1.0),
                positives_from_momentum: case % 2 == 0,
                exclude_background_negatives: case % 4 < 2,
                ..Default::default()
            };
            let n1 = rng.random_range(0..=5);
            let z1 = random_set(&mut rng, n1, 3, 3);
            let z2 = random_set(&mut rng, 8 - n1, 3, 3);
            let got = contrastive_forward(&z1, &z2, &cfg).unwrap().loss;
            assert!((got - brute(&z1, &z2, &cfg)).abs() < 1e-9, "case {case}");
        }
    }

    #[test]
    fn contrastive_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..20 {
            let cfg = LossConfig { positives_from_momentum: case % 2 == 1, ..Default::default() };
            let z1 = random_set(&mut rng, 6, 4, 2);
            let z2 = random_set(&mut rng, 4, 4, 2);
            let labels = z1.labels.clone();
            let report = check_gradient(&[6, 4], &z1.rows, 1e-5, |g, x| {
                Ok(contrastive_loss(g, x, &labels, &z2, &cfg).map_err(|e| NetError::Shape(e.to_string()))?.0)
            })
            .unwrap();
            assert!(report.relative_error() < 1e-6, "case {case}: {}", report.relative_error());
        }
    }

    #[test]
    fn tau_monotone() {
        // With s_p > s_n each term is ln(1 + exp((s_n - s_p) / tau)), which
        // grows toward ln 2 as tau increases.
        let q = [1.0, 0.0];
        let p = unit(&[0.8, 0.6]);
        let n = unit(&[0.0, 1.0]);
        let z1 = EmbeddingSet::new(2, [q.to_vec(), p.clone()].concat(), vec![Label::Proposal(0); 2]).unwrap();
        let z2 = EmbeddingSet::new(2, n, vec![Label::Background]).unwrap();
        let losses: Vec<f64> = [0.1, 0.2, 0.5, 1.0, 2.0]
            .iter()
            .map(|&tau| contrastive_forward(&z1, &z2, &LossConfig { tau, ..Default::default() }).unwrap().loss)
            .collect();
        assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
        assert!(losses[4] < 2f64.ln());
    }

    #[test]
    fn iou_loss_examples() {
        let t = BBox::new(5.0, 5.0, 10.0, 10.0).unwrap();
        let (v, _, _) = iou_loss_single(&[5.0, 5.0, 10.0, 10.0], &t);
        assert_eq!(v, 0.0);
        // Half-overlapping equal boxes: IoU = 50 / 150 = 1/3.
        let p = [10.0, 5.0, 10.0, 10.0];
        let pb = BBox::new(10.0, 5.0, 10.0, 10.0).unwrap();
        assert!((iou(&pb, &t) - 1.0 / 3.0).abs() < 1e-12);
        let mut g = Graph::new();
        let boxes = g.variable(&[1, 4], p.to_vec()).unwrap();
        let l = iou_loss_node(&mut g, boxes, &[t]).unwrap();
        assert!((g.scalar(l) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn regression_zero_at_targets() {
        let refs = [BBox::new(8.0, 8.0, 16.0, 16.0).unwrap(), BBox::new(30.0, 20.0, 10.0, 20.0).unwrap()];
        let targets = [Some(BBox::new(10.0, 9.0, 12.0, 18.0).unwrap()), None];
        let d0 = encode_deltas(&refs[0], &targets[0].unwrap());
        let cfg = LossConfig {
            reg_terms: vec![RegTerm { kind: RegKind::L1Deltas, weight: 1.0 }, RegTerm { kind: RegKind::Iou, weight: 2.0 }],
            ..Default::default()
        };
        let mut g = Graph::new();
        let deltas = g.variable(&[2, 4], [d0.to_vec(), vec![0.3, -0.2, 0.1, 0.0]].concat()).unwrap();
        let (l, stats) = regression_loss(&mut g, deltas, &refs, &targets, &cfg).unwrap();
        assert!(g.scalar(l).abs() < 1e-12);
        assert_eq!(stats.positives, 1);

        let mut g = Graph::new();
        let deltas = g.variable(&[2, 4], vec![0.0; 8]).unwrap();
        let (l, stats) = regression_loss(&mut g, deltas, &refs, &[None, None], &cfg).unwrap();
        assert!(stats.no_positives && g.scalar(l) == 0.0);
    }

    #[test]
    fn regression_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = LossConfig {
            reg_terms: vec![RegTerm { kind: RegKind::L1Deltas, weight: 0.5 }, RegTerm { kind: RegKind::Iou, weight: 2.0 }],
            ..Default::default()
        };
        for case in 0..20 {
            let n = 4;
            let refs: Vec<BBox> = (0..n)
                .map(|_| BBox::new(rng.random_range(10.0..50.0), rng.random_range(10.0..50.0), rng.random_range(8.0..30.0), rng.random_range(8.0..30.0)).unwrap())
                .collect();
            let targets: Vec<Option<BBox>> = refs
                .iter()
                .enumerate()
                .map(|(i, r)| (i != 2).then(|| BBox::new(r.cx() + rng.random_range(-4.0..4.0), r.cy() + rng.random_range(-4.0..4.0), r.w() * rng.random_range(0.7..1.4), r.h() * rng.random_range(0.7..1.4)).unwrap()))
                .collect();
            let x0: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-0.3..0.3)).collect();
            let report = check_gradient(&[n, 4], &x0, 1e-6, |g, x| {
                Ok(regression_loss(g, x, &refs, &targets, &cfg).map_err(|e| NetError::Shape(e.to_string()))?.0)
            })
            .unwrap();
            assert!(report.passes(1e-4), "case {case}: {report:?}");
        }
    }

    #[test]
    fn cross_entropy_and_cosine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = [0, 2, 1, 2];
        let weights = [0.1, 1.0, 1.0];
        let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = check_gradient(&[4, 3], &x0, 1e-5, |g, x| {
            softmax_cross_entropy(g, x, &targets, Some(&weights)).map_err(|e| NetError::Shape(e.to_string()))
        })
        .unwrap();
        assert!(r.passes(1e-6), "{r:?}");

        let z: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = check_gradient(&[3, 4], &x0, 1e-5, |g, x| {
            negative_cosine(g, x, &z).map_err(|e| NetError::Shape(e.to_string()))
        })
        .unwrap();
        assert!(r.passes(1e-6), "{r:?}");

        let mut g = Graph::new();
        let p = g.variable(&[1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let l = negative_cosine(&mut g, p, &[0.4, -0.8, 1.8]).unwrap();
        assert!((g.scalar(l) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(0.5, 0.25, &cfg).unwrap(), 0.75);
        let only_reg = LossConfig { lambda_con: 0.0, ..Default::default() };
        assert_eq!(total_loss(0.5, 0.25, &only_reg).unwrap(), 0.25);
        let only_con = LossConfig { lambda_reg: 0.0, ..Default::default() };
        assert_eq!(total_loss(0.5, 0.25, &only_con).unwrap(), 0.5);
        assert!(matches!(total_loss(f64::NAN, 0.0, &cfg), Err(LossError::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z1 = random_set(&mut rng, 5, 3, 2);
            let z2 = random_set(&mut rng, 3, 3, 2);
            let cfg = LossConfig::default();
            let base = contrastive_forward(&z1, &z2, &cfg).unwrap().loss;
            prop_assert!(base >= 0.0);
            let mut order: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let rows = order.iter().flat_map(|&i| z1.row(i).to_vec()).collect();
            let labels = order.iter().map(|&i| z1.labels[i]).collect();
            let shuffled = EmbeddingSet::new(3, rows, labels).unwrap();
            let got = contrastive_forward(&shuffled, &z2, &cfg).unwrap().loss;
            prop_assert!((got - base).abs() < 1e-9);
        }
    }
}
