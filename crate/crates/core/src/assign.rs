//! Target assignment for the three detector flavors, prediction sampling and
//! k-means pseudo classes.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{iou, BBox, Label};

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("invalid thresholds: need 0 <= neg ({neg}) <= pos ({pos}) <= 1")]
    Thresholds { pos: f64, neg: f64 },
    #[error("{predictions} predictions cannot cover {proposals} proposals one-to-one")]
    Infeasible { predictions: usize, proposals: usize },
    #[error("k-means: {0}")]
    KMeans(String),
    #[error("input shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<Label>,
    /// Proposal box for positive entries.
    pub matched: Vec<Option<BBox>>,
}

impl AssignmentResult {
    pub fn background(n: usize) -> Self {
        Self { labels: vec![Label::Background; n], matched: vec![None; n] }
    }

    fn from_labels(labels: Vec<Label>, proposals: &[BBox]) -> Self {
        let matched = labels.iter().map(|l| l.proposal().map(|i| proposals[i])).collect();
        Self { labels, matched }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].is_positive()).collect()
    }

    pub fn positive_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouAssignConfig {
    pub pos_thr: f64,
    pub neg_thr: f64,
    /// Force each proposal's best candidate positive.
    pub low_quality_rescue: bool,
}

impl Default for IouAssignConfig {
    fn default() -> Self {
        Self { pos_thr: 0.5, neg_thr: 0.4, low_quality_rescue: true }
    }
}

/// IoU-threshold assignment of candidate boxes (anchors or predictions).
pub fn assign_iou(candidates: &[BBox], proposals: &[BBox], cfg: &IouAssignConfig) -> Result<AssignmentResult, AssignError> {
    let (pos, neg) = (cfg.pos_thr, cfg.neg_thr);
    if !(0.0 <= neg && neg <= pos && pos <= 1.0) {
        return Err(AssignError::Thresholds { pos, neg });
    }
    if proposals.is_empty() {
        return Ok(AssignmentResult::background(candidates.len()));
    }
    let np = proposals.len();
    let ious: Vec<f64> = candidates
        .iter()
        .flat_map(|c| proposals.iter().map(move |p| iou(c, p)))
        .collect();

    let mut labels: Vec<Label> = ious
        .chunks_exact(np)
        .map(|row| {
            let (best, v) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            if v >= pos {
                Label::Proposal(best)
            } else if v < neg {
                Label::Background
            } else {
                Label::Ignore
            }
        })
        .collect();

    if cfg.low_quality_rescue && !candidates.is_empty() {
        // Reverse order so the lower proposal index wins a shared candidate.
        for j in (0..np).rev() {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..candidates.len() {
                let v = ious[c * np + j];
                if v > best.1 {
                    best = (c, v);
                }
            }
            if best.1 > 0.0 {
                labels[best.0] = Label::Proposal(j);
            }
        }
    }
    Ok(AssignmentResult::from_labels(labels, proposals))
}

/// A grid location on pyramid level `level`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub level: usize,
}

/// Half-open `[lo, hi)` ranges of proposal max side, one per level.
pub fn default_scale_ranges(split: f64) -> Vec<(f64, f64)> {
    vec![(0.0, split), (split, f64::INFINITY)]
}

/// Center-sampling assignment for point-based heads.
pub fn assign_center(points: &[GridPoint], proposals: &[BBox], scale_ranges: &[(f64, f64)]) -> AssignmentResult {
    let labels = points
        .iter()
        .map(|pt| {
            let Some(&(lo, hi)) = scale_ranges.get(pt.level) else {
                return Label::Background;
            };
            let mut best: Option<(usize, f64)> = None;
            for (j, p) in proposals.iter().enumerate() {
                let s = p.max_side();
                if s < lo || s >= hi || !p.contains_point(pt.x, pt.y) {
                    continue;
                }
                if best.is_none_or(|(_, a)| p.area() < a) {
                    best = Some((j, p.area()));
                }
            }
            best.map_or(Label::Background, |(j, _)| Label::Proposal(j))
        })
        .collect();
    AssignmentResult::from_labels(labels, proposals)
}

/// Minimum-cost assignment of every row to a distinct column of a row-major
/// `rows x cols` matrix (`rows <= cols`). Returns the column of each row.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>, AssignError> {
    if cost.len() != rows * cols {
        return Err(AssignError::Shape(format!("cost has {} entries, expected {rows}x{cols}", cost.len())));
    }
    if rows > cols {
        return Err(AssignError::Infeasible { predictions: cols, proposals: rows });
    }
    if rows == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting paths with potentials, 1-based with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub l1: f64,
    pub iou: f64,
    pub cls: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { l1: 5.0, iou: 2.0, cls: 1.0 }
    }
}

/// Pseudo-class scores for set-prediction matching: per-prediction class
/// probabilities (`[N, classes]` row-major) and per-proposal class ids.
#[derive(Debug, Clone, Copy)]
pub struct ClassCost<'a> {
    pub probs: &'a [f64],
    pub classes: usize,
    pub proposal_class: &'a [usize],
}

/// Matching cost between one prediction and one proposal. L1 is taken on
/// `(cx, cy, w, h)` normalized by the image size.
pub fn match_cost(pred: &BBox, proposal: &BBox, image_size: (f64, f64), w: &MatchWeights) -> f64 {
    let (iw, ih) = image_size;
    let l1 = ((pred.cx() - proposal.cx()) / iw).abs()
        + ((pred.cy() - proposal.cy()) / ih).abs()
        + ((pred.w() - proposal.w()) / iw).abs()
        + ((pred.h() - proposal.h()) / ih).abs();
    w.l1 * l1 + w.iou * (1.0 - iou(pred, proposal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HungarianAssignment {
    pub result: AssignmentResult,
    pub total_cost: f64,
}

/// One-to-one bipartite assignment of predictions to proposals.
pub fn assign_hungarian(
    preds: &[BBox],
    proposals: &[BBox],
    class_cost: Option<ClassCost<'_>>,
    image_size: (f64, f64),
    weights: &MatchWeights,
) -> Result<HungarianAssignment, AssignError> {
    let (n, m) = (preds.len(), proposals.len());
    if n < m {
        return Err(AssignError::Infeasible { predictions: n, proposals: m });
    }
    if let Some(cc) = &class_cost {
        if cc.probs.len() != n * cc.classes || cc.proposal_class.len() != m {
            return Err(AssignError::Shape("class scores do not match predictions/proposals".into()));
        }
    }
    // Rows are proposals so the solver can leave surplus predictions unmatched.
    let mut cost = vec![0.0; m * n];
    for (j, p) in proposals.iter().enumerate() {
        for (i, b) in preds.iter().enumerate() {
            let mut c = match_cost(b, p, image_size, weights);
            if let Some(cc) = &class_cost {
                c -= weights.cls * cc.probs[i * cc.classes + cc.proposal_class[j]];
            }
            cost[j * n + i] = c;
        }
    }
    let cols = hungarian(&cost, m, n)?;
    let mut labels = vec![Label::Background; n];
    let mut total = 0.0;
    for (j, &i) in cols.iter().enumerate() {
        labels[i] = Label::Proposal(j);
        total += cost[j * n + i];
    }
    Ok(HungarianAssignment { result: AssignmentResult::from_labels(labels, proposals), total_cost: total })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster id of each row, the pseudo-class map.
    pub assignments: Vec<usize>,
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Inertia after each assignment pass.
    pub inertia: Vec<f64>,
}

impl KMeansResult {
    /// Nearest centroid of a new feature vector.
    pub fn predict(&self, x: &[f64]) -> usize {
        nearest(x, &self.centroids, self.dim).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    centroids
        .chunks_exact(dim)
        .enumerate()
        .map(|(c, cen)| (c, sq_dist(x, cen)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
}

/// Lloyd's algorithm with k-means++ seeding on row-major `features`.
pub fn kmeans(features: &[f64], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult, AssignError> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(AssignError::Shape(format!("{} values do not form rows of {dim}", features.len())));
    }
    let n = features.len() / dim;
    if k == 0 || k > n {
        return Err(AssignError::KMeans(format!("k = {k} with {n} rows")));
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    chosen = i;
                    break;
                }
                t -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut total = 0.0;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, d) = nearest(row(i), &centroids, dim);
            total += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeansResult { assignments, centroids, dim, inertia })
}

/// Positives first (a uniform subset if they exceed the cap), then uniformly
/// sampled background entries up to `max_count`. Ignored entries never appear.
pub fn sample_predictions<R: Rng + ?Sized>(assigned: &AssignmentResult, max_count: usize, rng: &mut R) -> Vec<usize> {
    sample_balanced(assigned, max_count, 1.0, rng)
}

/// Up to `max_count` indices: a random subset of at most
/// `floor(positive_fraction * max_count)` positives, then background
/// predictions in the remaining slots. Ignored predictions are never drawn.
pub fn sample_balanced<R: Rng + ?Sized>(
    assigned: &AssignmentResult,
    max_count: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> Vec<usize> {
    let positives = assigned.positives();
    let negatives: Vec<usize> = (0..assigned.len())
        .filter(|&i| assigned.labels[i] == Label::Background)
        .collect();
    let pos_cap = (positive_fraction * max_count as f64).floor() as usize;
    let mut out = pick(&positives, pos_cap, rng);
    let room = max_count - out.len();
    out.extend(pick(&negatives, room, rng));
    out
}

fn pick<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if n >= pool.len() {
        return pool.to_vec();
    }
    let mut idx: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    /// Oracle: every label decided independently from the full IoU table.
    fn brute_assign_iou(c: &[BBox], p: &[BBox], cfg: &IouAssignConfig) -> Vec<Label> {
        if p.is_empty() {
            return vec![Label::Background; c.len()];
        }
        (0..c.len())
            .map(|ci| {
                if cfg.low_quality_rescue {
                    for (j, pj) in p.iter().enumerate() {
                        let col: Vec<f64> = c.iter().map(|x| iou(x, pj)).collect();
                        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let first = col.iter().position(|&v| v == max).unwrap();
                        if first == ci && max > 0.0 {
                            return Label::Proposal(j);
                        }
                    }
                }
                let row: Vec<f64> = p.iter().map(|x| iou(&c[ci], x)).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let j = row.iter().position(|&v| v == max).unwrap();
                if max >= cfg.pos_thr {
                    Label::Proposal(j)
                } else if max < cfg.neg_thr {
                    Label::Background
                } else {
                    Label::Ignore
                }
            })
            .collect()
    }

    fn brute_min_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
            if r == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[r * cols + c] + rec(cost, rows, cols, r + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, rows, cols, 0, &mut vec![false; cols])
    }

    #[test]
    fn iou_label_examples() {
        let p = [b(50.0, 50.0, 10.0, 10.0), b(10.0, 10.0, 10.0, 10.0), b(30.0, 30.0, 10.0, 10.0), b(70.0, 70.0, 10.0, 10.0)];
        // Shifted box with IoU 0.6 against p3.
        let c = b(70.0 + 10.0 / 4.0, 70.0, 10.0, 10.0);
        assert!((iou(&c, &p[3]) - 0.6).abs() < 1e-12);
        let cfg = IouAssignConfig { low_quality_rescue: false, ..Default::default() };
        let r = assign_iou(&[c], &p, &cfg).unwrap();
        assert_eq!(r.labels, vec![Label::Proposal(3)]);
        assert_eq!(r.matched[0], Some(p[3]));

        let far = b(100.0, 100.0, 4.0, 4.0);
        let r = assign_iou(&[far], &p, &cfg).unwrap();
        assert_eq!(r.labels, vec![Label::Background]);
    }

    #[test]
    fn iou_ignore_band_and_rescue() {
        let p = [b(10.0, 10.0, 10.0, 10.0)];
        let c = [b(13.0, 10.0, 10.0, 10.0), b(40.0, 40.0, 10.0, 10.0)];
        // 7/13 > .5 would be positive; shrink overlap into the ignore band.
        let c0 = b(12.5, 10.0, 10.0, 10.0); // IoU 7.5/12.5 = 0.6
        let c1 = b(13.5, 10.0, 10.0, 10.0); // 6.5/13.5 = 0.48
        let no = IouAssignConfig { low_quality_rescue: false, ..Default::default() };
        assert_eq!(assign_iou(&[c1], &p, &no).unwrap().labels, vec![Label::Ignore]);
        assert_eq!(assign_iou(&[c1], &p, &IouAssignConfig::default()).unwrap().labels, vec![Label::Proposal(0)]);
        assert_eq!(assign_iou(&[c0, c[1]], &p, &no).unwrap().labels, vec![Label::Proposal(0), Label::Background]);
    }

    #[test]
    fn empty_proposals_all_background() {
        let r = assign_iou(&[b(5.0, 5.0, 2.0, 2.0)], &[], &IouAssignConfig::default()).unwrap();
        assert_eq!(r.labels, vec![Label::Background]);
    }

    #[test]
    fn bad_thresholds() {
        let cfg = IouAssignConfig { pos_thr: 0.3, neg_thr: 0.4, low_quality_rescue: false };
        assert!(assign_iou(&[], &[], &cfg).is_err());
    }

    #[test]
    fn center_examples() {
        let outer = b(32.0, 32.0, 20.0, 20.0);
        let inner = b(32.0, 32.0, 10.0, 10.0);
        let ranges = default_scale_ranges(24.0);
        let pts = [
            GridPoint { x: 32.0, y: 32.0, level: 0 },
            GridPoint { x: 60.0, y: 60.0, level: 0 },
            GridPoint { x: 40.0, y: 32.0, level: 0 },
            GridPoint { x: 32.0, y: 32.0, level: 1 },
        ];
        let r = assign_center(&pts, &[outer, inner], &ranges);
        assert_eq!(r.labels, vec![Label::Proposal(1), Label::Background, Label::Proposal(0), Label::Background]);
        let big = b(32.0, 32.0, 40.0, 30.0);
        let r = assign_center(&pts[3..], &[big], &ranges);
        assert_eq!(r.labels, vec![Label::Proposal(0)]);
    }

    #[test]
    fn hungarian_examples() {
        let cols = hungarian(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(cols, vec![0, 1]);
        let props = [b(10.0, 10.0, 8.0, 8.0), b(40.0, 30.0, 12.0, 20.0)];
        let r = assign_hungarian(&props, &props, None, (64.0, 64.0), &MatchWeights::default()).unwrap();
        assert_eq!(r.result.labels, vec![Label::Proposal(0), Label::Proposal(1)]);
        assert_eq!(r.total_cost, 0.0);
        assert!(matches!(
            assign_hungarian(&props[..1], &props, None, (64.0, 64.0), &MatchWeights::default()),
            Err(AssignError::Infeasible { .. })
        ));
    }

    #[test]
    fn hungarian_6x4_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let cost: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..10.0)).collect();
            let cols = hungarian(&cost, 4, 6).unwrap();
            let total: f64 = cols.iter().enumerate().map(|(r, &c)| cost[r * 6 + c]).sum();
            assert!((total - brute_min_cost(&cost, 4, 6)).abs() < 1e-9);
            let mut seen = cols.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 4);
        }
    }

    #[test]
    fn kmeans_two_blobs() {
        let pts = [0.0, 0.0, 0.1, 0.2, 0.2, 0.0, 0.1, 0.1, 5.0, 5.0, 5.1, 5.2, 5.2, 5.0, 4.9, 5.1];
        let r = kmeans(&pts, 2, 2, 1, 50).unwrap();
        let a = &r.assignments;
        assert!(a[..4].iter().all(|&x| x == a[0]));
        assert!(a[4..].iter().all(|&x| x == a[4]));
        assert_ne!(a[0], a[4]);
        assert!(r.inertia.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn kmeans_k_equals_rows() {
        let pts = [0.0, 1.0, 4.0, 9.0, -3.0];
        let r = kmeans(&pts, 1, 5, 2, 10).unwrap();
        assert_eq!(*r.inertia.last().unwrap(), 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert!(kmeans(&pts, 1, 6, 2, 10).is_err());
        assert!(kmeans(&pts, 1, 0, 2, 10).is_err());
    }

    #[test]
    fn sampling_examples() {
        let mut labels = vec![Label::Background; 10];
        for i in [1, 4, 8] {
            labels[i] = Label::Proposal(0);
        }
        let a = AssignmentResult { matched: vec![None; 10], labels };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_predictions(&a, 4, &mut rng);
        assert_eq!(&s[..3], &[1, 4, 8]);
        assert_eq!(s.len(), 4);
        assert_eq!(a.labels[s[3]], Label::Background);
        let s = sample_predictions(&a, 2, &mut rng);
        assert!(s.len() == 2 && s.iter().all(|&i| a.labels[i].is_positive()));
        let s = sample_predictions(&a, 20, &mut rng);
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn balanced_sampling_caps_positives() {
        let mut labels = vec![Label::Background; 12];
        for i in 0..6 {
            labels[i] = Label::Proposal(i);
        }
        labels[11] = Label::Ignore;
        let a = AssignmentResult { matched: vec![None; 12], labels };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_balanced(&a, 8, 0.25, &mut rng);
        assert_eq!(s.len(), 7);
        assert_eq!(s.iter().filter(|&&i| a.labels[i].is_positive()).count(), 2);
        assert!(!s.contains(&11));
        // Few positives leave the slots to background.
        let s = sample_balanced(&a, 4, 0.25, &mut rng);
        assert_eq!(s.iter().filter(|&&i| a.labels[i].is_positive()).count(), 1);
        assert_eq!(s.len(), 4);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..64.0f64, 0.0..64.0f64, 1.0..32.0f64, 1.0..32.0f64).prop_map(|(x, y, w, h)| b(x, y, w, h))
    }

    proptest! {
        #[test]
        fn assign_iou_matches_oracle(
            c in prop::collection::vec(arb_box(), 0..64),
            p in prop::collection::vec(arb_box(), 0..16),
            rescue in any::<bool>(),
        ) {
            let cfg = IouAssignConfig { low_quality_rescue: rescue, ..Default::default() };
            prop_assert_eq!(assign_iou(&c, &p, &cfg).unwrap().labels, brute_assign_iou(&c, &p, &cfg));
        }

        #[test]
        fn hungarian_matches_exhaustive(rows in 0usize..6, extra in 0usize..3, seed in any::<u64>()) {
            let cols = rows + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
            let assign = hungarian(&cost, rows, cols).unwrap();
            let total: f64 = assign.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum();
            prop_assert!((total - brute_min_cost(&cost, rows, cols)).abs() < 1e-9);
        }

        #[test]
        fn center_permutation_covariant(
            p in prop::collection::vec(arb_box(), 1..8),
            seed in any::<u64>(),
        ) {
            let pts: Vec<GridPoint> = (0..64)
                .map(|i| GridPoint { x: (i % 8) as f64 * 8.0 + 4.0, y: (i / 8) as f64 * 8.0 + 4.0, level: i % 2 })
                .collect();
            let ranges = default_scale_ranges(24.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..p.len()).collect();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            // Area ties would make the winner order-dependent.
            let mut areas: Vec<u64> = p.iter().map(|x| x.area().to_bits()).collect();
            areas.sort();
            areas.dedup();
            prop_assume!(areas.len() == p.len());
            let permuted: Vec<BBox> = perm.iter().map(|&i| p[i]).collect();
            let a = assign_center(&pts, &p, &ranges);
            let b = assign_center(&pts, &permuted, &ranges);
            for (la, lb) in a.labels.iter().zip(&b.labels) {
                prop_assert_eq!(la.proposal(), lb.proposal().map(|j| perm[j]));
            }
        }

        #[test]
        fn sampling_keeps_positives_first(n in 1usize..60, cap in 1usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<Label> = (0..n)
                .map(|_| match rng.random_range(0..3) {
                    0 => Label::Proposal(0),
                    1 => Label::Ignore,
                    _ => Label::Background,
                })
                .collect();
            let a = AssignmentResult { matched: vec![None; n], labels };
            let s = sample_predictions(&a, cap, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(s.len() <= cap);
            prop_assert!(s.iter().all(|&i| a.labels[i] != Label::Ignore));
            let kept_neg = s.iter().any(|&i| a.labels[i] == Label::Background);
            if kept_neg {
                prop_assert_eq!(s.iter().filter(|&&i| a.labels[i].is_positive()).count(), a.positive_count());
            }
            let first_neg = s.iter().position(|&i| !a.labels[i].is_positive()).unwrap_or(s.len());
            prop_assert!(s[first_neg..].iter().all(|&i| !a.labels[i].is_positive()));
        }
    }
}
