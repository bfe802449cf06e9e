//! Graph-based over-segmentation on the 8-connected pixel grid.

use std::collections::VecDeque;

use crate::image::Image;

/// Per-pixel region ids, contiguous from zero. Every region is 4-connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub region_count: usize,
}

impl SegmentLabelMap {
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(sizes: Vec<usize>) -> Self {
        let n = sizes.len();
        Self {
            parent: (0..n).collect(),
            size: sizes,
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f64) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = self.internal[big].max(self.internal[small]).max(weight);
        big
    }
}

struct Edge {
    a: usize,
    b: usize,
    w: f64,
}

fn color_distance(img: &Image, p: usize, q: usize) -> f64 {
    let d = img.data();
    let mut acc = 0.0f64;
    for c in 0..3 {
        let diff = 255.0 * (d[p * 3 + c] as f64 - d[q * 3 + c] as f64);
        acc += diff * diff;
    }
    acc.sqrt()
}

fn grid_edges(img: &Image, eight: bool) -> Vec<Edge> {
    let (w, h) = (img.width(), img.height());
    let mut edges = Vec::with_capacity(w * h * if eight { 4 } else { 2 });
    let mut push = |p: usize, q: usize| edges.push(Edge { a: p, b: q, w: color_distance(img, p, q) });
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                push(p, p + 1);
            }
            if y + 1 < h {
                push(p, p + w);
                if eight {
                    if x + 1 < w {
                        push(p, p + w + 1);
                    }
                    if x > 0 {
                        push(p, p + w - 1);
                    }
                }
            }
        }
    }
    // Stable sort keeps equal-weight edges in raster order.
    edges.sort_by(|e, f| e.w.partial_cmp(&f.w).expect("finite edge weights"));
    edges
}

/// Segment `image` by Kruskal-style merging of 8-connected pixel edges.
///
/// Two components merge across an edge of weight `w` when
/// `w <= min(Int(C1) + k/|C1|, Int(C2) + k/|C2|)`. The result is split into
/// 4-connected pieces, then pieces smaller than `min_region_size` are absorbed
/// along their cheapest 4-connected boundary edge.
pub fn felzenszwalb_segment(image: &Image, k: f64, min_region_size: usize) -> SegmentLabelMap {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    if n == 0 {
        return SegmentLabelMap { width: w, height: h, labels: Vec::new(), region_count: 0 };
    }

    let mut sets = DisjointSets::new(vec![1; n]);
    for e in grid_edges(image, true) {
        let (ra, rb) = (sets.find(e.a), sets.find(e.b));
        if ra == rb {
            continue;
        }
        let ta = sets.internal[ra] + k / sets.size[ra] as f64;
        let tb = sets.internal[rb] + k / sets.size[rb] as f64;
        if e.w <= ta.min(tb) {
            sets.union(ra, rb, e.w);
        }
    }
    let roots: Vec<usize> = (0..n).map(|p| sets.find(p)).collect();

    // Diagonal-only contacts may have joined pixels; split into 4-connected pieces.
    let (pieces, piece_count) = four_connected_pieces(w, h, |p| roots[p]);

    let mut sizes = vec![0usize; piece_count];
    for &p in &pieces {
        sizes[p] += 1;
    }
    let mut sets = DisjointSets::new(sizes);
    for e in grid_edges(image, false) {
        let (ra, rb) = (sets.find(pieces[e.a]), sets.find(pieces[e.b]));
        if ra != rb && (sets.size[ra] < min_region_size || sets.size[rb] < min_region_size) {
            sets.union(ra, rb, e.w);
        }
    }

    let mut remap = vec![usize::MAX; piece_count];
    let mut next = 0;
    let labels = pieces
        .iter()
        .map(|&p| {
            let r = sets.find(p);
            if remap[r] == usize::MAX {
                remap[r] = next;
                next += 1;
            }
            remap[r]
        })
        .collect();
    SegmentLabelMap { width: w, height: h, labels, region_count: next }
}

/// Label 4-connected components of equal `key`. Ids follow raster order.
pub(crate) fn four_connected_pieces(
    w: usize,
    h: usize,
    key: impl Fn(usize) -> usize,
) -> (Vec<usize>, usize) {
    let n = w * h;
    let mut out = vec![usize::MAX; n];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if out[start] != usize::MAX {
            continue;
        }
        let k0 = key(start);
        out[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if out[q] == usize::MAX && key(q) == k0 {
                    out[q] = count;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        count += 1;
    }
    (out, count)
}
