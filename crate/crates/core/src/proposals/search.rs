//! Hierarchical grouping of segments into object candidates.

use std::collections::{BTreeMap, BTreeSet};

use super::segment::SegmentLabelMap;
use crate::geometry::BBox;
use crate::image::Image;

pub const HIST_BINS: usize = 24;

#[derive(Debug, Clone)]
pub struct Region {
    pub id: usize,
    pub pixel_count: usize,
    /// Pixel extents as `[x_min, y_min, x_max, y_max]`, inclusive.
    extent: [usize; 4],
    /// Per-channel normalized color histogram, channel-major.
    pub histogram: Vec<f64>,
    pub neighbors: BTreeSet<usize>,
}

impl Region {
    pub fn bbox(&self) -> BBox {
        let [x0, y0, x1, y1] = self.extent;
        BBox::from_corners(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
            .expect("non-empty pixel extent")
    }

    fn extent_area(a: &[usize; 4]) -> usize {
        (a[2] + 1 - a[0]) * (a[3] + 1 - a[1])
    }
}

/// Build the initial regions of a segmentation, with 4-adjacency neighbors.
pub fn initial_regions(image: &Image, seg: &SegmentLabelMap) -> Vec<Region> {
    let n = seg.region_count;
    let mut regions: Vec<Region> = (0..n)
        .map(|id| Region {
            id,
            pixel_count: 0,
            extent: [usize::MAX, usize::MAX, 0, 0],
            histogram: vec![0.0; 3 * HIST_BINS],
            neighbors: BTreeSet::new(),
        })
        .collect();

    let w = seg.width;
    for y in 0..seg.height {
        for x in 0..w {
            let l = seg.labels[y * w + x];
            let r = &mut regions[l];
            r.pixel_count += 1;
            r.extent[0] = r.extent[0].min(x);
            r.extent[1] = r.extent[1].min(y);
            r.extent[2] = r.extent[2].max(x);
            r.extent[3] = r.extent[3].max(y);
            let px = image.pixel(x, y);
            for (c, &v) in px.iter().enumerate() {
                let bin = ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                r.histogram[c * HIST_BINS + bin] += 1.0;
            }
            if x + 1 < w {
                let m = seg.labels[y * w + x + 1];
                if m != l {
                    regions[l].neighbors.insert(m);
                    regions[m].neighbors.insert(l);
                }
            }
            if y + 1 < seg.height {
                let m = seg.labels[(y + 1) * w + x];
                if m != l {
                    regions[l].neighbors.insert(m);
                    regions[m].neighbors.insert(l);
                }
            }
        }
    }
    for r in &mut regions {
        let count = r.pixel_count as f64;
        r.histogram.iter_mut().for_each(|v| *v /= count);
    }
    regions
}

fn similarity(a: &Region, b: &Region, image_area: f64) -> f64 {
    let color: f64 = a
        .histogram
        .iter()
        .zip(&b.histogram)
        .map(|(x, y)| x.min(*y))
        .sum::<f64>()
        / 3.0;
    let joint = (a.pixel_count + b.pixel_count) as f64;
    let size = 1.0 - joint / image_area;
    let bound = merged_extent(&a.extent, &b.extent);
    let fill = 1.0 - (Region::extent_area(&bound) as f64 - joint) / image_area;
    (color + size + fill) / 3.0
}

fn merged_extent(a: &[usize; 4], b: &[usize; 4]) -> [usize; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

/// The full binary merge tree. Nodes `0..r` are the initial regions; every
/// later node `t` was created by merging `children[t]`.
#[derive(Debug, Clone)]
pub struct MergeTree {
    pub boxes: Vec<BBox>,
    pub children: Vec<Option<(usize, usize)>>,
    pub initial_count: usize,
}

/// Greedily merge the most similar adjacent pair until one region remains.
pub fn merge_hierarchy(image: &Image, seg: &SegmentLabelMap) -> MergeTree {
    let mut regions = initial_regions(image, seg);
    let initial_count = regions.len();
    let image_area = (seg.width * seg.height) as f64;

    let mut boxes: Vec<BBox> = regions.iter().map(Region::bbox).collect();
    let mut children = vec![None; initial_count];
    let mut alive: BTreeMap<usize, Region> = regions.drain(..).map(|r| (r.id, r)).collect();

    let mut sims: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&i, r) in &alive {
        for &j in r.neighbors.range(i + 1..) {
            sims.insert((i, j), similarity(r, &alive[&j], image_area));
        }
    }

    while alive.len() > 1 {
        // Highest similarity; the smallest pair key wins ties.
        let Some((&(i, j), _)) = sims
            .iter()
            .fold(None, |best: Option<(&(usize, usize), &f64)>, cur| match best {
                Some(b) if *b.1 >= *cur.1 => Some(b),
                _ => Some(cur),
            })
        else {
            // Disconnected adjacency: should not occur on a grid segmentation.
            break;
        };
        let a = alive.remove(&i).expect("live region");
        let b = alive.remove(&j).expect("live region");
        let t = boxes.len();
        let total = (a.pixel_count + b.pixel_count) as f64;
        let histogram = a
            .histogram
            .iter()
            .zip(&b.histogram)
            .map(|(x, y)| (x * a.pixel_count as f64 + y * b.pixel_count as f64) / total)
            .collect();
        let mut neighbors: BTreeSet<usize> = a.neighbors.union(&b.neighbors).copied().collect();
        neighbors.remove(&i);
        neighbors.remove(&j);
        let merged = Region {
            id: t,
            pixel_count: a.pixel_count + b.pixel_count,
            extent: merged_extent(&a.extent, &b.extent),
            histogram,
            neighbors,
        };

        sims.retain(|&(p, q), _| p != i && p != j && q != i && q != j);
        for &n in &merged.neighbors {
            let nb = alive.get_mut(&n).expect("neighbor alive");
            nb.neighbors.remove(&i);
            nb.neighbors.remove(&j);
            nb.neighbors.insert(t);
            // n < t always: new ids are the largest.
            sims.insert((n, t), similarity(nb, &merged, image_area));
        }
        boxes.push(merged.bbox());
        children.push(Some((i, j)));
        alive.insert(t, merged);
    }

    MergeTree { boxes, children, initial_count }
}
