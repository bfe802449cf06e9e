//! Axis-aligned box geometry: IoU, greedy NMS, delta encoding and clipping.
//!
//! Boxes are stored center-format (`cx, cy, w, h`) in pixels. Corner format
//! is only used when reading or writing files.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box (cx={cx}, cy={cy}, w={w}, h={h}): sides must be positive and finite")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("box lies entirely outside the {width}x{height} image")]
    EmptyBox { width: f64, height: f64 },
}

/// Center-format box in pixel units. `w > 0`, `h > 0`, all fields finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let finite = cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::InvalidBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new((x0 + x1) * 0.5, (y0 + y1) * 0.5, x1 - x0, y1 - y0)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn x0(&self) -> f64 {
        self.cx - self.w * 0.5
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h * 0.5
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w * 0.5
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h * 0.5
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x0(), self.y0(), self.x1(), self.y1()]
    }

    pub fn min_side(&self) -> f64 {
        self.w.min(self.h)
    }

    pub fn max_side(&self) -> f64 {
        self.w.max(self.h)
    }

    /// Point containment, strict on every edge.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x0() && x < self.x1() && y > self.y0() && y < self.y1()
    }

    /// Whether `other` lies inside `self` (edges may touch).
    pub fn contains_box(&self, other: &BBox) -> bool {
        const SLACK: f64 = 1e-9;
        other.x0() >= self.x0() - SLACK
            && other.y0() >= self.y0() - SLACK
            && other.x1() <= self.x1() + SLACK
            && other.y1() <= self.y1() + SLACK
    }

    /// Smallest box covering both.
    pub fn union_bound(&self, other: &BBox) -> BBox {
        BBox::from_corners(
            self.x0().min(other.x0()),
            self.y0().min(other.y0()),
            self.x1().max(other.x1()),
            self.y1().max(other.y1()),
        )
        .expect("union of valid boxes is valid")
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [x0, y0, x1, y1] = self.corners();
        write!(f, "[{x0:.2}, {y0:.2}, {x1:.2}, {y1:.2}]")
    }
}

/// Assignment label attached to a prediction.
///
/// `Proposal(i)` holds a zero-based index into the image's proposal list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Background,
    Ignore,
    Proposal(usize),
}

impl Label {
    pub fn proposal(&self) -> Option<usize> {
        match *self {
            Label::Proposal(i) => Some(i),
            _ => None,
        }
    }

    pub fn is_positive(&self) -> bool {
        matches!(self, Label::Proposal(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    inter / (a.area() + b.area() - inter)
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score (lower index first on equal
/// scores); a candidate is suppressed when its IoU with an already-kept box
/// exceeds `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| score_order(boxes[i].score, boxes[j].score).then(i.cmp(&j)));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k].bbox, &boxes[i].bbox) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

fn score_order(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Standard box parametrization relative to a reference box.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    [
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        (target.w / anchor.w).ln(),
        (target.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(anchor: &BBox, deltas: [f64; 4]) -> Result<BBox, GeometryError> {
    BBox::new(
        anchor.cx + deltas[0] * anchor.w,
        anchor.cy + deltas[1] * anchor.h,
        anchor.w * deltas[2].exp(),
        anchor.h * deltas[3].exp(),
    )
}

/// Clamp a box to `[0, width] x [0, height]`.
pub fn clip_to_image(b: &BBox, width: f64, height: f64) -> Result<BBox, GeometryError> {
    let x0 = b.x0().clamp(0.0, width);
    let x1 = b.x1().clamp(0.0, width);
    let y0 = b.y0().clamp(0.0, height);
    let y1 = b.y1().clamp(0.0, height);
    if x1 <= x0 || y1 <= y0 {
        return Err(GeometryError::EmptyBox { width, height });
    }
    if x0 == b.x0() && x1 == b.x1() && y0 == b.y0() && y1 == b.y1() {
        return Ok(*b);
    }
    BBox::from_corners(x0, y0, x1, y1)
}
