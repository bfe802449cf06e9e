//! Unsupervised object proposals: over-segmentation, hierarchical grouping
//! and size/aspect/NMS filtering.

mod search;
mod segment;

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use thiserror::Error;

pub use search::{initial_regions, merge_hierarchy, MergeTree, Region, HIST_BINS};
pub use segment::{felzenszwalb_segment, SegmentLabelMap};

use crate::geometry::{clip_to_image, nms, BBox, ScoredBox};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("invalid proposal config: {0}")]
    Config(String),
    #[error("proposals file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: u64,
    pub boxes: Vec<BBox>,
}

impl ProposalSet {
    pub fn new(image_id: u64, boxes: Vec<BBox>) -> Self {
        Self { image_id, boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalConfig {
    pub k: f64,
    pub min_region_size: usize,
    pub min_box_side: f64,
    pub aspect_ratio_range: (f64, f64),
    pub nms_threshold: f64,
    pub max_proposals: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            k: 100.0,
            min_region_size: 20,
            min_box_side: 8.0,
            aspect_ratio_range: (1.0 / 3.0, 3.0),
            nms_threshold: 0.5,
            max_proposals: 32,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<(), ProposalError> {
        let (lo, hi) = self.aspect_ratio_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(ProposalError::Config(format!("aspect range ({lo}, {hi})")));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(ProposalError::Config(format!("nms threshold {}", self.nms_threshold)));
        }
        if self.max_proposals == 0 {
            return Err(ProposalError::Config("max_proposals must be positive".into()));
        }
        Ok(())
    }
}

/// Every box recorded while grouping, before filtering: `2r - 1` boxes for
/// `r` initial segments.
pub fn selective_search(image_id: u64, image: &Image, cfg: &ProposalConfig) -> ProposalSet {
    let seg = felzenszwalb_segment(image, cfg.k, cfg.min_region_size);
    let tree = merge_hierarchy(image, &seg);
    let (w, h) = (image.width() as f64, image.height() as f64);
    let boxes = tree
        .boxes
        .iter()
        .map(|b| clip_to_image(b, w, h).expect("segment boxes lie on the pixel grid"))
        .collect();
    ProposalSet::new(image_id, boxes)
}

/// Drop small or elongated boxes, suppress duplicates (larger area wins) and
/// keep at most `max_proposals`, ordered by descending area.
pub fn filter_proposals(raw: &ProposalSet, cfg: &ProposalConfig) -> ProposalSet {
    let (lo, hi) = cfg.aspect_ratio_range;
    let candidates: Vec<ScoredBox> = raw
        .boxes
        .iter()
        .filter(|b| {
            let aspect = b.w() / b.h();
            b.min_side() >= cfg.min_box_side && aspect >= lo && aspect <= hi
        })
        .map(|&bbox| ScoredBox { bbox, score: bbox.area() })
        .collect();
    let boxes = nms(&candidates, cfg.nms_threshold)
        .into_iter()
        .take(cfg.max_proposals)
        .map(|i| candidates[i].bbox)
        .collect();
    ProposalSet::new(raw.image_id, boxes)
}

/// Convenience: search then filter.
pub fn generate_proposals(image_id: u64, image: &Image, cfg: &ProposalConfig) -> ProposalSet {
    filter_proposals(&selective_search(image_id, image, cfg), cfg)
}

/// One line per image: `image_id n x0 y0 x1 y1 ...`.
pub fn write_proposals<W: Write>(out: &mut W, sets: &[ProposalSet]) -> std::io::Result<()> {
    for set in sets {
        let mut line = format!("{} {}", set.image_id, set.boxes.len());
        for b in &set.boxes {
            let [x0, y0, x1, y1] = b.corners();
            write!(line, " {x0} {y0} {x1} {y1}").expect("writing to a String");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_proposals<R: BufRead>(input: R) -> Result<Vec<ProposalSet>, ProposalError> {
    let mut sets = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let err = |reason: String| ProposalError::Parse { line: lineno, reason };
        let mut tokens = line.split_whitespace();
        let Some(id) = tokens.next() else { continue };
        let image_id: u64 = id.parse().map_err(|_| err(format!("bad image id {id:?}")))?;
        let n: usize = tokens
            .next()
            .ok_or_else(|| err("missing box count".into()))?
            .parse()
            .map_err(|_| err("bad box count".into()))?;
        let values: Vec<f64> = tokens
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad coordinate {t:?}"))))
            .collect::<Result<_, _>>()?;
        if values.len() != 4 * n {
            return Err(err(format!("expected {} coordinates, found {}", 4 * n, values.len())));
        }
        let boxes = values
            .chunks_exact(4)
            .map(|c| BBox::from_corners(c[0], c[1], c[2], c[3]).map_err(|e| err(e.to_string())))
            .collect::<Result<_, _>>()?;
        sets.push(ProposalSet::new(image_id, boxes));
    }
    Ok(sets)
}
