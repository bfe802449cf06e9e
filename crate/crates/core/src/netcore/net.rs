//! The toy detector: strided conv backbone, two-level FPN-lite neck, and a
//! head with separate regression (`head.reg`) and feature (`head.con`)
//! branches, plus the projection `proj` used only during pre-training.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{he_uniform, ParamSet};
use super::tensor::Tensor;
use super::NetError;
use crate::geometry::{clip_to_image, BBox};
use crate::image::Image;

/// Strides of the two pyramid levels.
pub const STRIDES: [usize; 2] = [8, 16];
/// Input sides must be multiples of this.
pub const TOTAL_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flavor {
    /// Anchor boxes, IoU-threshold assignment.
    Anchor,
    /// Grid points, center/scale-range assignment.
    Point,
    /// One-to-one set prediction, bipartite assignment.
    Query,
}

impl Flavor {
    pub const ALL: [Flavor; 3] = [Flavor::Anchor, Flavor::Point, Flavor::Query];
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::Anchor => "anchor",
            Flavor::Point => "point",
            Flavor::Query => "query",
        })
    }
}

impl FromStr for Flavor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "anchor" => Ok(Flavor::Anchor),
            "point" => Ok(Flavor::Point),
            "query" => Ok(Flavor::Query),
            other => Err(format!("unknown detector flavor {other:?} (anchor|point|query)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub flavor: Flavor,
    pub backbone_channels: [usize; 4],
    pub neck_dim: usize,
    /// Output width of the `head.con` branch.
    pub con_dim: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub roi_grid: usize,
    /// Boxes with `sqrt(area)` below this pool from the finer level.
    pub roi_level_split: f64,
    pub anchor_base: [f64; 2],
    /// Height/width ratios of the anchors at each location.
    pub anchor_ratios: Vec<f64>,
    /// Reference square side for point/query predictions, in strides.
    pub point_ref_scale: f64,
    pub num_classes: usize,
    pub pseudo_classes: usize,
    /// L2-normalize embeddings before the contrastive dot products.
    pub normalize_embeddings: bool,
}

impl NetConfig {
    pub fn new(flavor: Flavor) -> Self {
        Self {
            flavor,
            backbone_channels: [8, 16, 16, 32],
            neck_dim: 16,
            con_dim: 32,
            proj_hidden: 32,
            embed_dim: 32,
            roi_grid: 3,
            roi_level_split: 32.0,
            anchor_base: [16.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            point_ref_scale: 3.0,
            num_classes: 4,
            pseudo_classes: 16,
            normalize_embeddings: true,
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        match self.flavor {
            Flavor::Anchor => self.anchor_ratios.len(),
            Flavor::Point | Flavor::Query => 1,
        }
    }
}

/// Prefixes of the trees that live in both online and momentum branches.
pub const NECK_PREFIX: &str = "neck.";
pub const HEAD_PREFIX: &str = "head.";
pub const PROJ_PREFIX: &str = "proj.";
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const CLS_HEAD: &str = "head.cls";
pub const PSEUDO_CLS_HEAD: &str = "head.pcls";

#[derive(Debug, Clone)]
pub struct DetectorNet {
    pub cfg: NetConfig,
    pub params: ParamSet,
}

fn add_linear<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, name: &str, din: usize, dout: usize, gain: f64) {
    let mut w = he_uniform(rng, &[dout, din], din);
    if gain != 1.0 {
        w.data_mut().iter_mut().for_each(|v| *v = (*v * gain) as f32 as f64);
    }
    ps.insert(format!("{name}.weight"), w);
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
}

fn add_conv<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
    let mut w = he_uniform(rng, &[cout, cin, k, k], cin * k * k);
    if gain != 1.0 {
        w.data_mut().iter_mut().for_each(|v| *v = (*v * gain) as f32 as f64);
    }
    ps.insert(format!("{name}.weight"), w);
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// Output layers start small so initial deltas and logits stay near zero.
const OUTPUT_GAIN: f64 = 0.1;

impl DetectorNet {
    /// Fresh network without the fine-tuning classifier.
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let [c1, c2, c3, c4] = cfg.backbone_channels;
        add_conv(&mut params, rng, "backbone.conv1", 3, c1, 3, 1.0);
        add_conv(&mut params, rng, "backbone.conv2", c1, c2, 3, 1.0);
        add_conv(&mut params, rng, "backbone.conv3", c2, c3, 3, 1.0);
        add_conv(&mut params, rng, "backbone.conv4", c3, c4, 3, 1.0);
        Self::init_neck_head(&cfg, &mut params, rng);
        Self::init_projection(&cfg, &mut params, rng);
        if cfg.flavor == Flavor::Query {
            add_linear(&mut params, rng, PSEUDO_CLS_HEAD, cfg.con_dim, cfg.pseudo_classes + 1, OUTPUT_GAIN);
        }
        Self { cfg, params }
    }

    fn init_neck_head<R: Rng + ?Sized>(cfg: &NetConfig, params: &mut ParamSet, rng: &mut R) {
        let d = cfg.neck_dim;
        add_conv(params, rng, "neck.lateral3", cfg.backbone_channels[2], d, 1, 1.0);
        add_conv(params, rng, "neck.lateral4", cfg.backbone_channels[3], d, 1, 1.0);
        add_conv(params, rng, "head.reg.conv", d, d, 3, 1.0);
        add_conv(params, rng, "head.reg.out", d, 4 * cfg.anchors_per_location(), 1, OUTPUT_GAIN);
        let pooled = d * cfg.roi_grid * cfg.roi_grid;
        add_linear(params, rng, "head.con.fc1", pooled, cfg.con_dim, 1.0);
        add_linear(params, rng, "head.con.fc2", cfg.con_dim, cfg.con_dim, 1.0);
    }

    pub fn init_projection<R: Rng + ?Sized>(cfg: &NetConfig, params: &mut ParamSet, rng: &mut R) {
        add_linear(params, rng, "proj.fc1", cfg.con_dim, cfg.proj_hidden, 1.0);
        add_linear(params, rng, "proj.fc2", cfg.proj_hidden, cfg.embed_dim, 1.0);
    }

    /// Replace neck and head (keeping the backbone) with fresh weights.
    pub fn reinit_neck_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut fresh = ParamSet::new();
        Self::init_neck_head(&self.cfg, &mut fresh, rng);
        self.params.load_from(&fresh);
    }

    /// Add (or replace) the supervised classification output layer.
    pub fn add_classifier<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut fresh = ParamSet::new();
        add_linear(&mut fresh, rng, CLS_HEAD, self.cfg.con_dim, self.cfg.num_classes + 1, OUTPUT_GAIN);
        self.params.load_from(&fresh);
    }
}

/// Pyramid feature maps `[P3, P4]` and their spatial sizes `(w, h)`.
#[derive(Debug, Clone, Copy)]
pub struct Pyramid {
    pub maps: [Var; 2],
    pub sizes: [(usize, usize); 2],
    pub image_size: (usize, usize),
}

/// Backbone on a padded image. Returns `[C3, C4]` at strides 8 and 16.
pub fn backbone(g: &mut Graph, params: &ParamSet, image: &Image) -> Result<[Var; 2], NetError> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || w % TOTAL_STRIDE != 0 || h % TOTAL_STRIDE != 0 {
        return Err(NetError::Shape(format!(
            "input {w}x{h} is not a positive multiple of {TOTAL_STRIDE}"
        )));
    }
    let x = g.input(&[3, h, w], image.to_chw())?;
    let mut cur = x;
    let mut taps = [x; 2];
    for (i, name) in ["backbone.conv1", "backbone.conv2", "backbone.conv3", "backbone.conv4"]
        .iter()
        .enumerate()
    {
        let wv = g.param(params, &format!("{name}.weight"))?;
        let bv = g.param(params, &format!("{name}.bias"))?;
        let c = g.conv2d(cur, wv, bv, 2, 1)?;
        cur = g.relu(c);
        if i >= 2 {
            taps[i - 2] = cur;
        }
    }
    Ok(taps)
}

pub fn neck(g: &mut Graph, params: &ParamSet, feats: [Var; 2], image_size: (usize, usize)) -> Result<Pyramid, NetError> {
    let conv1x1 = |g: &mut Graph, name: &str, x: Var| -> Result<Var, NetError> {
        let w = g.param(params, &format!("{name}.weight"))?;
        let b = g.param(params, &format!("{name}.bias"))?;
        g.conv2d(x, w, b, 1, 0)
    };
    let p4 = conv1x1(g, "neck.lateral4", feats[1])?;
    let l3 = conv1x1(g, "neck.lateral3", feats[0])?;
    let up = g.upsample2x(p4)?;
    let p3 = g.add(l3, up)?;
    let (s3, s4) = (g.shape(p3).to_vec(), g.shape(p4).to_vec());
    Ok(Pyramid {
        maps: [p3, p4],
        sizes: [(s3[2], s3[1]), (s4[2], s4[1])],
        image_size,
    })
}

/// Backbone then neck. `backbone_params` and `branch_params` may be the same set.
pub fn forward(
    g: &mut Graph,
    backbone_params: &ParamSet,
    branch_params: &ParamSet,
    image: &Image,
) -> Result<Pyramid, NetError> {
    let feats = backbone(g, backbone_params, image)?;
    neck(g, branch_params, feats, (image.width(), image.height()))
}

/// One prediction slot: its reference box, pyramid level and grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub bbox: BBox,
    pub level: usize,
    pub point: (f64, f64),
}

/// Reference boxes in the row order of [`reg_head`] outputs.
pub fn references(cfg: &NetConfig, pyr: &Pyramid) -> Vec<Reference> {
    let mut out = Vec::new();
    for (level, &(w, h)) in pyr.sizes.iter().enumerate() {
        let s = STRIDES[level] as f64;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                match cfg.flavor {
                    Flavor::Anchor => {
                        for &r in &cfg.anchor_ratios {
                            let base = cfg.anchor_base[level];
                            let bbox = BBox::new(px, py, base / r.sqrt(), base * r.sqrt())
                                .expect("positive anchor");
                            out.push(Reference { bbox, level, point: (px, py) });
                        }
                    }
                    Flavor::Point | Flavor::Query => {
                        let side = cfg.point_ref_scale * s;
                        let bbox = BBox::new(px, py, side, side).expect("positive reference");
                        out.push(Reference { bbox, level, point: (px, py) });
                    }
                }
            }
        }
    }
    out
}

/// Dense regression output `[N, 4]` of encoded deltas, aligned with `refs`.
pub struct DensePredictions {
    pub deltas: Var,
    pub refs: Vec<Reference>,
}

impl DensePredictions {
    pub fn ref_boxes(&self) -> Vec<BBox> {
        self.refs.iter().map(|r| r.bbox).collect()
    }
}

/// The regression branch, shared across levels.
pub fn reg_head(g: &mut Graph, cfg: &NetConfig, params: &ParamSet, pyr: &Pyramid) -> Result<DensePredictions, NetError> {
    let cw = g.param(params, "head.reg.conv.weight")?;
    let cb = g.param(params, "head.reg.conv.bias")?;
    let ow = g.param(params, "head.reg.out.weight")?;
    let ob = g.param(params, "head.reg.out.bias")?;
    let mut rows = Vec::with_capacity(2);
    for &m in &pyr.maps {
        let h = g.conv2d(m, cw, cb, 1, 1)?;
        let h = g.relu(h);
        let o = g.conv2d(h, ow, ob, 1, 0)?;
        rows.push(g.chw_to_rows(o, 4)?);
    }
    let deltas = g.concat_rows(&rows)?;
    Ok(DensePredictions { deltas, refs: references(cfg, pyr) })
}

/// Decode delta values into image-clipped boxes, falling back to the
/// (clipped) reference when a prediction leaves the image entirely.
pub fn decode_predictions(deltas: &[f64], refs: &[Reference], image_size: (usize, usize)) -> Vec<BBox> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    deltas
        .chunks_exact(4)
        .zip(refs)
        .map(|(d, r)| {
            let clamp = |v: f64| v.min(super::graph::MAX_LOG_SCALE);
            let b = &r.bbox;
            BBox::new(
                b.cx() + d[0] * b.w(),
                b.cy() + d[1] * b.h(),
                b.w() * clamp(d[2]).exp(),
                b.h() * clamp(d[3]).exp(),
            )
            .ok()
            .and_then(|p| clip_to_image(&p, w, h).ok())
            .unwrap_or_else(|| clip_to_image(b, w, h).unwrap_or(*b))
        })
        .collect()
}

/// Pyramid level a box pools from.
pub fn roi_level(cfg: &NetConfig, b: &BBox) -> usize {
    usize::from(b.area().sqrt() >= cfg.roi_level_split)
}

/// The feature branch: RoI pooling then two fully-connected layers.
pub fn con_features(
    g: &mut Graph,
    cfg: &NetConfig,
    params: &ParamSet,
    pyr: &Pyramid,
    boxes: &[BBox],
) -> Result<Var, NetError> {
    let rois: Vec<(BBox, usize)> = boxes.iter().map(|b| (*b, roi_level(cfg, b))).collect();
    let strides = [STRIDES[0] as f64, STRIDES[1] as f64];
    let pooled = g.roi_align(&pyr.maps, &strides, &rois, cfg.roi_grid)?;
    let h = linear(g, params, "head.con.fc1", pooled)?;
    let h = g.relu(h);
    let h = linear(g, params, "head.con.fc2", h)?;
    Ok(g.relu(h))
}

pub fn linear(g: &mut Graph, params: &ParamSet, name: &str, x: Var) -> Result<Var, NetError> {
    let w = g.param(params, &format!("{name}.weight"))?;
    let b = g.param(params, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

/// Two-layer MLP with ReLU between, then optional row L2 normalization.
pub fn project(g: &mut Graph, cfg: &NetConfig, params: &ParamSet, feats: Var) -> Result<Var, NetError> {
    let h = linear(g, params, "proj.fc1", feats)?;
    let h = g.relu(h);
    let z = linear(g, params, "proj.fc2", h)?;
    if cfg.normalize_embeddings {
        g.l2_normalize_rows(z)
    } else {
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::gradcheck::check_param_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(flavor: Flavor, seed: u64) -> DetectorNet {
        DetectorNet::new(NetConfig::new(flavor), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn pyramid_sizes_follow_strides() {
        let n = net(Flavor::Anchor, 1);
        let mut g = Graph::inference();
        let pyr = forward(&mut g, &n.params, &n.params, &noise_image(64, 64, 2)).unwrap();
        assert_eq!(pyr.sizes, [(8, 8), (4, 4)]);
        assert_eq!(g.shape(pyr.maps[0]), &[16, 8, 8]);
    }

    #[test]
    fn bad_dims_rejected() {
        let n = net(Flavor::Point, 1);
        let mut g = Graph::inference();
        assert!(matches!(
            forward(&mut g, &n.params, &n.params, &noise_image(60, 64, 2)),
            Err(NetError::Shape(_))
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let n = net(Flavor::Point, 4);
        let mut g = Graph::inference();
        let pyr = forward(&mut g, &n.params, &n.params, &Image::new(32, 48)).unwrap();
        for m in pyr.maps {
            assert!(g.value(m).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let n = net(Flavor::Anchor, 9);
        let img = noise_image(64, 80, 3);
        let run = || {
            let mut g = Graph::inference();
            let pyr = forward(&mut g, &n.params, &n.params, &img).unwrap();
            let preds = reg_head(&mut g, &n.cfg, &n.params, &pyr).unwrap();
            g.value(preds.deltas).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reference_rows_match_prediction_rows() {
        for flavor in Flavor::ALL {
            let n = net(flavor, 5);
            let mut g = Graph::inference();
            let pyr = forward(&mut g, &n.params, &n.params, &noise_image(64, 64, 1)).unwrap();
            let preds = reg_head(&mut g, &n.cfg, &n.params, &pyr).unwrap();
            assert_eq!(g.shape(preds.deltas)[0], preds.refs.len());
            assert_eq!(preds.refs.len(), 80 * n.cfg.anchors_per_location());
        }
    }

    #[test]
    fn duplicate_boxes_give_identical_rows_and_unit_embeddings() {
        let n = net(Flavor::Anchor, 6);
        let mut g = Graph::inference();
        let pyr = forward(&mut g, &n.params, &n.params, &noise_image(64, 64, 7)).unwrap();
        let b = BBox::new(20.0, 30.0, 12.0, 16.0).unwrap();
        let c = BBox::new(40.0, 30.0, 40.0, 36.0).unwrap();
        let f = con_features(&mut g, &n.cfg, &n.params, &pyr, &[b, c, b]).unwrap();
        let d = n.cfg.con_dim;
        let v = g.value(f).to_vec();
        assert_eq!(&v[..d], &v[2 * d..]);
        let z = project(&mut g, &n.cfg, &n.params, f).unwrap();
        for row in g.value(z).chunks_exact(n.cfg.embed_dim) {
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_projection_signals_normalization_error() {
        let mut n = net(Flavor::Anchor, 6);
        for (name, p) in n.params.iter_mut() {
            if name.starts_with(PROJ_PREFIX) {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::inference();
        let feats = g.input(&[2, n.cfg.con_dim], vec![0.3; 2 * n.cfg.con_dim]).unwrap();
        assert!(matches!(project(&mut g, &n.cfg, &n.params, feats), Err(NetError::ZeroNorm)));
    }

    #[test]
    fn projection_gradient_check() {
        let n = net(Flavor::Anchor, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let feats: Vec<f64> = (0..3 * n.cfg.con_dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let probe: Vec<f64> = (0..3 * n.cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = check_param_gradient(&n.params, "proj.fc1.weight", &[0, 7, 100, 513], 1e-3, |g, ps| {
            let f = g.input(&[3, n.cfg.con_dim], feats.clone())?;
            let z = project(g, &n.cfg, ps, f)?;
            let p = g.input(&[3, n.cfg.embed_dim], probe.clone())?;
            let d = g.row_dot(z, p)?;
            Ok(g.sum(d))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
