//! Two-view augmentation that keeps image content and proposal boxes in
//! lockstep. There is deliberately no cropping: every proposal survives in
//! both views, so proposal index `i` names the same object in each.

use rand::Rng;

use crate::geometry::{clip_to_image, BBox};
use crate::image::Image;
use crate::proposals::ProposalSet;

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Inclusive range for the resized short side, in pixels.
    pub short_side_range: (usize, usize),
    pub hflip_p: f64,
    /// Additive brightness shift is drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    pub contrast_range: (f64, f64),
    /// Per-channel multiplicative gain range.
    pub channel_gain_range: (f64, f64),
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            short_side_range: (64, 80),
            hflip_p: 0.5,
            brightness: 0.1,
            contrast_range: (0.8, 1.2),
            channel_gain_range: (0.9, 1.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewTransform {
    pub output_size: (usize, usize),
    pub scale: f64,
    pub hflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub channel_gain: [f64; 3],
}

impl ViewTransform {
    /// Scale-only transform with neutral photometrics.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            output_size: (width, height),
            scale: 1.0,
            hflip: false,
            brightness: 0.0,
            contrast: 1.0,
            channel_gain: [1.0; 3],
        }
    }

    pub fn with_scale(width: usize, height: usize, scale: f64) -> Self {
        let output_size = (
            ((width as f64 * scale).round() as usize).max(1),
            ((height as f64 * scale).round() as usize).max(1),
        );
        Self { output_size, scale, ..Self::identity(width, height) }
    }

    fn is_photometric_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 1.0 && self.channel_gain == [1.0; 3]
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub image: Image,
    pub proposals: ProposalSet,
    pub transform: ViewTransform,
}

pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugConfig,
    src_width: usize,
    src_height: usize,
) -> ViewTransform {
    let (lo, hi) = cfg.short_side_range;
    let short_side = rng.random_range(lo..=hi);
    let scale = short_side as f64 / src_width.min(src_height) as f64;
    let hflip = rng.random_bool(cfg.hflip_p);
    let brightness = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let contrast = sample_range(rng, cfg.contrast_range);
    let channel_gain = [
        sample_range(rng, cfg.channel_gain_range),
        sample_range(rng, cfg.channel_gain_range),
        sample_range(rng, cfg.channel_gain_range),
    ];
    ViewTransform {
        hflip,
        brightness,
        contrast,
        channel_gain,
        ..ViewTransform::with_scale(src_width, src_height, scale)
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Bilinear resize (half-pixel centers), optional mirror, then photometric map.
pub fn apply_to_image(image: &Image, t: &ViewTransform) -> Image {
    let (ow, oh) = t.output_size;
    let (sw, sh) = (image.width(), image.height());
    let mut out = Image::new(ow, oh);

    let identity_resize = ow == sw && oh == sh && t.scale == 1.0;
    for y in 0..oh {
        for x in 0..ow {
            let px = if identity_resize {
                image.pixel(x, y)
            } else {
                let fx = ((x as f64 + 0.5) / t.scale - 0.5).clamp(0.0, (sw - 1) as f64);
                let fy = ((y as f64 + 0.5) / t.scale - 0.5).clamp(0.0, (sh - 1) as f64);
                bilinear(image, fx, fy)
            };
            let dst_x = if t.hflip { ow - 1 - x } else { x };
            out.set_pixel(dst_x, y, px);
        }
    }

    if !t.is_photometric_identity() {
        let offset = 0.5 * (1.0 - t.contrast) + t.brightness;
        let data: Vec<f32> = out
            .data()
            .chunks_exact(3)
            .flat_map(|px| {
                let mut o = [0f32; 3];
                for c in 0..3 {
                    let v = px[c] as f64 * t.channel_gain[c] * t.contrast + offset;
                    o[c] = v.clamp(0.0, 1.0) as f32;
                }
                o
            })
            .collect();
        out = Image::from_data(ow, oh, data);
    }
    out
}

fn bilinear(image: &Image, fx: f64, fy: f64) -> [f32; 3] {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(image.width() - 1);
    let y1 = (y0 + 1).min(image.height() - 1);
    let ax = (fx - x0 as f64) as f32;
    let ay = (fy - y0 as f64) as f32;
    let (p00, p10, p01, p11) = (
        image.pixel(x0, y0),
        image.pixel(x1, y0),
        image.pixel(x0, y1),
        image.pixel(x1, y1),
    );
    let mut o = [0f32; 3];
    for c in 0..3 {
        let top = p00[c] + (p10[c] - p00[c]) * ax;
        let bottom = p01[c] + (p11[c] - p01[c]) * ax;
        o[c] = top + (bottom - top) * ay;
    }
    o
}

/// Map boxes through the transform. Order and count are preserved.
pub fn apply_to_boxes(p: &ProposalSet, t: &ViewTransform) -> ProposalSet {
    let boxes = p.boxes.iter().map(|b| transform_box(b, t)).collect();
    ProposalSet::new(p.image_id, boxes)
}

pub fn transform_box(b: &BBox, t: &ViewTransform) -> BBox {
    let (ow, oh) = (t.output_size.0 as f64, t.output_size.1 as f64);
    let mut cx = b.cx() * t.scale;
    if t.hflip {
        cx = ow - cx;
    }
    let scaled = BBox::new(cx, b.cy() * t.scale, b.w() * t.scale, b.h() * t.scale)
        .expect("positive scale keeps boxes valid");
    // Output sizes are rounded, so a box touching the far edge may overhang
    // by a fraction of a pixel.
    clip_to_image(&scaled, ow, oh).unwrap_or(scaled)
}

pub fn augment_view(image: &Image, proposals: &ProposalSet, t: &ViewTransform) -> AugmentedView {
    AugmentedView {
        image: apply_to_image(image, t),
        proposals: apply_to_boxes(proposals, t),
        transform: t.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [x as f32 / w as f32, y as f32 / h as f32, 0.25]);
            }
        }
        img
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let cfg = AugConfig::default();
        let a = sample_transform(&mut ChaCha8Rng::seed_from_u64(5), &cfg, 64, 64);
        let b = sample_transform(&mut ChaCha8Rng::seed_from_u64(5), &cfg, 64, 64);
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut flips = 0;
        for _ in 0..1000 {
            let t = sample_transform(&mut rng, &cfg, 64, 48);
            let short = t.output_size.0.min(t.output_size.1);
            assert!((64..=80).contains(&short), "short side {short}");
            flips += t.hflip as usize;
        }
        assert!((440..=560).contains(&flips), "flip count {flips}");
    }

    #[test]
    fn identity_and_involution() {
        let img = test_image(8, 8);
        assert_eq!(apply_to_image(&img, &ViewTransform::identity(8, 8)), img);
        let flip = ViewTransform { hflip: true, ..ViewTransform::identity(8, 8) };
        assert_eq!(apply_to_image(&apply_to_image(&img, &flip), &flip), img);
    }

    #[test]
    fn half_scale_output_size() {
        let out = apply_to_image(&test_image(8, 8), &ViewTransform::with_scale(8, 8, 0.5));
        assert_eq!((out.width(), out.height()), (4, 4));
    }

    #[test]
    fn box_examples() {
        let t = ViewTransform { hflip: true, ..ViewTransform::identity(800, 600) };
        let b = BBox::new(100.0, 50.0, 20.0, 10.0).unwrap();
        assert_eq!(transform_box(&b, &t).cx(), 700.0);

        let t = ViewTransform::with_scale(40, 40, 2.0);
        let b = BBox::new(10.0, 10.0, 4.0, 4.0).unwrap();
        assert_eq!(transform_box(&b, &t), BBox::new(20.0, 20.0, 8.0, 8.0).unwrap());
    }

    #[test]
    fn photometric_leaves_boxes_alone() {
        let p = ProposalSet::new(0, vec![BBox::new(10.0, 12.0, 6.0, 8.0).unwrap()]);
        let t = ViewTransform {
            brightness: 0.05,
            contrast: 1.1,
            channel_gain: [0.9, 1.0, 1.05],
            ..ViewTransform::identity(32, 32)
        };
        assert_eq!(apply_to_boxes(&p, &t), p);
    }

    proptest! {
        #[test]
        fn iou_preserved_by_views(seed in 0u64..1000,
                                  a in (8.0..56.0f64, 8.0..56.0f64, 2.0..14.0f64, 2.0..14.0f64),
                                  b in (8.0..56.0f64, 8.0..56.0f64, 2.0..14.0f64, 2.0..14.0f64)) {
            let a = BBox::new(a.0, a.1, a.2, a.3).unwrap();
            let b = BBox::new(b.0, b.1, b.2, b.3).unwrap();
            let t = sample_transform(&mut ChaCha8Rng::seed_from_u64(seed), &AugConfig::default(), 64, 64);
            let (ta, tb) = (transform_box(&a, &t), transform_box(&b, &t));
            prop_assert!((iou(&ta, &tb) - iou(&a, &b)).abs() < 1e-9);
        }
    }
}
