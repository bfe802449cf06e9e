//! Synthetic multi-object scenes, PPM/JSON dataset storage and low-data folds.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::image::Image;
use crate::stream_rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error("could not place object {object} after {attempts} attempts (spec too dense)")]
    Placement { object: usize, attempts: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed PPM: {reason}")]
    Ppm { path: PathBuf, reason: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("image {id}: file {path} is missing or unreadable")]
    MissingFile { id: u64, path: PathBuf },
    #[error("folds: {0}")]
    Folds(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Disk,
    Rectangle,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Disk, ShapeClass::Rectangle, ShapeClass::Triangle, ShapeClass::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Rectangle => "rectangle",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ShapeClass>,
    /// Range of the longer object side in pixels.
    pub size_range: (f64, f64),
    /// Base RGB color per class, same order as `classes`.
    pub palette: Vec<[f32; 3]>,
    pub color_jitter: f32,
    pub noise: f32,
    /// Maximum pairwise IoU among ground-truth boxes.
    pub overlap_cap: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_objects: 2,
            max_objects: 6,
            classes: ShapeClass::ALL.to_vec(),
            size_range: (10.0, 26.0),
            palette: vec![[0.85, 0.25, 0.2], [0.25, 0.7, 0.3], [0.25, 0.35, 0.9], [0.9, 0.8, 0.2]],
            color_jitter: 0.08,
            noise: 0.06,
            overlap_cap: 0.05,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return err("image size must be positive");
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return err("need 1 <= min_objects <= max_objects");
        }
        if self.classes.is_empty() || self.palette.len() != self.classes.len() {
            return err("one palette color per class is required");
        }
        let (lo, hi) = self.size_range;
        if !(lo >= 2.0 && lo <= hi && hi <= self.width.min(self.height) as f64) {
            return err("size range must lie within [2, image side]");
        }
        if !(0.0..1.0).contains(&self.overlap_cap) {
            return err("overlap cap must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: Vec<BBox>,
    /// Index into the spec's class list.
    pub classes: Vec<usize>,
}

struct Placed {
    class: usize,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl Placed {
    fn covers(&self, shape: ShapeClass, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (hw, hh) = (self.w * 0.5, self.h * 0.5);
        match shape {
            ShapeClass::Disk => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
            ShapeClass::Rectangle => dx.abs() <= hw && dy.abs() <= hh,
            ShapeClass::Triangle => {
                // Apex up: half-width grows linearly from apex to base.
                let t = (dy + hh) / self.h;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * hw
            }
            ShapeClass::Cross => {
                let (tw, th) = (self.w / 6.0, self.h / 6.0);
                (dx.abs() <= hw && dy.abs() <= th) || (dy.abs() <= hh && dx.abs() <= tw)
            }
        }
    }
}

/// Tight pixel bounds of a rasterized shape, `None` if it covers nothing.
fn raster_bounds(p: &Placed, shape: ShapeClass, width: usize, height: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let ys = (p.cy - p.h / 2.0).floor().max(0.0) as usize..((p.cy + p.h / 2.0).ceil() as usize).min(height);
    for y in ys {
        let xs = (p.cx - p.w / 2.0).floor().max(0.0) as usize..((p.cx + p.w / 2.0).ceil() as usize).min(width);
        for x in xs {
            if p.covers(shape, x as f64 + 0.5, y as f64 + 0.5) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("non-empty raster"))
}

pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, spec: &SyntheticSceneSpec) -> Result<Scene, DataError> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    for object in 0..count {
        let mut ok = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let class = rng.random_range(0..spec.classes.len());
            let side = rng.random_range(spec.size_range.0..=spec.size_range.1);
            let aspect = match spec.classes[class] {
                ShapeClass::Rectangle => rng.random_range(0.5..1.0),
                _ => rng.random_range(0.8..1.0),
            };
            let (ow, oh) = if rng.random_bool(0.5) { (side, side * aspect) } else { (side * aspect, side) };
            let cx = rng.random_range(ow / 2.0..=w as f64 - ow / 2.0);
            let cy = rng.random_range(oh / 2.0..=h as f64 - oh / 2.0);
            let cand = Placed { class, cx, cy, w: ow, h: oh };
            let Some(b) = raster_bounds(&cand, spec.classes[class], w, h) else { continue };
            if boxes.iter().all(|o| iou(o, &b) <= spec.overlap_cap) {
                placed.push(cand);
                boxes.push(b);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(DataError::Placement { object, attempts: MAX_PLACEMENT_ATTEMPTS });
        }
    }

    // Smooth two-tone background plus per-pixel noise.
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.55));
    let tilt: [f32; 2] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let mut image = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let shade = tilt[0] * (x as f32 / w as f32 - 0.5) + tilt[1] * (y as f32 / h as f32 - 0.5);
            let rgb = std::array::from_fn(|c| (base[c] + shade + spec.noise * rng.random_range(-1.0..1.0f32)).clamp(0.0, 1.0));
            image.set_pixel(x, y, rgb);
        }
    }
    for p in &placed {
        let shape = spec.classes[p.class];
        let color: [f32; 3] = std::array::from_fn(|c| {
            (spec.palette[p.class][c] + spec.color_jitter * rng.random_range(-1.0..1.0f32)).clamp(0.0, 1.0)
        });
        for y in 0..h {
            for x in 0..w {
                if p.covers(shape, x as f64 + 0.5, y as f64 + 0.5) {
                    let rgb = std::array::from_fn(|c| (color[c] + 0.5 * spec.noise * rng.random_range(-1.0..1.0f32)).clamp(0.0, 1.0));
                    image.set_pixel(x, y, rgb);
                }
            }
        }
    }
    Ok(Scene { image, boxes, classes: placed.iter().map(|p| p.class).collect() })
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_rgb8());
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image, DataError> {
    let bad = |reason: &str| DataError::Ppm { path: path.to_path_buf(), reason: reason.to_string() };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("expected P6 magic"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h * 3 {
        return Err(bad(&format!("expected {} payload bytes, found {}", w * h * 3, data.len())));
    }
    Ok(Image::from_rgb8(w, h, data))
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<(), DataError> {
    fs::write(path, encode_ppm(image)).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    /// Relative to the manifest's directory.
    pub file: String,
    pub width: usize,
    pub height: usize,
    /// Corner format `[x0, y0, x1, y1]`.
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

impl ImageRecord {
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.boxes
            .iter()
            .map(|b| BBox::from_corners(b[0], b[1], b[2], b[3]).expect("validated manifest box"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub images: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut ids = HashSet::new();
        for r in &self.images {
            if !ids.insert(r.id) {
                return Err(DataError::Manifest(format!("duplicate image id {}", r.id)));
            }
            if r.boxes.len() != r.classes.len() {
                return Err(DataError::Manifest(format!("image {}: boxes and classes differ in length", r.id)));
            }
            for (b, &c) in r.boxes.iter().zip(&r.classes) {
                let inside = b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= r.width as f64 && b[3] <= r.height as f64;
                if !(inside && b[2] > b[0] && b[3] > b[1]) {
                    return Err(DataError::Manifest(format!("image {}: box {b:?} out of bounds", r.id)));
                }
                if c >= self.class_names.len() {
                    return Err(DataError::Manifest(format!("image {}: class {c} out of range", r.id)));
                }
            }
        }
        Ok(())
    }
}

/// Generate `count` scenes into `dir` (PPM files plus `manifest.json`).
/// Scene `i` uses its own rng stream and gets id `id_offset + i`.
pub fn generate_dataset(dir: &Path, spec: &SyntheticSceneSpec, count: usize, seed: u64, id_offset: u64) -> Result<DatasetManifest, DataError> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut images = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let id = id_offset + i;
        let scene = generate_scene(&mut stream_rng(seed, crate::STREAM_SCENE, id), spec)?;
        let file = format!("{id:06}.ppm");
        write_ppm(&dir.join(&file), &scene.image)?;
        images.push(ImageRecord {
            id,
            file,
            width: spec.width,
            height: spec.height,
            boxes: scene.boxes.iter().map(|b| b.corners()).collect(),
            classes: scene.classes,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        class_names: spec.classes.iter().map(|c| c.name().to_string()).collect(),
        images,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))
}

/// Read `dir/manifest.json`, checking structure and that every file exists.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    for r in &manifest.images {
        let p = dir.join(&r.file);
        if !p.is_file() {
            return Err(DataError::MissingFile { id: r.id, path: p });
        }
    }
    Ok(manifest)
}

/// A dataset in memory: manifest plus decoded images in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let manifest = read_manifest(dir)?;
        let images = manifest
            .images
            .iter()
            .map(|r| {
                let img = read_ppm(&dir.join(&r.file)).map_err(|_| DataError::MissingFile { id: r.id, path: dir.join(&r.file) })?;
                if (img.width(), img.height()) != (r.width, r.height) {
                    return Err(DataError::Manifest(format!("image {}: size differs from manifest", r.id)));
                }
                Ok(img)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { manifest, images })
    }

    /// Restrict to the records of `fold` (matched by id).
    pub fn select(&self, fold: &DatasetManifest) -> Dataset {
        let keep: HashSet<u64> = fold.images.iter().map(|r| r.id).collect();
        let (records, images) = self
            .manifest
            .images
            .iter()
            .zip(&self.images)
            .filter(|(r, _)| keep.contains(&r.id))
            .map(|(r, i)| (r.clone(), i.clone()))
            .unzip();
        Dataset { manifest: DatasetManifest { images: records, ..self.manifest.clone() }, images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The label-free view handed to pre-training.
    pub fn unlabeled(&self) -> Vec<UnlabeledImage> {
        strip_labels(&self.manifest, &self.images)
    }
}

/// An image with its id and nothing else; all pre-training consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledImage {
    pub id: u64,
    pub image: Image,
}

pub fn strip_labels(manifest: &DatasetManifest, images: &[Image]) -> Vec<UnlabeledImage> {
    manifest
        .images
        .iter()
        .zip(images)
        .map(|(r, img)| UnlabeledImage { id: r.id, image: img.clone() })
        .collect()
}

/// `n_folds` independent uniform samples of `ceil(fraction * N)` images.
pub fn subsample_folds(manifest: &DatasetManifest, fraction: f64, n_folds: usize, seed: u64) -> Result<Vec<DatasetManifest>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Folds(format!("fraction {fraction} outside (0, 1]")));
    }
    if n_folds == 0 {
        return Err(DataError::Folds("need at least one fold".into()));
    }
    let n = manifest.images.len();
    if fraction * (n as f64) < 1.0 {
        return Err(DataError::Folds(format!("fraction {fraction} of {n} images selects nothing")));
    }
    let size = ((fraction * n as f64).ceil() as usize).min(n);
    Ok((0..n_folds)
        .map(|fold| {
            let mut idx = sample(&mut stream_rng(seed, crate::STREAM_FOLD, fold as u64), n, size).into_vec();
            idx.sort_unstable();
            DatasetManifest { images: idx.iter().map(|&i| manifest.images[i].clone()).collect(), ..manifest.clone() }
        })
        .collect())
}
