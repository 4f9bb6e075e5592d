//! Deterministic synthetic detection scenes.
//!
//! Four shape classes on a dark background. Solid shapes (disks, triangles) and thin
//! square outlines are frequently occluded by textured rectangles or cut off at the
//! image border; frames are large hollow rectangles whose box is mostly background.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{compute_iou, BBox};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    SquareOutline,
    Disk,
    Triangle,
    Frame,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::SquareOutline, ShapeClass::Disk, ShapeClass::Triangle, ShapeClass::Frame];

    /// Training label; 0 is reserved for background.
    pub fn label(self) -> usize {
        self as usize + 1
    }

    pub fn from_label(label: usize) -> Option<ShapeClass> {
        label.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::SquareOutline => "square-outline",
            ShapeClass::Disk => "disk",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Frame => "frame",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub class: ShapeClass,
    /// Full extent of the shape; may leave the image when truncated.
    pub bbox: BBox,
    pub occluders: Vec<BBox>,
    /// Fraction of the shape's extent (along the truncated axis) outside the image.
    pub truncation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub seed: u64,
    pub image_w: usize,
    pub image_h: usize,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Ground-truth `(label, visible box)` pairs: object boxes clipped to the image.
    pub fn ground_truth(&self) -> Vec<(usize, BBox)> {
        self.objects
            .iter()
            .map(|o| (o.class.label(), o.bbox.clip(self.image_w as f64, self.image_h as f64)))
            .collect()
    }

    /// The same scene rendered at `scale` times the resolution.
    pub fn scaled(&self, scale: f64) -> Scene {
        if scale == 1.0 {
            return self.clone();
        }
        let w = ((self.image_w as f64 * scale).round() as usize).max(1);
        let h = ((self.image_h as f64 * scale).round() as usize).max(1);
        let sx = w as f64 / self.image_w as f64;
        let sy = h as f64 / self.image_h as f64;
        let tx = |b: &BBox| BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy);
        Scene {
            seed: self.seed,
            image_w: w,
            image_h: h,
            objects: self
                .objects
                .iter()
                .map(|o| SceneObject {
                    class: o.class,
                    bbox: tx(&o.bbox),
                    occluders: o.occluders.iter().map(tx).collect(),
                    truncation: o.truncation,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_side: usize,
    pub max_side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub occlusion_prob: f64,
    pub truncation_prob: f64,
    /// Side range of squares, disks and triangles, in pixels.
    pub min_object: f64,
    pub max_object: f64,
    /// Frame width as a fraction of the shorter image side.
    pub frame_min_frac: f64,
    pub frame_max_frac: f64,
    /// Maximum IoU between the visible boxes of two objects.
    pub max_overlap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_side: 48,
            max_side: 96,
            min_objects: 1,
            max_objects: 4,
            occlusion_prob: 0.5,
            truncation_prob: 0.25,
            min_object: 14.0,
            max_object: 32.0,
            frame_min_frac: 0.4,
            frame_max_frac: 0.75,
            max_overlap: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.min_side < 16 || self.max_side < self.min_side {
            return Err(Error::Config(format!("bad image side range {}..{}", self.min_side, self.max_side)));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !prob(self.occlusion_prob) || !prob(self.truncation_prob) || !prob(self.max_overlap) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(self.min_object >= 4.0 && self.max_object >= self.min_object) {
            return Err(Error::Config("bad object size range".into()));
        }
        if !(self.frame_min_frac > 0.0 && self.frame_max_frac >= self.frame_min_frac && self.frame_max_frac <= 1.0) {
            return Err(Error::Config("bad frame size range".into()));
        }
        Ok(())
    }
}

/// Intensities and noise of the renderer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub background: f64,
    pub square_outline: f64,
    pub disk: f64,
    pub triangle: f64,
    pub frame: f64,
    /// Occluders are a checkerboard of these two intensities.
    pub occluder: [f64; 2],
    pub occluder_cell: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_level: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            background: 0.1,
            square_outline: 0.9,
            disk: 0.65,
            triangle: 0.45,
            frame: 0.8,
            occluder: [0.3, 0.55],
            occluder_cell: 2,
            noise_level: 0.05,
        }
    }
}

impl RenderConfig {
    pub fn intensity(&self, class: ShapeClass) -> f64 {
        match class {
            ShapeClass::SquareOutline => self.square_outline,
            ShapeClass::Disk => self.disk,
            ShapeClass::Triangle => self.triangle,
            ShapeClass::Frame => self.frame,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn object_extent<R: Rng + ?Sized>(rng: &mut R, class: ShapeClass, cfg: &SceneConfig, w: f64, h: f64) -> (f64, f64) {
    let short = w.min(h);
    let max_obj = cfg.max_object.min(0.8 * short);
    let min_obj = cfg.min_object.min(max_obj);
    match class {
        ShapeClass::Frame => {
            let fw = uniform(rng, cfg.frame_min_frac, cfg.frame_max_frac) * short;
            let aspect = uniform(rng, 1.25, 1.8);
            (fw, fw / aspect)
        }
        ShapeClass::Triangle => {
            let s = uniform(rng, min_obj, max_obj);
            (s, s * uniform(rng, 0.8, 1.1))
        }
        _ => {
            let s = uniform(rng, min_obj, max_obj);
            (s, s)
        }
    }
}

/// Places an object of extent `ow x oh`, truncated at a random border with probability
/// `truncation_prob`. Returns the box and the truncated fraction.
fn place<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig, ow: f64, oh: f64, w: f64, h: f64) -> (BBox, f64) {
    if rng.random_bool(cfg.truncation_prob) {
        let frac = uniform(rng, 0.2, 0.6);
        match rng.random_range(0..4) {
            0 => {
                let y = uniform(rng, 0.0, h - oh);
                (BBox::new(-frac * ow, y, (1.0 - frac) * ow, y + oh), frac)
            }
            1 => {
                let y = uniform(rng, 0.0, h - oh);
                (BBox::new(w - (1.0 - frac) * ow, y, w + frac * ow, y + oh), frac)
            }
            2 => {
                let x = uniform(rng, 0.0, w - ow);
                (BBox::new(x, -frac * oh, x + ow, (1.0 - frac) * oh), frac)
            }
            _ => {
                let x = uniform(rng, 0.0, w - ow);
                (BBox::new(x, h - (1.0 - frac) * oh, x + ow, h + frac * oh), frac)
            }
        }
    } else {
        let x = uniform(rng, 0.0, w - ow);
        let y = uniform(rng, 0.0, h - oh);
        (BBox::new(x, y, x + ow, y + oh), 0.0)
    }
}

/// A rectangle covering `frac` of `b`'s area, entering from a side or a corner.
fn occluder_for<R: Rng + ?Sized>(rng: &mut R, b: &BBox, frac: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    if rng.random_bool(0.5) {
        // side band: full extent on one axis, `frac` on the other
        match rng.random_range(0..4) {
            0 => BBox::new(b.x1, b.y1, b.x1 + frac * w, b.y2),
            1 => BBox::new(b.x2 - frac * w, b.y1, b.x2, b.y2),
            2 => BBox::new(b.x1, b.y1, b.x2, b.y1 + frac * h),
            _ => BBox::new(b.x1, b.y2 - frac * h, b.x2, b.y2),
        }
    } else {
        let s = frac.sqrt();
        let (cw, ch) = (s * w, s * h);
        match rng.random_range(0..4) {
            0 => BBox::new(b.x1, b.y1, b.x1 + cw, b.y1 + ch),
            1 => BBox::new(b.x2 - cw, b.y1, b.x2, b.y1 + ch),
            2 => BBox::new(b.x1, b.y2 - ch, b.x1 + cw, b.y2),
            _ => BBox::new(b.x2 - cw, b.y2 - ch, b.x2, b.y2),
        }
    }
}

/// Generates one scene; identical `(seed, config)` give identical scenes.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "scene", 0);
    let image_w = rng.random_range(cfg.min_side..=cfg.max_side);
    let image_h = rng.random_range(cfg.min_side..=cfg.max_side);
    let (w, h) = (image_w as f64, image_h as f64);
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    // The class is drawn once per slot and kept across placement retries, so that
    // classes that are harder to place are not under-represented.
    for _ in 0..target {
        let class = ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())];
        for _ in 0..40 {
            let (ow, oh) = object_extent(&mut rng, class, cfg, w, h);
            let (bbox, truncation) = place(&mut rng, cfg, ow, oh, w, h);
            let occluded = rng.random_bool(cfg.occlusion_prob);
            let frac = uniform(&mut rng, 0.2, 0.5);
            let occluder = occluder_for(&mut rng, &bbox, frac);
            let visible = bbox.clip(w, h);
            let clash = objects.iter().any(|o| {
                compute_iou(&o.bbox.clip(w, h), &visible) > cfg.max_overlap || o.bbox.clip(w, h).contains(&visible)
            });
            if clash || visible.width() < 4.0 || visible.height() < 4.0 {
                continue;
            }
            objects.push(SceneObject {
                class,
                bbox,
                occluders: if occluded { vec![occluder] } else { vec![] },
                truncation,
            });
            break;
        }
    }
    Ok(Scene {
        seed,
        image_w,
        image_h,
        objects,
    })
}

fn paint_box(img: &mut [f64], w: usize, h: usize, b: &BBox, mut f: impl FnMut(f64, f64, usize, usize) -> Option<f64>) {
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil().max(0.0) as usize).min(w);
    let y1 = (b.y2.ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            if px < b.x1 || px >= b.x2 || py < b.y1 || py >= b.y2 {
                continue;
            }
            if let Some(v) = f(px, py, x, y) {
                img[y * w + x] = v;
            }
        }
    }
}

fn outline_thickness(class: ShapeClass, b: &BBox) -> f64 {
    let short = b.width().min(b.height());
    match class {
        ShapeClass::Frame => (0.1 * short).max(2.0),
        _ => (0.2 * short).max(2.0),
    }
}

/// Whether the pixel center `(px, py)` lies on the shape of `class` inscribed in `b`.
pub fn shape_contains(class: ShapeClass, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x1 || px >= b.x2 || py < b.y1 || py >= b.y2 {
        return false;
    }
    let (cx, cy) = b.center();
    match class {
        ShapeClass::Disk => {
            let dx = (px - cx) / (0.5 * b.width());
            let dy = (py - cy) / (0.5 * b.height());
            dx * dx + dy * dy <= 1.0
        }
        ShapeClass::Triangle => {
            let t = (py - b.y1) / b.height();
            (px - cx).abs() <= 0.5 * b.width() * t
        }
        ShapeClass::SquareOutline | ShapeClass::Frame => {
            let t = outline_thickness(class, b);
            px < b.x1 + t || px >= b.x2 - t || py < b.y1 + t || py >= b.y2 - t
        }
    }
}

/// Renders a scene to a `1 x 1 x H x W` image with values in `[0, 1]`.
///
/// Noise is seeded from the scene seed, so the same scene always renders identically.
pub fn rasterize(scene: &Scene, render: &RenderConfig) -> Result<Tensor> {
    let (w, h) = (scene.image_w, scene.image_h);
    let mut img = vec![render.background; w * h];
    for o in &scene.objects {
        let v = render.intensity(o.class);
        paint_box(&mut img, w, h, &o.bbox, |px, py, _, _| shape_contains(o.class, &o.bbox, px, py).then_some(v));
    }
    let cell = render.occluder_cell.max(1);
    for o in &scene.objects {
        for occ in &o.occluders {
            paint_box(&mut img, w, h, occ, |_, _, x, y| Some(render.occluder[(x / cell + y / cell) % 2]));
        }
    }
    if render.noise_level > 0.0 {
        let mut rng = rng::stream(scene.seed, "pixel-noise", 0);
        let normal = Normal::new(0.0, render.noise_level)
            .map_err(|e| Error::Config(format!("noise level: {e}")))?;
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_vec(Shape::new(1, 1, h, w), img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
    pub render: RenderConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 2017,
            train_scenes: 500,
            test_scenes: 200,
            scene: SceneConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
        config.scene.validate()?;
        let split = |label: &str, n: usize| -> Result<Vec<Scene>> {
            (0..n as u64)
                .map(|i| generate_scene(derive_seed(config.seed, label, i), &config.scene))
                .collect()
        };
        Ok(Dataset {
            config: config.clone(),
            train: split("train", config.train_scenes)?,
            test: split("test", config.test_scenes)?,
        })
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            version: MANIFEST_VERSION,
            seed: self.config.seed,
            splits: SplitSizes {
                train: self.train.len(),
                test: self.test.len(),
            },
            classes: ShapeClass::ALL.iter().map(|c| c.name().to_string()).collect(),
            scene_config: self.config.scene.clone(),
            render_config: self.config.render.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
        }
    }

    pub fn from_manifest(m: &DatasetManifest) -> Result<Dataset> {
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
        }
        Ok(Dataset {
            config: DatasetConfig {
                seed: m.seed,
                train_scenes: m.train.len(),
                test_scenes: m.test.len(),
                scene: m.scene_config.clone(),
                render: m.render_config.clone(),
            },
            train: m.train.clone(),
            test: m.test.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

/// JSON-persisted description of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub splits: SplitSizes,
    pub classes: Vec<String>,
    pub scene_config: SceneConfig,
    pub render_config: RenderConfig,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary greyscale PPM (P5) of a single-channel image.
pub fn encode_pgm(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let mut out = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
    out.extend(image.plane(0, 0).iter().map(|&v| to_byte(v)));
    out
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(image))?;
    Ok(())
}

/// Parses a binary 8-bit PGM (P5) into a `1 x 1 x H x W` image scaled to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::InvalidArgument(format!("PGM: {m}"));
    // header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
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
    if fields[0] != "P5" {
        return Err(bad("only binary P5 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported dimensions or maxval"));
    }
    let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::from_vec(Shape::new(1, 1, h, w), data.iter().map(|&b| b as f64 / maxval as f64).collect())
}

/// Colour used for each class in overlays.
pub fn class_color(class: ShapeClass) -> [u8; 3] {
    match class {
        ShapeClass::SquareOutline => [255, 64, 64],
        ShapeClass::Disk => [64, 220, 64],
        ShapeClass::Triangle => [64, 128, 255],
        ShapeClass::Frame => [255, 200, 0],
    }
}

/// Binary colour PPM (P6) of a greyscale image with one-pixel box outlines drawn on top.
pub fn encode_overlay(image: &Tensor, boxes: &[(ShapeClass, BBox)]) -> Vec<u8> {
    let s = image.shape();
    let (w, h) = (s.w, s.h);
    let mut rgb: Vec<[u8; 3]> = image.plane(0, 0).iter().map(|&v| [to_byte(v); 3]).collect();
    for (class, b) in boxes {
        let color = class_color(*class);
        let clampx = |v: f64| (v.floor().max(0.0) as usize).min(w.saturating_sub(1));
        let clampy = |v: f64| (v.floor().max(0.0) as usize).min(h.saturating_sub(1));
        let (x0, x1) = (clampx(b.x1), clampx(b.x2 - 1e-9));
        let (y0, y1) = (clampy(b.y1), clampy(b.y2 - 1e-9));
        for x in x0..=x1 {
            rgb[y0 * w + x] = color;
            rgb[y1 * w + x] = color;
        }
        for y in y0..=y1 {
            rgb[y * w + x0] = color;
            rgb[y * w + x1] = color;
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.into_iter().flatten());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = Tensor::from_fn(Shape::new(1, 1, 3, 5), |_, _, h, w| (h * 5 + w) as f64 / 14.0);
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(11, &cfg).unwrap(), generate_scene(11, &cfg).unwrap());
        assert_ne!(generate_scene(11, &cfg).unwrap(), generate_scene(12, &cfg).unwrap());
    }

    #[test]
    fn no_occlusion_or_truncation_when_disabled() {
        let cfg = SceneConfig {
            occlusion_prob: 0.0,
            truncation_prob: 0.0,
            ..SceneConfig::default()
        };
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            for o in &s.objects {
                assert!(o.occluders.is_empty() && o.truncation == 0.0);
                assert!(BBox::new(0.0, 0.0, s.image_w as f64, s.image_h as f64).contains(&o.bbox));
            }
        }
    }

    #[test]
    fn scene_invariants_hold() {
        let cfg = SceneConfig::default();
        for seed in 0..300 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!((48..=96).contains(&s.image_w) && (48..=96).contains(&s.image_h));
            assert!((1..=4).contains(&s.objects.len()), "seed {seed}: {} objects", s.objects.len());
            for o in &s.objects {
                assert!((0.0..=0.6).contains(&o.truncation));
                let vis = o.bbox.clip(s.image_w as f64, s.image_h as f64);
                assert!(vis.area() > 0.0);
            }
        }
    }

    #[test]
    fn empty_scene_renders_constant_background() {
        let scene = Scene {
            seed: 0,
            image_w: 20,
            image_h: 10,
            objects: vec![],
        };
        let render = RenderConfig {
            noise_level: 0.0,
            ..RenderConfig::default()
        };
        let img = rasterize(&scene, &render).unwrap();
        assert!(img.data().iter().all(|&v| v == render.background));
    }

    #[test]
    fn rendering_is_bit_identical() {
        let s = generate_scene(5, &SceneConfig::default()).unwrap();
        let r = RenderConfig::default();
        assert_eq!(rasterize(&s, &r).unwrap(), rasterize(&s, &r).unwrap());
        assert!(rasterize(&s, &r).unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pgm_header_and_size() {
        let img = Tensor::full(Shape::new(1, 1, 3, 5), 1.0);
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        assert_eq!(bytes.len(), b"P5\n5 3\n255\n".len() + 15);
        assert!(bytes[bytes.len() - 15..].iter().all(|&b| b == 255));
    }

    #[test]
    fn labels_round_trip() {
        for c in ShapeClass::ALL {
            assert_eq!(ShapeClass::from_label(c.label()), Some(c));
        }
        assert_eq!(ShapeClass::from_label(0), None);
        assert_eq!(ShapeClass::from_label(5), None);
    }
}
