//! Synthetic two-domain scenes.
//!
//! Source scenes are coloured geometric objects on a textured background.
//! The target domain applies a fixed parametric style (hue rotation,
//! contrast change, blur, noise and a white haze) to the same renderer, and
//! the source-to-target domain re-renders source scenes in that style while
//! keeping their annotations.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detcore::geometry::{iou, BBox};
use crate::nn::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "S")]
    Source,
    #[serde(rename = "T")]
    Target,
    #[serde(rename = "T'")]
    SourceToTarget,
}

impl Domain {
    /// Domain label used by discriminators: 0 for source, 1 otherwise.
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 0.0,
            Domain::Target | Domain::SourceToTarget => 1.0,
        }
    }
}

/// Three-channel image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone())
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// `i + 0.5`), clamped at the border.
    pub fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
        let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Crop `b` and resize it to `out_h × out_w` with bilinear interpolation.
    pub fn crop_resize(&self, b: &BBox, out_h: usize, out_w: usize) -> Raster {
        let mut out = Raster::filled(out_h, out_w, 0.0);
        let sy = b.height() / out_h as f64;
        let sx = b.width() / out_w as f64;
        for c in 0..3 {
            for i in 0..out_h {
                let y = b.y1 + (i as f64 + 0.5) * sy;
                for j in 0..out_w {
                    let x = b.x1 + (j as f64 + 0.5) * sx;
                    out.set(c, i, j, self.sample(c, y, x));
                }
            }
        }
        out
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let img = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(
            self.width as u32,
            self.height as u32,
            |x, y| {
                let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 65535.0).round() as u16;
                Rgb([px(0), px(1), px(2)])
            },
        );
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Raster> {
        let img = image::open(path)?.into_rgb16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Raster::filled(h, w, 0.0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, f64::from(p.0[c]) / 65535.0);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub image: Raster,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub seed: u64,
}

impl LabeledScene {
    /// Checks the box/label/pixel invariants.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        if self.boxes.len() != self.labels.len() {
            return Err(Error::InvalidInput("boxes and labels differ in length".into()));
        }
        for b in &self.boxes {
            if !b.is_valid() || !b.inside(w, h) {
                return Err(Error::InvalidInput(format!("box {b:?} out of bounds")));
            }
        }
        if self.labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::InvalidInput("label out of range".into()));
        }
        if self.image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("pixel outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Parametric style transform standing in for learned image translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Hue rotation in radians about the grey axis.
    pub hue_shift: f64,
    pub contrast_scale: f64,
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub haze_alpha: f64,
}

impl StyleParams {
    pub const IDENTITY: StyleParams = StyleParams {
        hue_shift: 0.0,
        contrast_scale: 1.0,
        blur_sigma: 0.0,
        noise_std: 0.0,
        haze_alpha: 0.0,
    };

    /// Default fog-like target style.
    pub fn fog() -> Self {
        Self {
            hue_shift: 0.5,
            contrast_scale: 0.65,
            blur_sigma: 0.7,
            noise_std: 0.03,
            haze_alpha: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma < 0.0 || self.noise_std < 0.0 || !(0.0..=1.0).contains(&self.haze_alpha) {
            return Err(Error::Config(format!("invalid style parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub target_style: StyleParams,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 12.0,
            max_size: 24.0,
            target_style: StyleParams::fog(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("scene must be at least 16×16".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.num_classes > SHAPES.len() * PALETTE.len() {
            return Err(Error::Config("too many classes for the shape/colour table".into()));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(Error::Config("invalid object count range".into()));
        }
        if self.min_size < 2.0
            || self.max_size < self.min_size
            || self.max_size > self.height.min(self.width) as f64
        {
            return Err(Error::Config("invalid object size range".into()));
        }
        self.target_style.validate()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

const SHAPES: [Shape; 3] = [Shape::Rect, Shape::Ellipse, Shape::Triangle];

const PALETTE: [[f64; 3]; 3] = [[0.9, 0.15, 0.1], [0.15, 0.8, 0.2], [0.15, 0.3, 0.95]];

/// Class `k` renders as shape `k mod 3` in colour `(k + k / 3) mod 3`.
fn class_appearance(k: usize) -> (Shape, [f64; 3]) {
    (SHAPES[k % 3], PALETTE[(k + k / 3) % 3])
}

fn shape_covers(shape: Shape, b: &BBox, x: f64, y: f64) -> bool {
    let (cx, cy) = b.center();
    let (hw, hh) = (0.5 * b.width(), 0.5 * b.height());
    match shape {
        Shape::Rect => b.contains_point(x, y),
        Shape::Ellipse => {
            let (dx, dy) = ((x - cx) / hw, (y - cy) / hh);
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            // apex at top centre, base along the bottom edge
            if y < b.y1 || y > b.y2 {
                return false;
            }
            let t = (y - b.y1) / b.height();
            (x - cx).abs() <= t * hw
        }
    }
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child RNG for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

const GEOMETRY_STREAM: u64 = 1;
const STYLE_STREAM: u64 = 2;

fn render_source(seed: u64, cfg: &SceneConfig) -> (Raster, Vec<BBox>, Vec<usize>) {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng_for(seed, GEOMETRY_STREAM);

    // background: grey base, two oriented sinusoids, fine grain
    let base = rng.random_range(0.35..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let f1 = rng.random_range(0.05..0.25);
    let f2 = rng.random_range(0.05..0.25);
    let a1 = rng.random_range(0.0..std::f64::consts::PI);
    let ph = rng.random_range(0.0..std::f64::consts::TAU);
    let mut img = Raster::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let wave = 0.06 * ((a1.cos() * xf + a1.sin() * yf) * f1 + ph).sin()
                + 0.04 * ((xf - yf) * f2).cos();
            let grain = rng.random_range(-0.03..0.03);
            for (c, t) in tint.iter().enumerate() {
                img.set(c, y, x, (base + t + wave + grain).clamp(0.0, 1.0));
            }
        }
    }

    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        for _attempt in 0..50 {
            let bw = rng.random_range(cfg.min_size..=cfg.max_size);
            let bh = (bw * rng.random_range(0.8..1.25)).clamp(cfg.min_size, cfg.max_size);
            let x1 = rng.random_range(0.0..=(w as f64 - bw)).floor();
            let y1 = rng.random_range(0.0..=(h as f64 - bh)).floor();
            let cand = BBox::new(x1, y1, x1 + bw.round(), y1 + bh.round());
            if boxes.iter().any(|b| iou(b, &cand) > 0.0) {
                continue;
            }
            let label = rng.random_range(0..cfg.num_classes);
            let (shape, color) = class_appearance(label);
            let shade = rng.random_range(0.85..1.0);
            // rasterise at pixel centres and take the tight box of covered pixels
            let (mut mx1, mut my1, mut mx2, mut my2) = (usize::MAX, usize::MAX, 0, 0);
            for y in cand.y1 as usize..(cand.y2 as usize).min(h) {
                for x in cand.x1 as usize..(cand.x2 as usize).min(w) {
                    if shape_covers(shape, &cand, x as f64 + 0.5, y as f64 + 0.5) {
                        for (c, col) in color.iter().enumerate() {
                            img.set(c, y, x, (col * shade).clamp(0.0, 1.0));
                        }
                        mx1 = mx1.min(x);
                        my1 = my1.min(y);
                        mx2 = mx2.max(x);
                        my2 = my2.max(y);
                    }
                }
            }
            if mx1 == usize::MAX {
                continue;
            }
            boxes.push(BBox::new(
                mx1 as f64,
                my1 as f64,
                (mx2 + 1) as f64,
                (my2 + 1) as f64,
            ));
            labels.push(label);
            break;
        }
    }
    (img, boxes, labels)
}

/// Generate one scene. Target and source-to-target scenes share geometry and
/// labels with the source scene of the same seed.
pub fn gen_scene(seed: u64, domain: Domain, cfg: &SceneConfig) -> Result<LabeledScene> {
    cfg.validate()?;
    let (image, boxes, labels) = render_source(seed, cfg);
    let scene = LabeledScene {
        image,
        boxes,
        labels,
        domain: Domain::Source,
        seed,
    };
    Ok(match domain {
        Domain::Source => scene,
        Domain::SourceToTarget => stylize_to_target(&scene, &cfg.target_style)?,
        Domain::Target => LabeledScene {
            domain: Domain::Target,
            ..stylize_to_target(&scene, &cfg.target_style)?
        },
    })
}

/// Re-render a source scene in the target style, sharing its labels.
pub fn stylize_to_target(scene: &LabeledScene, style: &StyleParams) -> Result<LabeledScene> {
    if scene.domain != Domain::Source {
        return Err(Error::InvalidInput(format!(
            "stylize_to_target expects a source scene, got {:?}",
            scene.domain
        )));
    }
    style.validate()?;
    Ok(LabeledScene {
        image: apply_style(&scene.image, style, scene.seed),
        boxes: scene.boxes.clone(),
        labels: scene.labels.clone(),
        domain: Domain::SourceToTarget,
        seed: scene.seed,
    })
}

/// Apply `style` in the order hue, contrast, blur, noise, haze. Steps at
/// their identity setting are skipped, so the identity style returns the
/// input bit for bit.
pub fn apply_style(img: &Raster, style: &StyleParams, seed: u64) -> Raster {
    let mut out = img.clone();
    let (h, w) = (img.height, img.width);
    let hw = h * w;
    if style.hue_shift != 0.0 {
        let m = hue_rotation(style.hue_shift);
        for p in 0..hw {
            let rgb = [out.data[p], out.data[hw + p], out.data[2 * hw + p]];
            for c in 0..3 {
                let v = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2];
                out.data[c * hw + p] = v.clamp(0.0, 1.0);
            }
        }
    }
    if style.contrast_scale != 1.0 {
        for v in &mut out.data {
            *v = ((*v - 0.5) * style.contrast_scale + 0.5).clamp(0.0, 1.0);
        }
    }
    if style.blur_sigma > 0.0 {
        out = gaussian_blur(&out, style.blur_sigma);
    }
    if style.noise_std > 0.0 {
        let mut rng = rng_for(seed, STYLE_STREAM);
        let normal = Normal::new(0.0, style.noise_std).expect("finite noise std");
        for v in &mut out.data {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    if style.haze_alpha != 0.0 {
        let a = style.haze_alpha;
        for v in &mut out.data {
            *v = ((1.0 - a) * *v + a).clamp(0.0, 1.0);
        }
    }
    out
}

/// Rotation by `theta` about the `(1, 1, 1)` axis of RGB space.
fn hue_rotation(theta: f64) -> [[f64; 3]; 3] {
    let (c, s) = (theta.cos(), theta.sin());
    let k: f64 = 1.0 / 3.0;
    let r = k.sqrt();
    let a = c + (1.0 - c) * k;
    let b = (1.0 - c) * k - r * s;
    let d = (1.0 - c) * k + r * s;
    [[a, b, d], [d, a, b], [b, d, a]]
}

fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|v| v / total).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += kv * img.get(c, y as usize, xx as usize);
                }
                tmp.set(c, y as usize, x as usize, acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += kv * tmp.get(c, yy as usize, x as usize);
                }
                out.set(c, y as usize, x as usize, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// One ground-truth object crop for the classification teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceCrop {
    pub image: Raster,
    pub label: usize,
    pub domain: Domain,
    pub scene_seed: u64,
    pub source_box: BBox,
}

/// One crop per non-degenerate ground-truth box, bilinearly resized to
/// `crop_size × crop_size`.
pub fn build_instance_corpus(scenes: &[LabeledScene], crop_size: usize) -> Result<Vec<InstanceCrop>> {
    let mut corpus = Vec::new();
    for scene in scenes {
        if scene.domain == Domain::Target {
            return Err(Error::InvalidInput(
                "instance corpus is built from source and source-to-target scenes only".into(),
            ));
        }
        for (b, &label) in scene.boxes.iter().zip(&scene.labels) {
            if b.area() < 1.0 || !b.is_valid() {
                warn!("skipping degenerate box {b:?} in scene {}", scene.seed);
                continue;
            }
            corpus.push(InstanceCrop {
                image: scene.image.crop_resize(b, crop_size, crop_size),
                label,
                domain: scene.domain,
                scene_seed: scene.seed,
                source_box: *b,
            });
        }
    }
    Ok(corpus)
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    file: String,
    boxes: Vec<BBox>,
    labels: Vec<usize>,
    domain: Domain,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CropRecord {
    file: String,
    label: usize,
    domain: Domain,
    scene_seed: u64,
    source_box: BBox,
}

pub const INDEX_FILE: &str = "index.json";

/// Write scenes as 16-bit PNGs plus `index.json`.
pub fn save_scenes(dir: &Path, scenes: &[LabeledScene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("{i:05}.png");
        s.image.save_png16(&dir.join(&file))?;
        index.push(SceneRecord {
            file,
            boxes: s.boxes.clone(),
            labels: s.labels.clone(),
            domain: s.domain,
            seed: s.seed,
        });
    }
    std::fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_scenes(dir: &Path) -> Result<Vec<LabeledScene>> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.exists() {
        return Err(Error::Config(format!("no dataset index at {}", index_path.display())));
    }
    let index: Vec<SceneRecord> = serde_json::from_str(&std::fs::read_to_string(index_path)?)?;
    index
        .into_iter()
        .map(|r| {
            Ok(LabeledScene {
                image: Raster::load_png(&dir.join(&r.file))?,
                boxes: r.boxes,
                labels: r.labels,
                domain: r.domain,
                seed: r.seed,
            })
        })
        .collect()
}

pub fn save_corpus(dir: &Path, corpus: &[InstanceCrop]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(corpus.len());
    for (i, c) in corpus.iter().enumerate() {
        let file = format!("{i:05}.png");
        c.image.save_png16(&dir.join(&file))?;
        index.push(CropRecord {
            file,
            label: c.label,
            domain: c.domain,
            scene_seed: c.scene_seed,
            source_box: c.source_box,
        });
    }
    std::fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<InstanceCrop>> {
    let index: Vec<CropRecord> =
        serde_json::from_str(&std::fs::read_to_string(dir.join(INDEX_FILE))?)?;
    index
        .into_iter()
        .map(|r| {
            Ok(InstanceCrop {
                image: Raster::load_png(&dir.join(&r.file))?,
                label: r.label,
                domain: r.domain,
                scene_seed: r.scene_seed,
                source_box: r.source_box,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SceneConfig {
        SceneConfig::default()
    }

    #[test]
    fn source_scene_satisfies_contract() {
        let s = gen_scene(0, Domain::Source, &cfg()).unwrap();
        assert_eq!(s.domain, Domain::Source);
        assert!(!s.boxes.is_empty());
        s.validate(3).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_scene(7, Domain::Target, &cfg()).unwrap();
        let b = gen_scene(7, Domain::Target, &cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_shares_geometry_but_not_pixels() {
        let s = gen_scene(0, Domain::Source, &cfg()).unwrap();
        let t = gen_scene(0, Domain::Target, &cfg()).unwrap();
        assert_eq!(s.boxes, t.boxes);
        assert_eq!(s.labels, t.labels);
        let differing = s
            .image
            .data()
            .iter()
            .zip(t.image.data())
            .filter(|(a, b)| a != b)
            .count();
        assert!(differing > s.image.data().len() / 2);
    }

    #[test]
    fn rejects_small_or_single_class_configs() {
        let small = SceneConfig {
            height: 15,
            ..cfg()
        };
        assert!(gen_scene(0, Domain::Source, &small).is_err());
        let one = SceneConfig {
            num_classes: 1,
            ..cfg()
        };
        assert!(gen_scene(0, Domain::Source, &one).is_err());
    }

    #[test]
    fn identity_style_is_bit_identical() {
        let s = gen_scene(3, Domain::Source, &cfg()).unwrap();
        let t = stylize_to_target(&s, &StyleParams::IDENTITY).unwrap();
        assert_eq!(t.image, s.image);
        assert_eq!(t.domain, Domain::SourceToTarget);
    }

    #[test]
    fn haze_blend_of_black_is_half_grey() {
        let img = Raster::filled(16, 16, 0.0);
        let style = StyleParams {
            haze_alpha: 0.5,
            ..StyleParams::IDENTITY
        };
        let out = apply_style(&img, &style, 0);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn stylize_rejects_non_source() {
        let t = gen_scene(1, Domain::Target, &cfg()).unwrap();
        assert!(stylize_to_target(&t, &StyleParams::fog()).is_err());
    }

    #[test]
    fn hue_rotation_keeps_grey() {
        let m = hue_rotation(0.9);
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_counts_and_histogram() {
        let c = cfg();
        assert!(build_instance_corpus(&[], 32).unwrap().is_empty());
        let mut scenes = Vec::new();
        for seed in 0..6 {
            let s = gen_scene(seed, Domain::Source, &c).unwrap();
            scenes.push(if seed % 2 == 0 {
                s
            } else {
                stylize_to_target(&s, &c.target_style).unwrap()
            });
        }
        let corpus = build_instance_corpus(&scenes, 32).unwrap();
        let total: usize = scenes.iter().map(|s| s.boxes.len()).sum();
        assert_eq!(corpus.len(), total);
        let mut expected = [0usize; 3];
        for s in &scenes {
            for &l in &s.labels {
                expected[l] += 1;
            }
        }
        let mut got = [0usize; 3];
        for crop in &corpus {
            got[crop.label] += 1;
            assert_eq!(crop.image.height(), 32);
        }
        assert_eq!(got, expected);
    }

    #[test]
    fn corpus_counts_fixed_boxes() {
        let mut scenes = Vec::new();
        for seed in 0..2 {
            let mut s = gen_scene(seed, Domain::Source, &cfg()).unwrap();
            s.boxes = vec![
                BBox::new(0.0, 0.0, 10.0, 10.0),
                BBox::new(20.0, 20.0, 30.0, 35.0),
                BBox::new(40.0, 5.0, 60.0, 20.0),
            ];
            s.labels = vec![0, 1, 2];
            scenes.push(s);
        }
        assert_eq!(build_instance_corpus(&scenes, 32).unwrap().len(), 6);
        scenes[0].boxes[0] = BBox::new(3.0, 3.0, 3.5, 3.5);
        assert_eq!(build_instance_corpus(&scenes, 32).unwrap().len(), 5);
    }

    #[test]
    fn corpus_rejects_target_scenes() {
        let t = gen_scene(1, Domain::Target, &cfg()).unwrap();
        assert!(build_instance_corpus(&[t], 32).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes: Vec<_> = (0..3)
            .map(|s| gen_scene(s, Domain::Source, &cfg()).unwrap())
            .collect();
        save_scenes(dir.path(), &scenes).unwrap();
        let back = load_scenes(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.seed, b.seed);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-12);
            }
        }
        assert!(load_scenes(&dir.path().join("missing")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn style_preserves_payload(seed in 0u64..10_000) {
            let s = gen_scene(seed, Domain::Source, &cfg()).unwrap();
            let t = stylize_to_target(&s, &StyleParams::fog()).unwrap();
            prop_assert_eq!(&t.boxes, &s.boxes);
            prop_assert_eq!(&t.labels, &s.labels);
            t.validate(3).unwrap();
        }

        #[test]
        fn crops_lie_inside_origin(seed in 0u64..10_000) {
            let s = gen_scene(seed, Domain::Source, &cfg()).unwrap();
            for crop in build_instance_corpus(std::slice::from_ref(&s), 32).unwrap() {
                prop_assert!(crop.source_box.inside(64.0, 64.0));
            }
        }
    }
}
