//! Instance-level classification teacher trained on mixed source and
//! source-to-target crops. Serves frozen foreground logits.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, Gradients, Graph, Linear, Mode, ParamStore, Sgd};
use crate::parallel;
use crate::synthdomain::{apply_style, rng_for, Domain, InstanceCrop, Raster, StyleParams};
use crate::detcore::geometry::BBox;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub input_size: usize,
    pub channels: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Smallest random-crop area as a fraction of the input.
    pub min_crop_area: f64,
    /// Maximum hue rotation in radians.
    pub hue_jitter: f64,
    /// Maximum relative contrast change.
    pub contrast_jitter: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            channels: [8, 16, 32],
            epochs: 12,
            batch_size: 16,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 5e-4,
            min_crop_area: 0.8,
            hue_jitter: 0.3,
            contrast_jitter: 0.1,
        }
    }
}

/// Small convolutional classifier: three 3×3 convolutions (the first two
/// strided), global average pooling, and a linear map to K logits.
#[derive(Clone, Debug)]
struct TeacherNet {
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl TeacherNet {
    fn new<R: Rng>(ps: &mut ParamStore, cfg: &TeacherConfig, k: usize, rng: &mut R) -> Self {
        let strides = [2, 2, 1];
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, (&cout, &s)) in cfg.channels.iter().zip(&strides).enumerate() {
            convs.push(Conv2d::new(ps, &format!("teacher.conv{i}"), cin, cout, 3, s, 1, rng));
            cin = cout;
        }
        let fc = Linear::with_std(ps, "teacher.fc", cin, k, 0.1, rng);
        Self { convs, fc }
    }

    fn forward(&self, g: &mut Graph, ps: &ParamStore, img: &Raster, mode: Mode) -> crate::nn::Var {
        let mut x = g.input(img.to_tensor());
        for c in &self.convs {
            x = c.forward(g, ps, x, mode);
            x = g.relu(x);
        }
        let p = g.global_avg_pool(x);
        self.fc.forward(g, ps, p, mode)
    }
}

/// Frozen classification teacher.
#[derive(Clone, Debug)]
pub struct ClassifierTeacher {
    pub config: TeacherConfig,
    pub num_classes: usize,
    params: ParamStore,
    net: TeacherNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub seed: u64,
    pub train_accuracy: f64,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

#[derive(Serialize, Deserialize)]
struct TeacherFile {
    config: TeacherConfig,
    num_classes: usize,
    params: serde_json::Value,
}

impl ClassifierTeacher {
    fn init(config: TeacherConfig, num_classes: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let net = TeacherNet::new(&mut params, &config, num_classes, &mut rng_for(seed, 0x7ea));
        Self {
            config,
            num_classes,
            params,
            net,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    /// Foreground logits for one crop of the configured input size.
    pub fn logits(&self, crop: &Raster) -> Result<Vec<f64>> {
        let s = self.config.input_size;
        if crop.height() != s || crop.width() != s {
            return Err(Error::Shape(format!(
                "teacher expects {s}×{s} input, got {}×{}",
                crop.height(),
                crop.width()
            )));
        }
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, &self.params, crop, Mode::Frozen);
        Ok(g.value(out).data().to_vec())
    }

    pub fn logits_batch(&self, crops: &[Raster]) -> Result<Vec<Vec<f64>>> {
        parallel::map(crops, |c| self.logits(c)).into_iter().collect()
    }

    pub fn predict(&self, crop: &Raster) -> Result<usize> {
        Ok(argmax(&self.logits(crop)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = TeacherFile {
            config: self.config.clone(),
            num_classes: self.num_classes,
            params: self.params.to_value()?,
        };
        std::fs::write(path, serde_json::to_string(&f)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: TeacherFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut t = Self::init(f.config, f.num_classes, 0);
        t.params.load_values_from(&ParamStore::from_value(&f.params)?)?;
        Ok(t)
    }
}

/// `teacher_logits`: crop already resized to the teacher input size.
pub fn teacher_logits(teacher: &ClassifierTeacher, crop: &Raster) -> Result<Vec<f64>> {
    teacher.logits(crop)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Random crop covering at least `min_area` of the image, resized back,
/// followed by a hue rotation and contrast change.
pub fn augment<R: Rng>(img: &Raster, cfg: &TeacherConfig, rng: &mut R) -> Raster {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let area = rng.random_range(cfg.min_crop_area..=1.0);
    let side = area.sqrt();
    let (cw, ch) = (w * side, h * side);
    let x1 = rng.random_range(0.0..=(w - cw));
    let y1 = rng.random_range(0.0..=(h - ch));
    let cropped = img.crop_resize(&BBox::new(x1, y1, x1 + cw, y1 + ch), img.height(), img.width());
    let style = StyleParams {
        hue_shift: rng.random_range(-cfg.hue_jitter..=cfg.hue_jitter),
        contrast_scale: 1.0 + rng.random_range(-cfg.contrast_jitter..=cfg.contrast_jitter),
        ..StyleParams::IDENTITY
    };
    apply_style(&cropped, &style, 0)
}

/// Cross-entropy training of the teacher. Every class in `0..num_classes`
/// must appear in the corpus.
pub fn train_teacher(
    corpus: &[InstanceCrop],
    num_classes: usize,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<(ClassifierTeacher, TeacherReport)> {
    let mut counts = vec![0usize; num_classes];
    for c in corpus {
        if c.label >= num_classes {
            return Err(Error::InvalidInput(format!("label {} out of range", c.label)));
        }
        if c.image.height() != cfg.input_size || c.image.width() != cfg.input_size {
            return Err(Error::Shape(format!(
                "corpus crop is {}×{}, teacher input is {}",
                c.image.height(),
                c.image.width(),
                cfg.input_size
            )));
        }
        counts[c.label] += 1;
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!(
            "corpus has no crops of class {missing}; the teacher must cover all {num_classes} classes"
        )));
    }
    let has = |d: Domain| corpus.iter().any(|c| c.domain == d);
    if !(has(Domain::Source) && has(Domain::SourceToTarget)) {
        warn!("teacher corpus does not mix source and source-to-target crops");
    }

    let mut teacher = ClassifierTeacher::init(cfg.clone(), num_classes, seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut rng = rng_for(seed, 0x7eb);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let n_params = teacher.params.len();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let items: Vec<(Raster, usize)> = batch
                .iter()
                .map(|&i| (augment(&corpus[i].image, cfg, &mut rng), corpus[i].label))
                .collect();
            let net = &teacher.net;
            let ps = &teacher.params;
            let results = parallel::map(&items, |(img, y)| {
                let mut g = Graph::new();
                let logits = net.forward(&mut g, ps, img, Mode::Train);
                let loss = g.softmax_ce(logits, vec![*y], vec![1.0], 1.0);
                let v = g.value(loss).item();
                (v, g.backward(loss, n_params).0)
            });
            let mut grads = Gradients::new(n_params);
            for (v, gr) in &results {
                total += v;
                grads.merge(gr);
            }
            grads.scale(1.0 / items.len() as f64);
            opt.step(&mut teacher.params, &grads);
            steps += 1;
        }
        let mean = total / corpus.len() as f64;
        info!("teacher epoch {epoch}: loss {mean:.4}");
        epoch_loss.push(mean);
    }
    let train_accuracy = accuracy(&teacher, corpus.iter())?;
    info!("teacher train accuracy {train_accuracy:.3}");
    Ok((
        teacher,
        TeacherReport {
            seed,
            train_accuracy,
            epoch_loss,
            steps,
        },
    ))
}

pub fn accuracy<'a>(teacher: &ClassifierTeacher, crops: impl Iterator<Item = &'a InstanceCrop>) -> Result<f64> {
    let crops: Vec<&InstanceCrop> = crops.collect();
    if crops.is_empty() {
        return Ok(0.0);
    }
    let hits = parallel::map(&crops, |c| teacher.predict(&c.image).map(|p| p == c.label))
        .into_iter()
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / crops.len() as f64)
}

/// Train/holdout index split persisted alongside the teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

pub fn split_corpus(n: usize, holdout_fraction: f64, seed: u64) -> SplitManifest {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, 0x5b1));
    let n_hold = ((n as f64) * holdout_fraction).round() as usize;
    let mut holdout = idx[..n_hold].to_vec();
    let mut train = idx[n_hold..].to_vec();
    holdout.sort_unstable();
    train.sort_unstable();
    SplitManifest { seed, train, holdout }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub source_accuracy: f64,
    pub source_to_target_accuracy: f64,
    /// Absolute gap in percentage points.
    pub gap_pp: f64,
}

/// Held-out accuracy on source vs source-to-target crops.
pub fn balance_check(teacher: &ClassifierTeacher, holdout: &[InstanceCrop]) -> Result<BalanceReport> {
    let s = accuracy(teacher, holdout.iter().filter(|c| c.domain == Domain::Source))?;
    let t = accuracy(
        teacher,
        holdout.iter().filter(|c| c.domain == Domain::SourceToTarget),
    )?;
    Ok(BalanceReport {
        source_accuracy: s,
        source_to_target_accuracy: t,
        gap_pp: 100.0 * (s - t).abs(),
    })
}
