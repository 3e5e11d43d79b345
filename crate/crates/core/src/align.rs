//! Adversarial feature alignment: image- and instance-level domain
//! discriminators behind gradient reversal.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{bce_with_logits, Conv2d, Graph, Linear, Mode, ParamStore, Var};
use crate::{Error, Result};

/// Identity forward; gradients below are multiplied by `-lambda`.
pub fn grl(g: &mut Graph, x: Var, lambda: f64) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidInput(format!("lambda_grl must be >= 0, got {lambda}")));
    }
    Ok(g.grl(x, lambda))
}

/// Two 1×1 convolutions giving one domain logit per feature pixel.
#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

impl ImageDiscriminator {
    pub fn new<R: Rng>(ps: &mut ParamStore, prefix: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            c1: Conv2d::new(ps, &format!("{prefix}.c1"), channels, hidden, 1, 1, 0, rng),
            c2: Conv2d::new(ps, &format!("{prefix}.c2"), hidden, 1, 1, 1, 0, rng),
        }
    }

    /// Logits `[1, H_f, W_f]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, features: Var, mode: Mode) -> Var {
        let h = self.c1.forward(g, ps, features, mode);
        let h = g.relu(h);
        self.c2.forward(g, ps, h, mode)
    }
}

/// Two-layer perceptron on pooled region features.
#[derive(Clone, Debug)]
pub struct InstanceDiscriminator {
    pub l1: Linear,
    pub l2: Linear,
}

impl InstanceDiscriminator {
    pub fn new<R: Rng>(ps: &mut ParamStore, prefix: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(ps, &format!("{prefix}.l1"), in_dim, hidden, rng),
            l2: Linear::with_std(ps, &format!("{prefix}.l2"), hidden, 1, 0.01, rng),
        }
    }

    /// Logits `[N, 1]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, roi_feats: Var, mode: Mode) -> Var {
        let h = self.l1.forward(g, ps, roi_feats, mode);
        let h = g.relu(h);
        self.l2.forward(g, ps, h, mode)
    }
}

/// Both discriminators with a shared reversal coefficient.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub image: ImageDiscriminator,
    pub instance: InstanceDiscriminator,
    pub lambda_grl: f64,
}

pub struct AdvOut {
    pub image_loss: Var,
    pub instance_loss: Var,
    /// `image_loss + instance_loss`.
    pub total: Var,
    pub image_logits: Var,
    pub instance_logits: Option<Var>,
}

impl Aligner {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        channels: usize,
        roi_dim: usize,
        hidden: usize,
        lambda_grl: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            image: ImageDiscriminator::new(ps, "align.img", channels, hidden, rng),
            instance: InstanceDiscriminator::new(ps, "align.ins", roi_dim, hidden, rng),
            lambda_grl,
        }
    }

    /// Adversarial losses for one image of domain `d` (0 source, 1 target).
    /// `roi_feats` may be absent when an image has no regions.
    pub fn adv_losses(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        features: Var,
        roi_feats: Option<Var>,
        d: f64,
    ) -> Result<AdvOut> {
        let f = grl(g, features, self.lambda_grl)?;
        let image_logits = self.image.forward(g, ps, f, Mode::Train);
        let n = g.value(image_logits).len();
        let image_loss = g.bce_logits(image_logits, vec![d; n], n as f64);
        let (instance_loss, instance_logits) = match roi_feats {
            Some(r) => {
                let r = grl(g, r, self.lambda_grl)?;
                let logits = self.instance.forward(g, ps, r, Mode::Train);
                let m = g.value(logits).len();
                (g.bce_logits(logits, vec![d; m], m as f64), Some(logits))
            }
            None => {
                let z = g.input(crate::nn::Tensor::scalar(0.0));
                (z, None)
            }
        };
        let total = g.add(image_loss, instance_loss);
        Ok(AdvOut {
            image_loss,
            instance_loss,
            total,
            image_logits,
            instance_logits,
        })
    }
}

/// Mean binary cross-entropy of logits against a constant label.
pub fn mean_bce(logits: &[f64], d: f64) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().map(|&z| bce_with_logits(z, d)).sum::<f64>() / logits.len() as f64
}

/// `L_DA = L_det + lambda_adv * L_adv`.
pub fn da_objective(l_det: f64, l_adv: f64, lambda_adv: f64) -> f64 {
    l_det + lambda_adv * l_adv
}

pub fn da_objective_graph(g: &mut Graph, l_det: Var, l_adv: Var, lambda_adv: f64) -> Var {
    let a = g.scale(l_adv, lambda_adv);
    g.add(l_det, a)
}

/// Fraction of logits on the correct side of zero for label `d`.
pub fn disc_accuracy(logits: &[f64], d: f64) -> (usize, usize) {
    let correct = logits.iter().filter(|&&z| (z > 0.0) == (d > 0.5)).count();
    (correct, logits.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignLogRow {
    pub step: usize,
    #[serde(rename = "L_det")]
    pub l_det: f64,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    pub disc_acc: f64,
}

/// Append rows as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
