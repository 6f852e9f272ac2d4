use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::toy::ToyGrads;
use super::{inpaint, InpainterModel, ToyInpainter, ToyInpainterConfig};
use crate::corpus::load_corpus;
use crate::error::{Error, Result};
use crate::imaging::{random_rect_mask, Image, Mask, RngSeed};
use crate::loss::FeatureExtractor;
use crate::metrics::{psnr, Region};
use crate::nn::Tensor;

/// Smallest accepted training corpus.
pub const MIN_CORPUS_IMAGES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub corpus: PathBuf,
    /// Side of the square training crops.
    pub crop_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Hole coverage is drawn uniformly from this range per sample.
    pub coverage_range: (f64, f64),
    pub seed: RngSeed,
    pub batch_size: usize,
    /// Weight of the perceptual term relative to the hole L1 term.
    pub perceptual_weight: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            crop_size: 64,
            epochs: 20,
            learning_rate: 1e-3,
            coverage_range: (0.02, 0.25),
            seed: RngSeed(0),
            batch_size: 2,
            perceptual_weight: 0.1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.coverage_range;
        if self.crop_size < 16 {
            return Err(Error::validation(format!("crop_size {} < 16", self.crop_size)));
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::validation(format!(
                "coverage range ({lo}, {hi}) must satisfy 0 < min <= max < 1"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.perceptual_weight >= 0.0) {
            return Err(Error::validation("perceptual_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainingReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Trains a toy inpainter on the images in `cfg.corpus`.
pub fn train_toy(
    cfg: &TrainingConfig,
    arch: &ToyInpainterConfig,
) -> Result<(ToyInpainter, TrainingReport)> {
    cfg.validate()?;
    let images = load_corpus(&cfg.corpus, cfg.crop_size)?;
    train_on_images(&images, cfg, arch)
}

/// Trains on in-memory images (each at least `crop_size` on both sides).
///
/// Objective per sample: mean absolute error over hole pixels plus
/// `perceptual_weight` times the pyramid feature distance between the
/// composited output and the clean image. Optimised with Adam under a
/// cosine learning-rate decay.
pub fn train_on_images(
    images: &[Image],
    cfg: &TrainingConfig,
    arch: &ToyInpainterConfig,
) -> Result<(ToyInpainter, TrainingReport)> {
    cfg.validate()?;
    if images.len() < MIN_CORPUS_IMAGES {
        return Err(Error::Corpus(format!(
            "training needs at least {MIN_CORPUS_IMAGES} images, got {}",
            images.len()
        )));
    }
    if let Some(img) = images
        .iter()
        .find(|i| i.height() < cfg.crop_size || i.width() < cfg.crop_size)
    {
        return Err(Error::Corpus(format!(
            "image of {}x{} is smaller than the {} crop",
            img.height(),
            img.width(),
            cfg.crop_size
        )));
    }
    let mut model = ToyInpainter::new(format!("toy-{}", cfg.seed.0), *arch, cfg.seed.derive("init", 0))?;
    model.check_dimensions(cfg.crop_size, cfg.crop_size)?;
    let extractor = FeatureExtractor::random_pyramid();
    let mut rng = cfg.seed.derive("train", 0).rng();
    let mut adam = Adam::new(model.parameter_count());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let total_steps = cfg.epochs * images.len().div_ceil(cfg.batch_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Fisher–Yates with the training stream
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            for &idx in batch {
                let (sample, mask) = draw_sample(&images[idx], cfg, &mut rng)?;
                total += accumulate_sample(&model, &extractor, &sample, &mask, cfg, &mut grads)?;
            }
            let progress = adam.t as f64 / total_steps as f64;
            let lr = 0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.step(&mut model, &grads, 1.0 / batch.len() as f32, lr);
        }
        let mean = total / images.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged at epoch {epoch}")));
        }
        tracing::debug!(epoch, loss = mean, "toy inpainter epoch");
        epoch_losses.push(mean);
    }
    Ok((model, TrainingReport { epoch_losses }))
}

fn draw_sample(img: &Image, cfg: &TrainingConfig, rng: &mut impl Rng) -> Result<(Image, Mask)> {
    let s = cfg.crop_size;
    let top = rng.random_range(0..=img.height() - s);
    let left = rng.random_range(0..=img.width() - s);
    let flip = rng.random_bool(0.5);
    let crop = Image::from_fn(s, s, |c, y, x| {
        let xx = if flip { s - 1 - x } else { x };
        img.get(top + y, left + xx, c)
    })?;
    let (lo, hi) = cfg.coverage_range;
    let coverage = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let mask = random_rect_mask(s, s, coverage, RngSeed(rng.random()))?;
    Ok((crop, mask))
}

/// Adds the gradients of one sample's loss into `grads`; returns the loss.
fn accumulate_sample(
    model: &ToyInpainter,
    extractor: &FeatureExtractor,
    img: &Image,
    mask: &Mask,
    cfg: &TrainingConfig,
    grads: &mut ToyGrads,
) -> Result<f64> {
    let input = ToyInpainter::network_input(&crate::imaging::masked_input(img, mask)?, mask);
    let trace = model.forward_traced(input);
    let raw = trace.output();
    let known = mask.values();
    let holes = mask.hole_count().max(1) as f64 * 3.0;

    let mut composite = img.tensor().clone();
    let mut grad_raw = Tensor::zeros(3, img.height(), img.width());
    let mut l1 = 0.0;
    for c in 0..3 {
        let target = img.tensor().plane(c);
        let comp = composite.plane_mut(c);
        let g = grad_raw.plane_mut(c);
        for i in 0..known.len() {
            if known[i] == 0 {
                let r = raw.plane(c)[i];
                comp[i] = r;
                let d = r - target[i];
                l1 += d.abs() as f64;
                g[i] = (sign(d) as f64 / holes) as f32;
            }
        }
    }
    let mut loss = l1 / holes;

    if cfg.perceptual_weight > 0.0 {
        let reference = extractor.features(img.tensor())?;
        let (perc, mut g_comp) = extractor.distance_and_grad(&composite, &reference)?;
        loss += cfg.perceptual_weight * perc;
        g_comp.scale(cfg.perceptual_weight as f32);
        for c in 0..3 {
            let g = grad_raw.plane_mut(c);
            for (i, &gc) in g_comp.plane(c).iter().enumerate() {
                if known[i] == 0 {
                    g[i] += gc;
                }
            }
        }
    }
    model.backward(&trace, &grad_raw, Some(grads), false);
    Ok(loss)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, model: &mut ToyInpainter, grads: &ToyGrads, scale: f32, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let mut offset = 0;
        for (conv, g) in model.convs_mut().zip(grads.iter()) {
            for (params, gs) in [(&mut conv.weight, &g.weight), (&mut conv.bias, &g.bias)] {
                let m = &mut self.m[offset..offset + params.len()];
                let v = &mut self.v[offset..offset + params.len()];
                for i in 0..params.len() {
                    let gi = gs[i] * scale;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    params[i] -= step * m[i] / (v[i].sqrt() + eps);
                }
                offset += params.len();
            }
        }
    }
}

/// PSNR over the hole between the inpainted result and the clean image.
pub fn hole_psnr(model: &dyn InpainterModel, img: &Image, mask: &Mask) -> Result<f64> {
    let out = inpaint(model, img, mask)?;
    psnr(&out, img, Region::Hole(mask))
}
