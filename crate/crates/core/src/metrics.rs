//! Patch-level comparison metrics: loss, L2, PSNR and SSIM, each restricted
//! to the inpainted region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, Image, Mask};
use crate::inpaint::{inpaint, InpainterModel};
use crate::loss::{mark_loss, LossConfig};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Which pixels a metric averages over.
#[derive(Debug, Clone, Copy)]
pub enum Region<'a> {
    All,
    /// Pixels where the mask is 0.
    Hole(&'a Mask),
}

impl Region<'_> {
    fn pixels(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        let idx: Vec<usize> = match self {
            Region::All => (0..height * width).collect(),
            Region::Hole(mask) => {
                if mask.dims() != (height, width) {
                    return Err(Error::DimensionMismatch {
                        expected: (height, width),
                        found: mask.dims(),
                    });
                }
                mask.values()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v == 0)
                    .map(|(i, _)| i)
                    .collect()
            }
        };
        if idx.is_empty() {
            return Err(Error::EmptyRegion);
        }
        Ok(idx)
    }
}

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    Ok(())
}

/// Mean squared error over the region, all channels.
pub fn l2_metric(a: &Image, b: &Image, region: Region<'_>) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    let idx = region.pixels(h, w)?;
    let plane = h * w;
    let mut sq = 0.0f64;
    for c in 0..3 {
        for &i in &idx {
            let d = a.data()[c * plane + i] as f64 - b.data()[c * plane + i] as f64;
            sq += d * d;
        }
    }
    Ok(sq / (3 * idx.len()) as f64)
}

/// `10 · log10(1 / MSE)` with peak 1; `+∞` for identical regions.
pub fn psnr(a: &Image, b: &Image, region: Region<'_>) -> Result<f64> {
    Ok(psnr_from_mse(l2_metric(a, b, region)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Symmetric (edge-repeating) reflection of `i` into `0..n`.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian filtering of a plane with symmetric padding.
fn gaussian_filter(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + reflect_index(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect_index(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-pixel SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03,
/// dynamic range 1), averaged over channels.
pub fn ssim_map(a: &Image, b: &Image) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = h * w;
    let mut map = vec![0.0; n];
    for c in 0..3 {
        let pa: Vec<f64> = a.tensor().plane(c).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.tensor().plane(c).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = gaussian_filter(&pa, h, w, &k);
        let mu_b = gaussian_filter(&pb, h, w, &k);
        let e_aa = gaussian_filter(&prod(&pa, &pa), h, w, &k);
        let e_bb = gaussian_filter(&prod(&pb, &pb), h, w, &k);
        let e_ab = gaussian_filter(&prod(&pa, &pb), h, w, &k);
        for i in 0..n {
            let var_a = e_aa[i] - mu_a[i] * mu_a[i];
            let var_b = e_bb[i] - mu_b[i] * mu_b[i];
            let cov = e_ab[i] - mu_a[i] * mu_b[i];
            let s = ((2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2))
                / ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2));
            map[i] += s / 3.0;
        }
    }
    Ok(map)
}

/// Mean of [`ssim_map`] over the region.
pub fn ssim(a: &Image, b: &Image, region: Region<'_>) -> Result<f64> {
    let map = ssim_map(a, b)?;
    let idx = region.pixels(a.height(), a.width())?;
    Ok(idx.iter().map(|&i| map[i]).sum::<f64>() / idx.len() as f64)
}

/// `mark_loss` between the hole's bounding-box crops of `a` and `b`,
/// bilinearly enlarged to the extractor's minimum input when needed.
pub fn patch_loss(a: &Image, b: &Image, mask: &Mask, cfg: &LossConfig) -> Result<f64> {
    check_pair(a, b)?;
    a.ensure_same_dims(mask.dims())?;
    let rect = mask.hole_bounding_box().ok_or(Error::EmptyRegion)?;
    let (mut ca, mut cb) = (a.crop(&rect)?, b.crop(&rect)?);
    let min = cfg.extractor.min_size();
    if rect.rect_height < min || rect.rect_width < min {
        let (h, w) = (rect.rect_height.max(min), rect.rect_width.max(min));
        ca = resize_bilinear(&ca, h, w)?;
        cb = resize_bilinear(&cb, h, w)?;
    }
    mark_loss(&ca, &cb, cfg)
}

/// The four metrics of the inpainted patch against one reference image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub loss: f64,
    pub l2: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricRow {
    pub fn compare(mark: &Image, reference: &Image, mask: &Mask, cfg: &LossConfig) -> Result<Self> {
        let region = Region::Hole(mask);
        let l2 = l2_metric(mark, reference, region)?;
        Ok(Self {
            loss: patch_loss(mark, reference, mask, cfg)?,
            l2,
            psnr: psnr_from_mse(l2),
            ssim: ssim(mark, reference, region)?,
        })
    }
}

/// Reference images a markpainted patch is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Original,
    Target,
    Benign,
}

impl Reference {
    pub const ALL: [Reference; 3] = [Reference::Original, Reference::Target, Reference::Benign];

    pub fn as_str(&self) -> &'static str {
        match self {
            Reference::Original => "original",
            Reference::Target => "target",
            Reference::Benign => "benign",
        }
    }
}

/// The markpainted patch against the original, the target and the benign fill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub original: MetricRow,
    pub target: MetricRow,
    pub benign: MetricRow,
}

impl ComparisonReport {
    pub fn row(&self, reference: Reference) -> &MetricRow {
        match reference {
            Reference::Original => &self.original,
            Reference::Target => &self.target,
            Reference::Benign => &self.benign,
        }
    }

    /// Builds the report from precomputed inpainting results.
    pub fn from_outputs(
        img: &Image,
        target: &Image,
        benign: &Image,
        mark: &Image,
        mask: &Mask,
        cfg: &LossConfig,
    ) -> Result<Self> {
        Ok(Self {
            original: MetricRow::compare(mark, img, mask, cfg)?,
            target: MetricRow::compare(mark, target, mask, cfg)?,
            benign: MetricRow::compare(mark, benign, mask, cfg)?,
        })
    }
}

/// Inpaints `img` and `adv` with `model` and compares the results over the hole.
pub fn evaluate(
    img: &Image,
    mask: &Mask,
    target: &Image,
    model: &dyn InpainterModel,
    adv: &Image,
    cfg: &LossConfig,
) -> Result<ComparisonReport> {
    check_pair(img, target)?;
    check_pair(img, adv)?;
    let benign = inpaint(model, img, mask)?;
    let mark = inpaint(model, adv, mask)?;
    ComparisonReport::from_outputs(img, target, &benign, &mark, mask, cfg)
}
