//! Input transformations applied before inpainting, and the sweep that
//! measures how well each one undoes a markpainting attack.

use std::fmt;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};
use crate::inpaint::{inpaint, InpainterModel};
use crate::loss::LossConfig;
use crate::metrics::{patch_loss, reflect_index};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    /// Parameter: quality, an integer in 1..=100.
    Jpeg,
    /// Parameter: cutoff in (0, 1]; 1 keeps every frequency.
    Lowpass,
    /// Parameter: standard deviation in pixels, >= 0.
    GaussianBlur,
    /// Parameter: additive offset in [-1, 1].
    Brightness,
    /// Parameter: scale about 0.5, >= 0.
    Contrast,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 5] = [
        DefenseKind::Jpeg,
        DefenseKind::Lowpass,
        DefenseKind::GaussianBlur,
        DefenseKind::Brightness,
        DefenseKind::Contrast,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseKind::Jpeg => "jpeg",
            DefenseKind::Lowpass => "lowpass",
            DefenseKind::GaussianBlur => "gaussian_blur",
            DefenseKind::Brightness => "brightness",
            DefenseKind::Contrast => "contrast",
        }
    }
}

impl FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::validation(format!(
                    "unknown defense '{s}' (expected one of jpeg, lowpass, gaussian_blur, brightness, contrast)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    pub parameter: f64,
}

impl DefenseSpec {
    pub fn new(kind: DefenseKind, parameter: f64) -> Result<Self> {
        let spec = Self { kind, parameter };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.parameter;
        let ok = p.is_finite()
            && match self.kind {
                DefenseKind::Jpeg => (1.0..=100.0).contains(&p) && p.fract() == 0.0,
                DefenseKind::Lowpass => p > 0.0 && p <= 1.0,
                DefenseKind::GaussianBlur => p >= 0.0,
                DefenseKind::Brightness => (-1.0..=1.0).contains(&p),
                DefenseKind::Contrast => p >= 0.0,
            };
        if ok {
            Ok(())
        } else {
            let range = match self.kind {
                DefenseKind::Jpeg => "an integer in 1..=100",
                DefenseKind::Lowpass => "in (0, 1]",
                DefenseKind::GaussianBlur | DefenseKind::Contrast => ">= 0",
                DefenseKind::Brightness => "in [-1, 1]",
            };
            Err(Error::validation(format!(
                "{} parameter {p} must be {range}",
                self.kind.as_str()
            )))
        }
    }
}

impl fmt::Display for DefenseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.parameter)
    }
}

/// Parses `kind:parameter`, e.g. `jpeg:50` or `gaussian_blur:1.5`.
impl FromStr for DefenseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = s
            .split_once(':')
            .ok_or_else(|| Error::validation(format!("defense '{s}' is not of the form kind:parameter")))?;
        let parameter = param
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::validation(format!("defense parameter '{param}': {e}")))?;
        Self::new(kind.trim().parse()?, parameter)
    }
}

/// The default sweep: JPEG {30, 50, 70, 90}, lowpass {0.25, 0.5, 0.75},
/// blur {0.5, 1, 2}, brightness {±0.1, ±0.2}, contrast {0.8, 1.2}.
pub fn default_grid() -> Vec<DefenseSpec> {
    use DefenseKind::*;
    let pairs: [(DefenseKind, &[f64]); 5] = [
        (Jpeg, &[30.0, 50.0, 70.0, 90.0]),
        (Lowpass, &[0.25, 0.5, 0.75]),
        (GaussianBlur, &[0.5, 1.0, 2.0]),
        (Brightness, &[-0.2, -0.1, 0.1, 0.2]),
        (Contrast, &[0.8, 1.2]),
    ];
    pairs
        .iter()
        .flat_map(|(k, ps)| ps.iter().map(move |&p| DefenseSpec { kind: *k, parameter: p }))
        .collect()
}

pub fn apply_defense(img: &Image, spec: &DefenseSpec) -> Result<Image> {
    spec.validate()?;
    let p = spec.parameter;
    match spec.kind {
        DefenseKind::Jpeg => jpeg_round_trip(img, p as u8),
        // Exact pass-through; the general paths round in f32 or f64.
        DefenseKind::Lowpass | DefenseKind::Contrast if p == 1.0 => Ok(img.clone()),
        DefenseKind::Brightness if p == 0.0 => Ok(img.clone()),
        DefenseKind::Lowpass => Ok(lowpass(img, p)),
        DefenseKind::GaussianBlur => Ok(gaussian_blur(img, p)),
        DefenseKind::Brightness => {
            let d = p as f32;
            Ok(Image::from_tensor_clamped(img.tensor().map(|v| v + d)))
        }
        DefenseKind::Contrast => {
            let k = p as f32;
            Ok(Image::from_tensor_clamped(img.tensor().map(|v| (v - 0.5) * k + 0.5)))
        }
    }
}

fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| Error::Numerical(format!("JPEG encode failed: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Numerical(format!("JPEG decode failed: {e}")))?;
    Image::from_rgb8(&decoded.to_rgb8())
}

/// Signed frequency of FFT bin `k` of `n`, in cycles per sample.
fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Ideal radial low-pass. Frequencies are scaled so that Nyquist on both
/// axes sits at radius 1; bins with radius <= `cutoff` are kept.
fn lowpass(img: &Image, cutoff: f64) -> Image {
    let (h, w) = img.dims();
    let mut planner = FftPlanner::<f64>::new();
    let (row_fwd, row_inv) = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
    let (col_fwd, col_inv) = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
    let keep: Vec<bool> = (0..h * w)
        .map(|i| {
            let fy = bin_frequency(i / w, h) / 0.5;
            let fx = bin_frequency(i % w, w) / 0.5;
            (fy * fy + fx * fx).sqrt() / std::f64::consts::SQRT_2 <= cutoff
        })
        .collect();

    let mut out = Tensor::zeros(3, h, w);
    let mut col = vec![Complex::default(); h];
    for c in 0..3 {
        let mut buf: Vec<Complex<f64>> = img
            .tensor()
            .plane(c)
            .iter()
            .map(|&v| Complex::new(v as f64, 0.0))
            .collect();
        let transform_cols = |buf: &mut [Complex<f64>], col: &mut [Complex<f64>], fft: &dyn rustfft::Fft<f64>| {
            for x in 0..w {
                for y in 0..h {
                    col[y] = buf[y * w + x];
                }
                fft.process(col);
                for y in 0..h {
                    buf[y * w + x] = col[y];
                }
            }
        };
        row_fwd.process(&mut buf);
        transform_cols(&mut buf, &mut col, col_fwd.as_ref());
        for (v, &k) in buf.iter_mut().zip(&keep) {
            if !k {
                *v = Complex::default();
            }
        }
        transform_cols(&mut buf, &mut col, col_inv.as_ref());
        row_inv.process(&mut buf);
        let norm = (h * w) as f64;
        for (o, v) in out.plane_mut(c).iter_mut().zip(&buf) {
            *o = (v.re / norm) as f32;
        }
    }
    Image::from_tensor_clamped(out)
}

/// Separable Gaussian blur with radius `ceil(3σ)` and symmetric padding.
fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);

    let (h, w) = img.dims();
    let mut out = Tensor::zeros(3, h, w);
    let mut tmp = vec![0.0f64; h * w];
    for c in 0..3 {
        let p = img.tensor().plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * p[y * w + reflect_index(x as isize + j as isize - radius, w)] as f64)
                    .sum();
            }
        }
        let o = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * tmp[reflect_index(y as isize + j as isize - radius, h) * w + x])
                    .sum();
                o[y * w + x] = v as f32;
            }
        }
    }
    Image::from_tensor_clamped(out)
}

/// One sweep row: the inpainting of the defended adversarial image,
/// compared with the target and with the benign inpainting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub spec: DefenseSpec,
    pub loss_to_target: f64,
    pub loss_to_benign: f64,
}

/// Applies each spec to `adv`, inpaints and scores the hole against the
/// target and the benign inpainting of `img`. Rows follow `specs`.
pub fn defense_sweep(
    img: &Image,
    adv: &Image,
    mask: &Mask,
    target: &Image,
    model: &dyn InpainterModel,
    specs: &[DefenseSpec],
    cfg: &LossConfig,
) -> Result<Vec<DefenseRow>> {
    for s in specs {
        s.validate()?;
    }
    if specs.is_empty() {
        return Ok(Vec::new());
    }
    let benign = inpaint(model, img, mask)?;
    specs
        .iter()
        .map(|spec| {
            let out = inpaint(model, &apply_defense(adv, spec)?, mask)?;
            Ok(DefenseRow {
                spec: *spec,
                loss_to_target: patch_loss(&out, target, mask, cfg)?,
                loss_to_benign: patch_loss(&out, &benign, mask, cfg)?,
            })
        })
        .collect()
}

/// Indices `(i, j)` where row `i` moves further from the target than row
/// `j` but also further from the benign result, or `None`.
pub fn trade_off_pair(rows: &[DefenseRow]) -> Option<(usize, usize)> {
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            if a.loss_to_target > b.loss_to_target && a.loss_to_benign > b.loss_to_benign {
                return Some((i, j));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic_scene;
    use crate::imaging::RngSeed;
    use crate::metrics::{psnr, Region};
    use proptest::prelude::*;
    use rand::Rng;

    fn spec(kind: DefenseKind, p: f64) -> DefenseSpec {
        DefenseSpec::new(kind, p).unwrap()
    }

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = RngSeed(seed).rng();
        Image::from_fn(h, w, |_, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn degenerate_parameters_are_identity() {
        let img = noise(12, 10, 1);
        for s in [
            spec(DefenseKind::Brightness, 0.0),
            spec(DefenseKind::Contrast, 1.0),
            spec(DefenseKind::GaussianBlur, 0.0),
            spec(DefenseKind::Lowpass, 1.0),
        ] {
            assert_eq!(apply_defense(&img, &s).unwrap(), img, "{s}");
        }
        // The filter itself keeps every bin at cutoff 1.
        let lp = lowpass(&img, 1.0);
        let diff = lp.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn jpeg_quality_100_is_close() {
        let img = synthetic_scene(64, RngSeed(3));
        let out = apply_defense(&img, &spec(DefenseKind::Jpeg, 100.0)).unwrap();
        assert!(psnr(&out, &img, Region::All).unwrap() >= 40.0);
        let low = apply_defense(&img, &spec(DefenseKind::Jpeg, 10.0)).unwrap();
        assert!(psnr(&low, &img, Region::All).unwrap() < psnr(&out, &img, Region::All).unwrap());
    }

    #[test]
    fn brightness_and_contrast_by_hand() {
        let img = Image::filled(1, 1, 0.3).unwrap();
        let b = apply_defense(&img, &spec(DefenseKind::Brightness, 0.2)).unwrap();
        assert!((b.data()[0] - 0.5).abs() < 1e-6);
        let b = apply_defense(&img, &spec(DefenseKind::Brightness, 0.9)).unwrap();
        assert_eq!(b.data()[0], 1.0);
        // (0.3 - 0.5) * 2 + 0.5 = 0.1
        let c = apply_defense(&img, &spec(DefenseKind::Contrast, 2.0)).unwrap();
        assert!((c.data()[0] - 0.1).abs() < 1e-6);
        let c = apply_defense(&img, &spec(DefenseKind::Contrast, 0.0)).unwrap();
        assert_eq!(c.data()[0], 0.5);
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let img = noise(9, 7, 4);
        let sigma = 1.0;
        let out = apply_defense(&img, &spec(DefenseKind::GaussianBlur, sigma)).unwrap();
        // 2-D kernel summed directly, mirrored coordinates computed by hand
        let mirror = |i: isize, n: isize| -> usize {
            let mut i = i;
            while i < 0 || i >= n {
                i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
            }
            i as usize
        };
        let r = 3isize;
        let g = |d: isize| (-(d * d) as f64 / 2.0).exp();
        let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
        for (c, y, x) in [(0, 0, 0), (1, 4, 3), (2, 8, 6)] {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = mirror(y as isize + dy, 9);
                    let xx = mirror(x as isize + dx, 7);
                    acc += g(dy) * g(dx) * img.get(yy, xx, c) as f64;
                }
            }
            assert!((out.get(y, x, c) as f64 - acc / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        for v in [0.0, 0.37, 1.0] {
            let img = Image::filled(10, 13, v).unwrap();
            for s in [0.5, 1.0, 2.0, 5.0] {
                assert_eq!(apply_defense(&img, &spec(DefenseKind::GaussianBlur, s)).unwrap(), img);
            }
        }
    }

    #[test]
    fn lowpass_removes_high_frequencies() {
        // A checkerboard is pure Nyquist on both axes; a low cutoff leaves its mean.
        let img = Image::from_fn(8, 8, |_, y, x| if (x + y) % 2 == 0 { 0.8 } else { 0.2 }).unwrap();
        let out = apply_defense(&img, &spec(DefenseKind::Lowpass, 0.5)).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn lowpass_is_idempotent_on_in_range_images() {
        let img = synthetic_scene(32, RngSeed(9));
        // Mid-range contrast keeps the filtered result away from the clamp.
        let img = apply_defense(&img, &spec(DefenseKind::Contrast, 0.5)).unwrap();
        for cutoff in [0.25, 0.5, 0.75] {
            let s = spec(DefenseKind::Lowpass, cutoff);
            let once = apply_defense(&img, &s).unwrap();
            let twice = apply_defense(&once, &s).unwrap();
            let d = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(d <= 1e-5, "cutoff {cutoff}: {d}");
        }
    }

    #[test]
    fn spec_parsing_and_validation() {
        let s: DefenseSpec = "gaussian_blur:1.5".parse().unwrap();
        assert_eq!(s, spec(DefenseKind::GaussianBlur, 1.5));
        assert_eq!(s.to_string().parse::<DefenseSpec>().unwrap(), s);
        for bad in ["jpeg:0", "jpeg:101", "jpeg:50.5", "lowpass:0", "lowpass:1.2", "gaussian_blur:-1",
            "brightness:1.5", "contrast:-0.1", "sharpen:1", "jpeg"] {
            assert!(bad.parse::<DefenseSpec>().is_err(), "{bad}");
        }
        assert_eq!(default_grid().len(), 16);
    }

    #[test]
    fn trade_off_pair_detection() {
        let row = |t, b| DefenseRow { spec: spec(DefenseKind::Contrast, 1.0), loss_to_target: t, loss_to_benign: b };
        assert_eq!(trade_off_pair(&[row(1.0, 1.0), row(2.0, 0.5)]), None);
        assert_eq!(trade_off_pair(&[row(1.0, 1.0), row(2.0, 1.5)]), Some((1, 0)));
        assert_eq!(trade_off_pair(&[]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn outputs_stay_in_unit_range(seed in any::<u64>(), k in 0usize..5, p in 0.0f64..1.0) {
            let kind = DefenseKind::ALL[k];
            let parameter = match kind {
                DefenseKind::Jpeg => (1.0 + 99.0 * p).round(),
                DefenseKind::Lowpass => p.max(0.01),
                DefenseKind::GaussianBlur => 3.0 * p,
                DefenseKind::Brightness => 2.0 * p - 1.0,
                DefenseKind::Contrast => 3.0 * p,
            };
            let img = noise(8, 8, seed);
            let out = apply_defense(&img, &spec(kind, parameter)).unwrap();
            prop_assert_eq!(out.dims(), img.dims());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
