//! Image and mask values, file I/O, mask generation and the elementwise
//! algebra shared by every other module.
//!
//! Images are planar RGB with channel values in `[0, 1]`. Masks mark holes
//! with `0` and known pixels with `1`.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// An RGB picture with every channel value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image(Tensor);

impl Image {
    /// Wraps a 3-channel tensor, rejecting empty shapes and values outside `[0, 1]`.
    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        if tensor.channels() != 3 {
            return Err(Error::validation(format!(
                "image needs 3 channels, got {}",
                tensor.channels()
            )));
        }
        if tensor.height() == 0 || tensor.width() == 0 {
            return Err(Error::validation("image dimensions must be at least 1x1"));
        }
        if let Some(v) = tensor
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::validation(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self(tensor))
    }

    /// Clamps every value into `[0, 1]` (NaN maps to 0).
    pub fn from_tensor_clamped(mut tensor: Tensor) -> Self {
        assert_eq!(tensor.channels(), 3, "image needs 3 channels");
        assert!(tensor.height() > 0 && tensor.width() > 0);
        tensor.data_mut().iter_mut().for_each(|v| *v = clamp_unit(*v));
        Self(tensor)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        Self::from_tensor(Tensor::from_fn(3, height, width, f))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::from_tensor(Tensor::filled(3, height, width, value))
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    /// Channel `c` of pixel `(y, x)`.
    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.0.get(c, y, x)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(y, x, 0), self.get(y, x, 1), self.get(y, x, 2)]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = self.dims();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(quantize))
        })
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Result<Self> {
        let (w, h) = rgb.dimensions();
        Self::from_fn(h as usize, w as usize, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }

    /// Copies out the rectangle `rect`.
    pub fn crop(&self, rect: &RectSpec) -> Result<Image> {
        rect.check_within(self.height(), self.width())?;
        Image::from_fn(rect.rect_height, rect.rect_width, |c, y, x| {
            self.get(rect.top + y, rect.left + x, c)
        })
    }

    pub(crate) fn ensure_same_dims(&self, other_dims: (usize, usize)) -> Result<()> {
        if self.dims() != other_dims {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other_dims,
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

/// A binary field: `0` marks a hole pixel, `1` a known pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    /// All-known mask (no hole).
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// All-hole mask.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::validation(format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::validation(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Mask whose hole is exactly `rect`.
    pub fn with_hole(height: usize, width: usize, rect: &RectSpec) -> Result<Self> {
        rect.check_within(height, width)?;
        let mut mask = Self::ones(height, width);
        for y in rect.top..rect.top + rect.rect_height {
            mask.data[y * width + rect.left..][..rect.rect_width].fill(0);
        }
        Ok(mask)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.value(y, x) == 1
    }

    /// Row-major `0/1` values.
    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn hole_count(&self) -> usize {
        self.data.iter().filter(|v| **v == 0).count()
    }

    /// The mask as a single-channel `f32` plane.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            1,
            self.height,
            self.width,
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Smallest rectangle containing every hole pixel, if any.
    pub fn hole_bounding_box(&self) -> Option<RectSpec> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.value(y, x) == 0 {
                    bounds = Some(match bounds {
                        None => (y, x, y, x),
                        Some((t, l, b, r)) => (t.min(y), l.min(x), b.max(y), r.max(x)),
                    });
                }
            }
        }
        bounds.map(|(t, l, b, r)| RectSpec {
            top: t,
            left: l,
            rect_height: b - t + 1,
            rect_width: r - l + 1,
        })
    }

    /// Swaps holes and known pixels.
    pub fn inverted(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }
}

/// An axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectSpec {
    pub top: usize,
    pub left: usize,
    pub rect_height: usize,
    pub rect_width: usize,
}

impl RectSpec {
    pub fn area(&self) -> usize {
        self.rect_height * self.rect_width
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.rect_height == 0
            || self.rect_width == 0
            || self.top + self.rect_height > height
            || self.left + self.rect_width > width
        {
            return Err(Error::validation(format!(
                "rectangle {self:?} does not fit a {height}x{width} image"
            )));
        }
        Ok(())
    }
}

/// Seed for every random stream in the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent seed for a named sub-stream.
    pub fn derive(self, tag: &str, index: u64) -> RngSeed {
        // FNV-1a over (seed, tag, index), then a splitmix64 finaliser.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&self.0.to_le_bytes());
        eat(tag.as_bytes());
        eat(&index.to_le_bytes());
        let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        RngSeed(z ^ (z >> 31))
    }
}

impl From<u64> for RngSeed {
    fn from(seed: u64) -> Self {
        RngSeed(seed)
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads an 8-bit RGB PNG or JPEG, mapping each byte `u` to `u / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match decode(path)? {
        image::DynamicImage::ImageRgb8(rgb) => Image::from_rgb8(&rgb),
        other => Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("expected 8-bit RGB, found {:?}", other.color()),
        }),
    }
}

/// Writes an 8-bit RGB PNG, storing each channel as `round(v · 255)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Reads a bilevel 8-bit grayscale PNG: `0` is a hole, `255` is known.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let gray = match decode(path)? {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: format!("expected 8-bit grayscale mask, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for (x, y, p) in gray.enumerate_pixels() {
        data.push(match p[0] {
            0 => 0,
            255 => 1,
            v => {
                return Err(Error::validation(format!(
                    "{}: mask pixel ({x}, {y}) has gray value {v}; only 0 and 255 are allowed",
                    path.display()
                )))
            }
        });
    }
    Mask::from_vec(h as usize, w as usize, data)
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let gray = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([mask.value(y as usize, x as usize) * 255])
    });
    gray.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// An image whose every pixel equals `color`.
pub fn solid_target(height: usize, width: usize, color: [f32; 3]) -> Result<Image> {
    if let Some(c) = color.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::validation(format!(
            "target color component {c} outside [0, 1]"
        )));
    }
    Image::from_fn(height, width, |c, _, _| color[c])
}

/// Samples a near-square rectangle covering `coverage` of the image.
///
/// The aspect ratio is drawn from `[0.5, 2]`, the sides are solved for the
/// requested area and clamped to the image, and the top-left corner is
/// placed uniformly.
pub fn random_rect(
    height: usize,
    width: usize,
    coverage: f64,
    seed: RngSeed,
) -> Result<RectSpec> {
    let mut rng = seed.rng();
    sample_rect(height, width, coverage, &mut rng)
}

pub(crate) fn sample_rect(
    height: usize,
    width: usize,
    coverage: f64,
    rng: &mut impl Rng,
) -> Result<RectSpec> {
    if height == 0 || width == 0 {
        return Err(Error::validation("mask dimensions must be at least 1x1"));
    }
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::validation(format!(
            "mask coverage {coverage} outside (0, 1]"
        )));
    }
    let area = coverage * (height * width) as f64;
    if area < 1.0 {
        return Err(Error::validation(format!(
            "coverage {coverage} of a {height}x{width} image is an empty rectangle"
        )));
    }
    let aspect: f64 = rng.random_range(0.5..=2.0);
    let (rh, rw) = solve_sides(area, aspect, height, width);
    let top = rng.random_range(0..=height - rh);
    let left = rng.random_range(0..=width - rw);
    Ok(RectSpec {
        top,
        left,
        rect_height: rh,
        rect_width: rw,
    })
}

/// Integer sides `(h, w)` with `h / w ≈ aspect` and `h · w ≈ area`, inside the image.
fn solve_sides(area: f64, aspect: f64, height: usize, width: usize) -> (usize, usize) {
    let mut rh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
    let mut rw = ((area / rh as f64).round() as usize).clamp(1, width);
    // A clamped side forces the other to absorb the remaining area.
    if rw == width {
        rh = ((area / rw as f64).round() as usize).clamp(1, height);
    }
    if rh == height {
        rw = ((area / rh as f64).round() as usize).clamp(1, width);
    }
    (rh, rw)
}

/// A mask whose hole is a single random rectangle of the given coverage.
pub fn random_rect_mask(height: usize, width: usize, coverage: f64, seed: RngSeed) -> Result<Mask> {
    let rect = random_rect(height, width, coverage, seed)?;
    Mask::with_hole(height, width, &rect)
}

/// Fraction of hole pixels.
pub fn mask_coverage(mask: &Mask) -> f64 {
    mask.hole_count() as f64 / (mask.height * mask.width) as f64
}

/// `img ⊙ mask`: the hole is zeroed, known pixels pass through.
pub fn masked_input(img: &Image, mask: &Mask) -> Result<Image> {
    img.ensure_same_dims(mask.dims())?;
    let mut t = img.tensor().clone();
    let plane = mask.values();
    for c in 0..3 {
        for (v, &m) in t.plane_mut(c).iter_mut().zip(plane) {
            if m == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(Image(t))
}

/// Bilinear (triangle-filter) resampling to `height × width`.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::validation("resize target must be at least 1x1"));
    }
    let (h, w) = img.dims();
    let src = image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(img.pixel(y as usize, x as usize))
    });
    let dst = image::imageops::resize(
        &src,
        width as u32,
        height as u32,
        image::imageops::FilterType::Triangle,
    );
    Ok(Image::from_tensor_clamped(Tensor::from_fn(3, height, width, |c, y, x| {
        dst.get_pixel(x as u32, y as u32)[c]
    })))
}

/// Largest centred square, resized to `size × size`.
pub fn center_square(img: &Image, size: usize) -> Result<Image> {
    let (h, w) = img.dims();
    let side = h.min(w);
    let rect = RectSpec {
        top: (h - side) / 2,
        left: (w - side) / 2,
        rect_height: side,
        rect_width: side,
    };
    let square = img.crop(&rect)?;
    if side == size {
        return Ok(square);
    }
    resize_bilinear(&square, size, size)
}

/// Largest absolute per-channel difference.
pub fn linf_distance(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b.dims())?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_png_rgb(path: &Path, w: u32, h: u32, px: [u8; 3]) {
        RgbImage::from_pixel(w, h, image::Rgb(px)).save(path).unwrap();
    }

    #[test]
    fn load_image_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let red = dir.path().join("red.png");
        write_png_rgb(&red, 1, 1, [255, 0, 0]);
        assert_eq!(load_image(&red).unwrap().pixel(0, 0), [1.0, 0.0, 0.0]);

        let gray = dir.path().join("gray.png");
        write_png_rgb(&gray, 1, 1, [128, 128, 128]);
        let v = load_image(&gray).unwrap().get(0, 0, 1);
        assert!((v - 128.0 / 255.0).abs() < 1e-7);
        assert!((v - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_image_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(matches!(load_image(&junk), Err(Error::Decode { .. })));
        let luma = dir.path().join("luma.png");
        GrayImage::from_pixel(2, 2, image::Luma([9])).save(&luma).unwrap();
        assert!(matches!(load_image(&luma), Err(Error::Decode { .. })));
    }

    #[test]
    fn save_load_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        save_image(&Image::filled(3, 2, 0.5).unwrap(), &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));

        for v in [0.0, 1.0] {
            let img = Image::filled(2, 3, v).unwrap();
            save_image(&img, &p).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let img = Image::filled(1, 1, 0.0).unwrap();
        assert!(save_image(&img, "/nonexistent-dir/x/y.png").is_err());
    }

    #[test]
    fn mask_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        GrayImage::from_pixel(3, 2, image::Luma([255])).save(&p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), Mask::ones(2, 3));

        let mut g = GrayImage::from_pixel(3, 2, image::Luma([255]));
        g.put_pixel(1, 1, image::Luma([254]));
        g.save(&p).unwrap();
        let err = load_mask(&p).unwrap_err().to_string();
        assert!(err.contains("254"), "{err}");

        let m = random_rect_mask(20, 30, 0.2, RngSeed(1)).unwrap();
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn solid_targets() {
        let red = solid_target(2, 2, [1.0, 0.0, 0.0]).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(red.pixel(y, x), [1.0, 0.0, 0.0]);
            }
        }
        assert_eq!(solid_target(1, 1, [0.0; 3]).unwrap().pixel(0, 0), [0.0; 3]);
        assert!(solid_target(1, 1, [1.2, 0.0, 0.0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let green = solid_target(1, 1, [0.0, 1.0, 0.0]).unwrap();
        save_image(&green, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), green);
    }

    #[test]
    fn random_rect_mask_coverage_window() {
        let m = random_rect_mask(256, 256, 0.05, RngSeed(7)).unwrap();
        let n = m.hole_count();
        assert!((3136..=3364).contains(&n), "hole count {n}");
        assert_eq!(m, random_rect_mask(256, 256, 0.05, RngSeed(7)).unwrap());
        assert_eq!(random_rect_mask(16, 9, 1.0, RngSeed(3)).unwrap(), Mask::zeros(16, 9));
        assert!(random_rect_mask(10, 10, 0.001, RngSeed(3)).is_err());
        assert!(random_rect_mask(10, 10, 0.0, RngSeed(3)).is_err());
    }

    #[test]
    fn coverage_values() {
        assert_eq!(mask_coverage(&Mask::ones(4, 4)), 0.0);
        assert_eq!(mask_coverage(&Mask::zeros(4, 4)), 1.0);
        let mut v = vec![1u8; 16];
        v[5] = 0;
        assert_eq!(mask_coverage(&Mask::from_vec(4, 4, v).unwrap()), 0.0625);
    }

    #[test]
    fn masked_input_examples() {
        let img = Image::from_fn(2, 1, |_, y, _| if y == 0 { 0.5 } else { 0.25 }).unwrap();
        assert_eq!(masked_input(&img, &Mask::ones(2, 1)).unwrap(), img);
        let out = masked_input(&img, &Mask::from_vec(2, 1, vec![1, 0]).unwrap()).unwrap();
        assert_eq!(out.pixel(0, 0), [0.5; 3]);
        assert_eq!(out.pixel(1, 0), [0.0; 3]);
        let black = masked_input(&img, &Mask::zeros(2, 1)).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        assert!(masked_input(&img, &Mask::ones(1, 2)).is_err());
    }

    #[test]
    fn linf_examples() {
        let a = Image::filled(2, 2, 0.5).unwrap();
        assert_eq!(linf_distance(&a, &a).unwrap(), 0.0);
        let mut t = a.tensor().clone();
        t.set(1, 1, 0, 0.8);
        let b = Image::from_tensor(t).unwrap();
        assert!((linf_distance(&a, &b).unwrap() - 0.3).abs() < 1e-6);
        assert_eq!(linf_distance(&a, &b).unwrap(), linf_distance(&b, &a).unwrap());
        assert!(linf_distance(&a, &Image::filled(1, 2, 0.5).unwrap()).is_err());
    }

    #[test]
    fn hole_bounding_box_matches_rect() {
        let rect = RectSpec { top: 2, left: 3, rect_height: 4, rect_width: 5 };
        let m = Mask::with_hole(10, 12, &rect).unwrap();
        assert_eq!(m.hole_bounding_box(), Some(rect));
        assert_eq!(Mask::ones(3, 3).hole_bounding_box(), None);
    }

    #[test]
    fn derived_seeds_differ() {
        let s = RngSeed(9);
        assert_ne!(s.derive("a", 0), s.derive("a", 1));
        assert_ne!(s.derive("a", 0), s.derive("b", 0));
        assert_eq!(s.derive("a", 0), s.derive("a", 0));
    }

    proptest! {
        #[test]
        fn random_mask_coverage_is_close(
            h in 8usize..120, w in 8usize..120, c in 0.01f64..1.0, seed in any::<u64>()
        ) {
            prop_assume!(c * (h * w) as f64 >= 1.0);
            let m = random_rect_mask(h, w, c, RngSeed(seed)).unwrap();
            let rect = m.hole_bounding_box().unwrap();
            prop_assert_eq!(rect.area(), m.hole_count());
            let target = c * (h * w) as f64;
            let slack = rect.rect_height.max(rect.rect_width) as f64;
            prop_assert!((m.hole_count() as f64 - target).abs() <= slack,
                "count {} target {} slack {}", m.hole_count(), target, slack);
            prop_assert_eq!(m, random_rect_mask(h, w, c, RngSeed(seed)).unwrap());
        }

        #[test]
        fn masked_input_keeps_known_pixels(seed in any::<u64>(), c in 0.05f64..0.9) {
            let mut rng = RngSeed(seed).rng();
            let img = Image::from_fn(12, 10, |_, _, _| rng.random::<f32>()).unwrap();
            let m = random_rect_mask(12, 10, c, RngSeed(seed)).unwrap();
            let out = masked_input(&img, &m).unwrap();
            for y in 0..12 {
                for x in 0..10 {
                    for ch in 0..3 {
                        let expect = if m.is_known(y, x) { img.get(y, x, ch) } else { 0.0 };
                        prop_assert_eq!(out.get(y, x, ch), expect);
                    }
                }
            }
        }

        #[test]
        fn file_round_trip_within_quantum(seed in any::<u64>()) {
            let mut rng = RngSeed(seed).rng();
            let img = Image::from_fn(5, 4, |_, _, _| rng.random::<f32>()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.png");
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            prop_assert!(linf_distance(&img, &back).unwrap() <= 1.0 / 255.0 + 1e-7);
        }
    }
}
