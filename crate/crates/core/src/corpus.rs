//! Image corpora: directory ingestion and a procedural scene generator
//! used for hermetic training and evaluation.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{center_square, load_image, save_image, Image, RngSeed};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by file name.
pub fn corpus_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every image in `dir`, centre-cropped and resized to `size × size`.
pub fn load_corpus(dir: impl AsRef<Path>, size: usize) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let files = corpus_files(dir)?;
    if files.is_empty() {
        return Err(Error::Corpus(format!("no PNG/JPEG images in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| center_square(&load_image(p)?, size))
        .collect()
}

fn smoothstep(edge: f32, softness: f32, d: f32) -> f32 {
    // 1 inside (d < edge), 0 outside, linear ramp of width `softness`.
    ((edge - d) / softness + 0.5).clamp(0.0, 1.0)
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A procedural scene: two-tone graded background with a soft horizon,
/// a few soft-edged rectangles and ellipses, and low-frequency shading.
pub fn synthetic_scene(size: usize, seed: RngSeed) -> Image {
    let mut rng = seed.rng();
    let s = size as f32;
    let sky = random_color(&mut rng);
    let ground = random_color(&mut rng);
    let horizon = rng.random_range(0.3..0.7) * s;
    let tilt = rng.random_range(-0.3..0.3f32);

    enum Shape {
        Rect { cy: f32, cx: f32, hh: f32, hw: f32 },
        Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    }
    let shapes: Vec<(Shape, [f32; 3])> = (0..rng.random_range(2..=5))
        .map(|_| {
            let cy = rng.random_range(0.0..s);
            let cx = rng.random_range(0.0..s);
            let a = rng.random_range(0.06..0.3) * s;
            let b = rng.random_range(0.06..0.3) * s;
            let shape = if rng.random_bool(0.5) {
                Shape::Rect { cy, cx, hh: a, hw: b }
            } else {
                Shape::Ellipse { cy, cx, ry: a, rx: b }
            };
            (shape, random_color(&mut rng))
        })
        .collect();
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f32::consts::TAU / s,
                rng.random_range(0.5..3.0) * std::f32::consts::TAU / s,
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.01..0.05),
            )
        })
        .collect();

    let mut px = vec![[0.0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
            let line = horizon + tilt * (fx - 0.5 * s);
            let w_ground = smoothstep(0.0, 2.0, line - fy);
            let grade = fy / s;
            let mut c = [0.0f32; 3];
            for k in 0..3 {
                let top = sky[k] * (1.0 - 0.3 * grade);
                let bottom = ground[k] * (0.7 + 0.3 * grade);
                c[k] = top * (1.0 - w_ground) + bottom * w_ground;
            }
            for (shape, color) in &shapes {
                let cover = match *shape {
                    Shape::Rect { cy, cx, hh, hw } => {
                        let d = ((fy - cy).abs() - hh).max((fx - cx).abs() - hw);
                        smoothstep(0.0, 1.5, d)
                    }
                    Shape::Ellipse { cy, cx, ry, rx } => {
                        let r = (((fy - cy) / ry).powi(2) + ((fx - cx) / rx).powi(2)).sqrt();
                        smoothstep(0.0, 1.5, (r - 1.0) * ry.min(rx))
                    }
                };
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - cover) + color[k] * cover;
                }
            }
            let shade: f32 = waves
                .iter()
                .map(|&(ky, kx, ph, amp)| amp * (ky * fy + kx * fx + ph).sin())
                .sum();
            px[y * size + x] = c.map(|v| v + shade);
        }
    }
    Image::from_tensor_clamped(crate::nn::Tensor::from_fn(3, size, size, |c, y, x| {
        px[y * size + x][c]
    }))
}

/// `count` scenes; scene `i` uses the sub-seed `(seed, "scene", i)`.
pub fn synthetic_corpus(count: usize, size: usize, seed: RngSeed) -> Vec<Image> {
    (0..count)
        .map(|i| synthetic_scene(size, seed.derive("scene", i as u64)))
        .collect()
}

/// Writes a synthetic corpus as `scene_0000.png`, `scene_0001.png`, …
pub fn write_synthetic_corpus(
    dir: impl AsRef<Path>,
    count: usize,
    size: usize,
    seed: RngSeed,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    synthetic_corpus(count, size, seed)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("scene_{i:04}.png"));
            save_image(img, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_varied() {
        let a = synthetic_scene(32, RngSeed(1));
        assert_eq!(a, synthetic_scene(32, RngSeed(1)));
        assert_ne!(a, synthetic_scene(32, RngSeed(2)));
        let mean: f32 = a.data().iter().sum::<f32>() / a.data().len() as f32;
        let var: f32 = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / a.data().len() as f32;
        assert!(var > 1e-3, "scene is nearly flat");
    }

    #[test]
    fn corpus_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_synthetic_corpus(dir.path(), 3, 24, RngSeed(5)).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        assert_eq!(corpus_files(dir.path()).unwrap(), written);
        let loaded = load_corpus(dir.path(), 16).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(loaded.iter().all(|i| i.dims() == (16, 16)));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path(), 16), Err(Error::Corpus(_))));
        assert!(load_corpus(dir.path().join("missing"), 16).is_err());
    }
}
