//! Line plots of summary CSVs, one PNG per curve family. Axes carry no
//! labels; the file name names the family.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{HarnessError, Result};
use crate::table::Table;

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 32;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([96, 96, 96]);
const LINE: Rgb<u8> = Rgb([31, 119, 180]);
const ERROR_BAR: Rgb<u8> = Rgb([150, 190, 220]);

/// Which columns of a known summary CSV make up a curve.
struct Layout {
    x: &'static str,
    y: &'static str,
    err: &'static str,
    family: &'static [&'static str],
}

fn layout(header: &[String]) -> Option<Layout> {
    let has = |c: &str| header.iter().any(|h| h == c);
    if has("reference") && has("loss_mean") {
        Some(Layout { x: "epsilon", y: "loss_mean", err: "loss_std", family: &["model", "reference"] })
    } else if has("source") && has("eval") && has("loss_mean") {
        Some(Layout { x: "epsilon", y: "loss_mean", err: "loss_std", family: &["source", "eval"] })
    } else if has("baseline_mean") {
        Some(Layout { x: "epsilon", y: "loss_mean", err: "loss_std", family: &["model", "coverage"] })
    } else if has("kind") && has("parameter") {
        Some(Layout {
            x: "parameter",
            y: "loss_to_target_mean",
            err: "loss_to_target_std",
            family: &["epsilon", "model", "kind"],
        })
    } else {
        None
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' })
        .collect()
}

/// Renders every curve family of the CSV at `csv_path` into `out_dir` as
/// `{stem}__{family}.png`. A CSV without data rows produces no files.
pub fn emit_plots(csv_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let table = Table::read(csv_path)?;
    if table.rows.is_empty() {
        tracing::warn!("{}: no data rows, nothing to plot", csv_path.display());
        return Ok(Vec::new());
    }
    let malformed = |message: String| HarnessError::Csv {
        path: csv_path.to_path_buf(),
        message,
    };
    let lay = layout(&table.header).ok_or_else(|| malformed("not a recognised summary CSV".into()))?;
    let col = |name: &str| table.column(name).ok_or_else(|| malformed(format!("missing column '{name}'")));
    let (xc, yc, ec) = (col(lay.x)?, col(lay.y)?, col(lay.err)?);
    let fc = lay.family.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;

    let mut families: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for row in &table.rows {
        let name = fc.iter().map(|&c| sanitize(&row[c])).collect::<Vec<_>>().join("_");
        let points = families.entry(name).or_default();
        let parse = |s: &str| s.parse::<f64>().ok();
        if let (Some(x), Some(y)) = (parse(&row[xc]), parse(&row[yc])) {
            points.push((x, y, parse(&row[ec]).unwrap_or(0.0)));
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let stem = csv_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "plot".into());
    let mut files = Vec::new();
    for (family, mut points) in families {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path = out_dir.join(format!("{stem}__{family}.png"));
        render(&points)
            .save(&path)
            .map_err(|e| malformed(format!("cannot write {}: {e}", path.display())))?;
        files.push(path);
    }
    Ok(files)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn render(points: &[(f64, f64, f64)]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let err = |p: &(f64, f64, f64)| if p.2.is_finite() { p.2 } else { 0.0 };
    let (y0, y1) = range(points.iter().flat_map(|p| [p.1 - err(p), p.1 + err(p)]));
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
    let py = |y: f64| bottom - (y - y0) / (y1 - y0) * (bottom - top);

    line(&mut img, (left, bottom), (right, bottom), AXIS);
    line(&mut img, (left, bottom), (left, top), AXIS);
    let finite: Vec<_> = points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    for p in &finite {
        let (x, e) = (px(p.0), err(p));
        if e > 0.0 {
            line(&mut img, (x, py(p.1 - e)), (x, py(p.1 + e)), ERROR_BAR);
            line(&mut img, (x - 3.0, py(p.1 - e)), (x + 3.0, py(p.1 - e)), ERROR_BAR);
            line(&mut img, (x - 3.0, py(p.1 + e)), (x + 3.0, py(p.1 + e)), ERROR_BAR);
        }
    }
    for w in finite.windows(2) {
        line(&mut img, (px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)), LINE);
    }
    for p in &finite {
        let (cx, cy) = (px(p.0), py(p.1));
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(&mut img, cx + dx as f64, cy + dy as f64, LINE);
            }
        }
    }
    img
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AGG: &str = "epsilon,model,reference,loss_mean,loss_std,l2_mean,l2_std,psnr_mean,psnr_std,ssim_mean,ssim_std\n";

    #[test]
    fn empty_csv_gives_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("agg.csv");
        std::fs::write(&csv, AGG).unwrap();
        assert!(emit_plots(&csv, dir.path()).unwrap().is_empty());
        std::fs::write(&csv, "").unwrap();
        assert!(emit_plots(&csv, dir.path()).unwrap().is_empty());
    }

    #[test]
    fn one_file_per_family_with_stable_names() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("agg.csv");
        std::fs::write(&csv, format!("{AGG}0.1,toy-1,target,1,0.1,0,0,inf,0,1,0\n")).unwrap();
        let files = emit_plots(&csv, &dir.path().join("plots")).unwrap();
        assert_eq!(files.len(), 1);
        assert!(files[0].ends_with("plots/agg__toy-1_target.png"));
        let bytes = std::fs::read(&files[0]).unwrap();

        let more = format!("{AGG}0,toy-1,target,2,0.1,0,0,1,0,1,0\n0.1,toy-1,target,1,0.1,0,0,1,0,1,0\n0,toy-1,benign,0,0,0,0,inf,0,1,0\n");
        std::fs::write(&csv, more).unwrap();
        let files = emit_plots(&csv, &dir.path().join("plots")).unwrap();
        let names: Vec<_> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["agg__toy-1_benign.png", "agg__toy-1_target.png"]);
        assert_ne!(std::fs::read(&files[1]).unwrap(), bytes);
    }

    #[test]
    fn malformed_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("x.csv");
        std::fs::write(&csv, "a,b\n1,2\n").unwrap();
        assert!(matches!(emit_plots(&csv, dir.path()), Err(HarnessError::Csv { .. })));
    }
}
