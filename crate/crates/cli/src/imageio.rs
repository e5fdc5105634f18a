//! PNG loading and saving. Pixels are 8-bit RGB scaled by 1/255.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use walmafa::FeatureMap;

use crate::error::{CliError, CliResult};

pub fn load_rgb(path: &Path) -> CliResult<FeatureMap> {
    let img = image::open(path).map_err(|e| CliError::io(path, e))?;
    if img.color().has_alpha() {
        log::warn!("{}: alpha channel dropped", path.display());
    }
    if !matches!(img, DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_)) {
        log::warn!("{}: {:?} converted to 8-bit RGB", path.display(), img.color());
    }
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn from_rgb8(img: &RgbImage) -> FeatureMap {
    let (w, h) = img.dimensions();
    FeatureMap::from_fn(h as usize, w as usize, 3, |y, x, c| {
        f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Clamps to `[0, 1]` and rounds to the nearest 8-bit level.
pub fn to_rgb8(map: &FeatureMap) -> RgbImage {
    let (h, w, _) = map.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([quantize(map.get(y, x, 0)), quantize(map.get(y, x, 1)), quantize(map.get(y, x, 2))])
    })
}

pub fn save_rgb(path: &Path, map: &FeatureMap) -> CliResult<()> {
    if map.channels() != 3 {
        return Err(CliError::input(format!("cannot save {} channels as RGB", map.channels())));
    }
    to_rgb8(map).save(path).map_err(|e| CliError::io(path, e))
}

/// Saves channel 0, clamped to `[0, 1]`, as grayscale.
pub fn save_gray(path: &Path, map: &FeatureMap) -> CliResult<()> {
    let (h, w, _) = map.shape();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([quantize(map.get(y as usize, x as usize, 0))]));
    img.save(path).map_err(|e| CliError::io(path, e))
}

/// Sorted `.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs the PNGs of two directories by file name. Any file without a
/// partner is an input error listing every orphan.
pub fn match_files(a_dir: &Path, b_dir: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let a = list_pngs(a_dir)?;
    let b = list_pngs(b_dir)?;
    let a_names: Vec<String> = a.iter().map(|p| file_name(p)).collect();
    let b_names: Vec<String> = b.iter().map(|p| file_name(p)).collect();
    let mut orphans: Vec<String> = Vec::new();
    orphans.extend(a.iter().zip(&a_names).filter(|(_, n)| !b_names.contains(n)).map(|(p, _)| p.display().to_string()));
    orphans.extend(b.iter().zip(&b_names).filter(|(_, n)| !a_names.contains(n)).map(|(p, _)| p.display().to_string()));
    if !orphans.is_empty() {
        return Err(CliError::input(format!("files without a partner: {}", orphans.join(", "))));
    }
    if a.is_empty() {
        return Err(CliError::input(format!(
            "no PNG pairs in {} and {}",
            a_dir.display(),
            b_dir.display()
        )));
    }
    Ok(a_names
        .into_iter()
        .zip(a)
        .map(|(name, pa)| {
            let pb = b_dir.join(&name);
            (name, pa, pb)
        })
        .collect())
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Reflect-pads bottom and right so both sides are multiples of `m`.
pub fn pad_to_multiple(map: &FeatureMap, m: usize) -> CliResult<FeatureMap> {
    let (h, w, _) = map.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(map.clone());
    }
    map.pad_reflect(ph, pw)
        .map_err(|_| CliError::input(format!("{h}x{w} image is too small to pad to {ph}x{pw}")))
}

pub fn crop_to(map: &FeatureMap, h: usize, w: usize) -> CliResult<FeatureMap> {
    if map.height() == h && map.width() == w {
        return Ok(map.clone());
    }
    Ok(map.crop(0, 0, h, w)?)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}
