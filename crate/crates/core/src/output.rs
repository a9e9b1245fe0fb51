//! 8-bit PNG writers for images and masks, and the latents CSV.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::dataset::ImageSpec;
use crate::error::{LsiError, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[C, m, n]` image with values in `[0, 1]` (clamped) as 8-bit
/// grayscale (`C = 1`) or RGB (`C = 3`).
pub fn save_image(path: &Path, data: &[f64], spec: ImageSpec) -> Result<()> {
    if data.len() != spec.numel() {
        return Err(LsiError::dim(format!("{} values for a {spec:?} image", data.len())));
    }
    let (h, w) = (spec.height as u32, spec.width as u32);
    let plane = spec.pixels();
    let at = |c: usize, x: u32, y: u32| to_u8(data[c * plane + y as usize * spec.width + x as usize]);
    match spec.channels {
        1 => GrayImage::from_fn(w, h, |x, y| Luma([at(0, x, y)])).save(path)?,
        3 => RgbImage::from_fn(w, h, |x, y| Rgb([at(0, x, y), at(1, x, y), at(2, x, y)])).save(path)?,
        c => return Err(LsiError::config(format!("cannot write {c}-channel images"))),
    }
    Ok(())
}

/// Writes a binary mask row as `{0, 255}`; entries `>= 0.5` are on.
pub fn save_mask(path: &Path, mask: &[f64], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(LsiError::dim(format!("{} mask entries for {height}x{width}", mask.len())));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([if mask[y as usize * width + x as usize] >= 0.5 { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Writes `id,z0,z1,...` rows.
pub fn write_latents_csv(path: &Path, ids: &[String], latents: &[Vec<f64>]) -> Result<()> {
    let width = latents.first().map_or(0, Vec::len);
    if ids.len() != latents.len() || latents.iter().any(|z| z.len() != width) {
        return Err(LsiError::dim("latent rows and ids disagree"));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(std::iter::once("id".to_string()).chain((0..width).map(|j| format!("z{j}"))))?;
    for (id, z) in ids.iter().zip(latents) {
        w.write_record(std::iter::once(id.clone()).chain(z.iter().map(|v| format!("{v:e}"))))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_latents_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let rec = rec?;
        ids.push(rec.get(0).unwrap_or("").to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|_| LsiError::Dataset(format!("bad latent value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((ids, rows))
}
