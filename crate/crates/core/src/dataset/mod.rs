//! Image ingestion, deterministic splits and the split manifest.

mod synth;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{LsiError, Result};
use crate::scalar::Scalar;

pub use synth::{render_face, write_synthetic, FaceParams, SynthSummary};

/// Fewest decodable images a dataset directory must provide.
pub const MIN_IMAGES: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageSpec {
    pub fn gray(height: usize, width: usize) -> Self {
        ImageSpec { height, width, channels: 1 }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.pixels()
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    pub path: PathBuf,
    /// `[C, m, n]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: ImageSpec,
    pub items: Vec<Item>,
    pub manifest: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn split_items(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |it| it.split == split)
    }

    /// Images `idx` stacked as `[B, C, m, n]`.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.spec.numel());
        for &i in idx {
            data.extend(self.items[i].image.data().iter().map(|&v| T::lit(v)));
        }
        Tensor::new(vec![idx.len(), self.spec.channels, self.spec.height, self.spec.width], data)
            .expect("batch shape")
    }

    /// Channel-summed image of item `i`, flattened to `m·n`.
    pub fn summed(&self, i: usize) -> Vec<f64> {
        sum_channels(&self.items[i].image).into_data()
    }

    /// SHA-256 of the manifest text this dataset would write.
    pub fn manifest_hash(&self) -> String {
        hex(&Sha256::digest(self.manifest_text().as_bytes()))
    }

    fn manifest_text(&self) -> String {
        let mut s = String::new();
        for it in &self.items {
            s.push_str(&format!("{}\t{}\t{}\n", it.id, it.path.display(), it.split));
        }
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.manifest_text().as_bytes())?;
        Ok(())
    }

    /// Reloads the images and split listed in a manifest.
    pub fn from_manifest(manifest: &Path, spec: ImageSpec) -> Result<Dataset> {
        let text = fs::read_to_string(manifest)
            .map_err(|e| LsiError::Dataset(format!("cannot read manifest {}: {e}", manifest.display())))?;
        let mut items = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let (id, path, split) = match cols[..] {
                [id, path, split] => (id, path, split),
                _ => return Err(LsiError::Dataset(format!("manifest line {}: expected 3 columns", ln + 1))),
            };
            let split = Split::parse(split)
                .ok_or_else(|| LsiError::Dataset(format!("manifest line {}: unknown split {split:?}", ln + 1)))?;
            let path = PathBuf::from(path);
            let image = load_image(&path, spec)?;
            items.push(Item { id: id.to_string(), path, image, split });
        }
        Ok(Dataset { spec, items, manifest: manifest.to_path_buf() })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

/// Decodes every PNG/PGM file in `dir`, normalizes it to `spec`, splits
/// 90/5/5 with a seeded shuffle and writes the manifest to `manifest`.
pub fn load_dataset(dir: &Path, spec: ImageSpec, seed: u64, manifest: &Path) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| LsiError::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    let mut items = Vec::new();
    for path in paths {
        match load_image(&path, spec) {
            Ok(image) => {
                let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                items.push(Item { id, path, image, split: Split::Train });
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if items.len() < MIN_IMAGES {
        return Err(LsiError::Dataset(format!(
            "{} usable images in {}, need at least {MIN_IMAGES}",
            items.len(),
            dir.display()
        )));
    }
    assign_splits(&mut items, seed);
    let ds = Dataset { spec, items, manifest: manifest.to_path_buf() };
    ds.write_manifest(manifest)?;
    Ok(ds)
}

fn assign_splits(items: &mut [Item], seed: u64) {
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = (n as f64 * 0.05).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        items[i].split = if rank < n_eval {
            Split::Val
        } else if rank < 2 * n_eval {
            Split::Test
        } else {
            Split::Train
        };
    }
}

/// Decodes one file into `[C, m, n]`.
pub fn load_image(path: &Path, spec: ImageSpec) -> Result<Tensor<f64>> {
    let img = image::open(path)?;
    Ok(normalize(&img, spec))
}

/// Center-crop to the target aspect, box-filter resize, scale to `[0, 1]`.
pub fn normalize(img: &DynamicImage, spec: ImageSpec) -> Tensor<f64> {
    let color = img.color().has_color();
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let (cw, ch) = if w * spec.height > h * spec.width {
        (((h * spec.width) as f64 / spec.height as f64).round().max(1.0) as usize, h)
    } else {
        (w, ((w * spec.height) as f64 / spec.width as f64).round().max(1.0) as usize)
    };
    let (x0, y0) = ((w - cw) / 2, (h - ch) / 2);
    let px = |c: usize, i: usize| {
        let (y, x) = (i / cw, i % cw);
        rgb.get_pixel((x0 + x) as u32, (y0 + y) as u32)[c] as f64 / 65535.0
    };
    let n = cw * ch;
    let planes: Vec<Vec<f64>> = match (spec.channels, color) {
        (1, true) => vec![(0..n).map(|i| 0.299 * px(0, i) + 0.587 * px(1, i) + 0.114 * px(2, i)).collect()],
        (1, false) => vec![(0..n).map(|i| px(0, i)).collect()],
        (c, _) => (0..c).map(|k| (0..n).map(|i| px(k.min(2), i)).collect()).collect(),
    };
    let mut data = Vec::with_capacity(spec.numel());
    for plane in &planes {
        data.extend(box_resize(plane, ch, cw, spec.height, spec.width));
    }
    Tensor::new(vec![spec.channels, spec.height, spec.width], data).expect("normalized image shape")
}

/// Area-averaging resize of a row-major `sh × sw` plane.
pub fn box_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    if sh == dh && sw == dw {
        return src.to_vec();
    }
    let wy = box_weights(sh, dh);
    let wx = box_weights(sw, dw);
    let mut out = vec![0.0; dh * dw];
    for (oy, ry) in wy.iter().enumerate() {
        for (ox, rx) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, fy) in ry {
                for &(sx, fx) in rx {
                    acc += fy * fx * src[sy * sw + sx];
                }
            }
            out[oy * dw + ox] = acc;
        }
    }
    out
}

/// For each output cell, the source cells it overlaps with normalized weights.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut ws = Vec::new();
            let mut s = a.floor() as usize;
            while (s as f64) < b && s < src {
                let overlap = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((s, overlap / scale));
                }
                s += 1;
            }
            ws
        })
        .collect()
}

/// Sum over the channel axis of a `[C, m, n]` (or `[m, n]`) image.
pub fn sum_channels(image: &Tensor<f64>) -> Tensor<f64> {
    match *image.shape() {
        [c, h, w] => {
            let plane = h * w;
            let mut out = vec![0.0; plane];
            for ch in 0..c {
                for (o, v) in out.iter_mut().zip(&image.data()[ch * plane..(ch + 1) * plane]) {
                    *o += v;
                }
            }
            Tensor::new(vec![h, w], out).expect("plane shape")
        }
        _ => image.clone(),
    }
}

/// Reads an `id,label` CSV into labels aligned with `ds.items`.
pub fn read_labels(path: &Path, ds: &Dataset) -> Result<Vec<u32>> {
    let mut by_id = std::collections::HashMap::new();
    for rec in csv::Reader::from_path(path)?.records() {
        let rec = rec?;
        let (id, label) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
        let label: u32 =
            label.trim().parse().map_err(|_| LsiError::Dataset(format!("bad label {label:?} for {id}")))?;
        by_id.insert(id.trim().to_string(), label);
    }
    ds.items
        .iter()
        .map(|it| by_id.get(&it.id).copied().ok_or_else(|| LsiError::Dataset(format!("no label for {}", it.id))))
        .collect()
}
