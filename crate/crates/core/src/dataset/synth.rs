//! Procedural face-like images for desk-scale experiments.
//!
//! Every image is a smooth composition of a lit background, hair, a face
//! ellipse, eyes and a mouth. The binary label marks a dark band across the
//! eye line ("glasses").

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub background: f64,
    pub bg_slope: (f64, f64),
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub skin: f64,
    pub light: f64,
    pub hair: f64,
    pub hair_length: f64,
    pub fringe: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_dark: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub smile: f64,
    pub glasses: bool,
}

impl FaceParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        FaceParams {
            background: rng.random_range(0.05..0.95),
            bg_slope: (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
            center: (rng.random_range(0.42..0.58), rng.random_range(0.45..0.58)),
            radii: (rng.random_range(0.22..0.3), rng.random_range(0.28..0.36)),
            skin: rng.random_range(0.45..0.95),
            light: rng.random_range(-0.25..0.25),
            hair: rng.random_range(0.02..0.55),
            hair_length: rng.random_range(-0.15..0.35),
            fringe: rng.random_range(0.35..0.7),
            eye_dx: rng.random_range(0.09..0.13),
            eye_y: rng.random_range(0.05..0.12),
            eye_dark: rng.random_range(0.05..0.3),
            mouth_y: rng.random_range(0.13..0.2),
            mouth_w: rng.random_range(0.06..0.11),
            smile: rng.random_range(-0.05..0.05),
            glasses: rng.random_bool(0.5),
        }
    }

    pub fn label(&self) -> u8 {
        self.glasses as u8
    }
}

/// Soft coverage from a signed distance in pixels-per-unit `soft`.
fn cover(sd: f64, soft: f64) -> f64 {
    (0.5 - sd / soft).clamp(0.0, 1.0)
}

fn ellipse_sd(u: f64, v: f64, c: (f64, f64), r: (f64, f64)) -> f64 {
    let (dx, dy) = ((u - c.0) / r.0, (v - c.1) / r.1);
    ((dx * dx + dy * dy).sqrt() - 1.0) * r.0.min(r.1)
}

fn blend(base: f64, over: f64, a: f64) -> f64 {
    base * (1.0 - a) + over * a
}

/// Renders a `size × size` image with values in `[0, 1]`, row-major.
pub fn render_face(p: &FaceParams, size: usize) -> Vec<f64> {
    let soft = 1.5 / size as f64;
    let (cx, cy) = p.center;
    let (rx, ry) = p.radii;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let mut val = p.background + p.bg_slope.0 * (u - 0.5) + p.bg_slope.1 * (v - 0.5);

            let hair_c = (cx, cy - 0.02);
            let hair_r = (rx * 1.15, ry * 1.1);
            let hair_a = cover(ellipse_sd(u, v, hair_c, hair_r), soft) * cover(v - (cy + p.hair_length), soft);
            val = blend(val, p.hair, hair_a);

            let face_a = cover(ellipse_sd(u, v, (cx, cy), (rx, ry)), soft);
            let skin = p.skin + p.light * (u - cx) / rx;
            val = blend(val, skin, face_a);

            let fringe_a = face_a * cover(v - (cy - ry * p.fringe), soft);
            val = blend(val, p.hair, fringe_a);

            let eye_v = cy - p.eye_y;
            for side in [-1.0, 1.0] {
                let ea = cover(ellipse_sd(u, v, (cx + side * p.eye_dx, eye_v), (0.045, 0.03)), soft);
                val = blend(val, p.eye_dark, ea * face_a);
            }

            if p.glasses {
                let band = cover((v - eye_v).abs() - 0.04, soft) * cover((u - cx).abs() - (p.eye_dx + 0.08), soft);
                val = blend(val, 0.08, 0.85 * band);
            }

            let mu = (u - cx) / p.mouth_w;
            let curve = cy + p.mouth_y - p.smile * (1.0 - mu * mu);
            let ma = cover((v - curve).abs() - 0.02, soft) * cover(mu.abs() - 1.0, soft / p.mouth_w);
            val = blend(val, skin * 0.45, ma * face_a);

            out.push(val.clamp(0.0, 1.0));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub count: usize,
    pub labels: PathBuf,
    pub positives: usize,
}

/// Writes `count` 8-bit PNGs `face_NNNNN.png` plus `labels.csv` (`id,label`).
pub fn write_synthetic(dir: &Path, count: usize, size: usize, seed: u64) -> Result<SynthSummary> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    w.write_record(["id", "label"])?;
    let mut positives = 0;
    for i in 0..count {
        let p = FaceParams::sample(&mut rng);
        let pixels = render_face(&p, size);
        let img = GrayImage::from_fn(size as u32, size as u32, |x, y| {
            Luma([(pixels[y as usize * size + x as usize] * 255.0).round() as u8])
        });
        let id = format!("face_{i:05}");
        img.save(dir.join(format!("{id}.png")))?;
        w.write_record([id.as_str(), &p.label().to_string()])?;
        positives += p.label() as usize;
    }
    w.flush()?;
    Ok(SynthSummary { count, labels, positives })
}
