//! Fourier single-pixel imaging with three-step phase shifting.
//!
//! Each measured frequency uses patterns `a + b·cos(2π(fx·x + fy·y) + φ)`
//! for `φ ∈ {0, 2π/3, 4π/3}`. The three readings combine into `3b` times the
//! DFT coefficient at that bin; unmeasured bins stay zero and the image comes
//! back through an inverse FFT.

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::acquisition::SensorModel;
use crate::error::{LsiError, Result};

pub const PHASES: [f64; 3] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

/// Frequencies as signed DFT bins `(kx, ky)`; `fx = kx / n`, `fy = ky / m`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierPatternSet {
    pub bins: Vec<(i64, i64)>,
    pub height: usize,
    pub width: usize,
    pub a: f64,
    pub b: f64,
}

impl FourierPatternSet {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Single-pixel readings needed to acquire the set.
    pub fn readings(&self) -> usize {
        3 * self.bins.len()
    }

    /// Frequency of entry `i` in cycles per pixel, `(fx, fy)`.
    pub fn frequency(&self, i: usize) -> (f64, f64) {
        let (kx, ky) = self.bins[i];
        (kx as f64 / self.width as f64, ky as f64 / self.height as f64)
    }

    pub fn with_amplitude(mut self, a: f64, b: f64) -> Result<Self> {
        if b <= 0.0 || a - b < 0.0 || a + b > 1.0 {
            return Err(LsiError::config(format!("pattern range [{}, {}] outside [0, 1]", a - b, a + b)));
        }
        self.a = a;
        self.b = b;
        Ok(self)
    }
}

fn wrap(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

/// Every conjugate-free bin of an `m × n` grid, lowest radius first with
/// ties in `(fy, fx)` order.
pub fn canonical_bins(m: usize, n: usize) -> Vec<(i64, i64)> {
    let (mi, ni) = (m as i64, n as i64);
    let mut all: Vec<(i64, i64)> = Vec::with_capacity(m * n);
    for ky in -(mi - 1) / 2..=mi / 2 {
        for kx in -(ni - 1) / 2..=ni / 2 {
            if ky > 0 || (ky == 0 && kx >= 0) {
                all.push((kx, ky));
            }
        }
    }
    let r2 = |&(kx, ky): &(i64, i64)| {
        let (fx, fy) = (kx as f64 / n as f64, ky as f64 / m as f64);
        fx * fx + fy * fy
    };
    all.sort_by(|p, q| r2(p).total_cmp(&r2(q)).then((p.1, p.0).cmp(&(q.1, q.0))));
    let mut seen = HashSet::new();
    all.into_iter()
        .filter(|&(kx, ky)| {
            let bin = (wrap(kx, n), wrap(ky, m));
            let conj = (wrap(-kx, n), wrap(-ky, m));
            if seen.contains(&bin) || seen.contains(&conj) {
                return false;
            }
            seen.insert(bin);
            true
        })
        .collect()
}

/// The `budget / 3` lowest frequencies, DC first.
pub fn select_frequencies(budget: usize, m: usize, n: usize) -> Result<FourierPatternSet> {
    if budget < 3 {
        return Err(LsiError::config(format!("FSI needs at least 3 readings, budget is {budget}")));
    }
    if m == 0 || n == 0 {
        return Err(LsiError::config("empty image grid"));
    }
    let mut bins = canonical_bins(m, n);
    bins.truncate(budget / 3);
    Ok(FourierPatternSet { bins, height: m, width: n, a: 0.5, b: 0.5 })
}

/// All conjugate-free bins: noise-free acquisition of this set is exact.
pub fn full_coverage(m: usize, n: usize) -> FourierPatternSet {
    FourierPatternSet { bins: canonical_bins(m, n), height: m, width: n, a: 0.5, b: 0.5 }
}

/// `a + b·cos(2π(fx·x + fy·y) + φ)` on integer pixel coordinates, row-major.
pub fn make_pattern(fx: f64, fy: f64, phi: f64, m: usize, n: usize, a: f64, b: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * n);
    for y in 0..m {
        for x in 0..n {
            out.push(a + b * (2.0 * PI * (fx * x as f64 + fy * y as f64) + phi).cos());
        }
    }
    out
}

fn check_image(image: &[f64], set: &FourierPatternSet) -> Result<()> {
    if image.len() != set.height * set.width {
        return Err(LsiError::dim(format!(
            "FSI set is {}×{}, image has {} pixels",
            set.height,
            set.width,
            image.len()
        )));
    }
    Ok(())
}

/// Ideal readings `⟨P_φ, I⟩`, three per frequency in phase order.
pub fn fsi_readings(image: &[f64], set: &FourierPatternSet) -> Result<Vec<f64>> {
    check_image(image, set)?;
    let mut out = Vec::with_capacity(set.readings());
    for i in 0..set.len() {
        let (fx, fy) = set.frequency(i);
        for phi in PHASES {
            let p = make_pattern(fx, fy, phi, set.height, set.width, set.a, set.b);
            out.push(p.iter().zip(image).map(|(p, v)| p * v).sum());
        }
    }
    Ok(out)
}

/// `F = (2D₀ − D₁ − D₂) + i·√3·(D₁ − D₂)` per frequency.
pub fn combine(readings: &[f64]) -> Vec<Complex64> {
    readings
        .chunks_exact(3)
        .map(|d| Complex64::new(2.0 * d[0] - d[1] - d[2], 3f64.sqrt() * (d[1] - d[2])))
        .collect()
}

pub fn fsi_acquire(image: &[f64], set: &FourierPatternSet) -> Result<Vec<Complex64>> {
    Ok(combine(&fsi_readings(image, set)?))
}

/// Acquisition through a simulated detector; readings are sensed on
/// `stream` and multiplied by the calibration `scale`.
pub fn fsi_acquire_sensed(
    image: &[f64],
    set: &FourierPatternSet,
    sensor: &SensorModel,
    stream: u64,
    scale: f64,
) -> Result<Vec<Complex64>> {
    let ideal = fsi_readings(image, set)?;
    let sensed: Vec<f64> = sensor.sense(&ideal, stream)?.into_iter().map(|v| v * scale).collect();
    Ok(combine(&sensed))
}

/// Assembled Hermitian spectrum of the measured bins, `m × n` row-major.
pub fn assemble_spectrum(coeffs: &[Complex64], set: &FourierPatternSet) -> Result<Vec<Complex64>> {
    if coeffs.len() != set.len() {
        return Err(LsiError::dim(format!("{} coefficients for {} frequencies", coeffs.len(), set.len())));
    }
    let (m, n) = (set.height, set.width);
    let mut spec = vec![Complex64::new(0.0, 0.0); m * n];
    let norm = 3.0 * set.b;
    for (&(kx, ky), &f) in set.bins.iter().zip(coeffs) {
        let x = f / norm;
        let (bx, by) = (wrap(kx, n), wrap(ky, m));
        let (cx, cy) = (wrap(-kx, n), wrap(-ky, m));
        if (bx, by) == (cx, cy) {
            spec[by * n + bx] = Complex64::new(x.re, 0.0);
        } else {
            spec[by * n + bx] = x;
            spec[cy * n + cx] = x.conj();
        }
    }
    Ok(spec)
}

/// Inverse 2-D DFT, `(1/mn)·Σ X[k]·e^{+iθ}`.
pub fn inverse_dft2(spec: &[Complex64], m: usize, n: usize) -> Vec<Complex64> {
    let mut planner = FftPlanner::<f64>::new();
    let mut buf = spec.to_vec();
    let row = planner.plan_fft_inverse(n);
    for r in buf.chunks_exact_mut(n) {
        row.process(r);
    }
    let col = planner.plan_fft_inverse(m);
    let mut tmp = vec![Complex64::new(0.0, 0.0); m];
    for x in 0..n {
        for y in 0..m {
            tmp[y] = buf[y * n + x];
        }
        col.process(&mut tmp);
        for y in 0..m {
            buf[y * n + x] = tmp[y];
        }
    }
    let s = 1.0 / (m * n) as f64;
    buf.iter().map(|v| v * s).collect()
}

/// Reconstruction before clamping, with the largest imaginary residue.
pub fn fsi_reconstruct_raw(coeffs: &[Complex64], set: &FourierPatternSet) -> Result<(Vec<f64>, f64)> {
    let spec = assemble_spectrum(coeffs, set)?;
    let img = inverse_dft2(&spec, set.height, set.width);
    let max_imag = img.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    Ok((img.iter().map(|v| v.re).collect(), max_imag))
}

pub fn fsi_reconstruct(coeffs: &[Complex64], set: &FourierPatternSet) -> Result<Vec<f64>> {
    let (img, _) = fsi_reconstruct_raw(coeffs, set)?;
    Ok(img.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}
