//! Learned binary mask bank: one DMD mask per measurement.
//!
//! The continuous logits are kept in `[0, 1]` by projection after every
//! optimizer step. The forward model always sees the binarized matrix, and
//! gradients reach the logits through a straight-through estimator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{LsiError, Result};
use crate::scalar::Scalar;

/// Occupancy targets range over 10%..=90% of the mask area in 1% steps.
pub const RAMP_PERCENT: std::ops::RangeInclusive<u32> = 10..=90;

#[derive(Clone, Debug, PartialEq)]
pub struct OpticalEncoder<T> {
    logits: Tensor<T>,
    height: usize,
    width: usize,
    threshold: T,
}

impl<T: Scalar> OpticalEncoder<T> {
    /// Uniform logits, shifted per row so exactly `⌊mn/2⌋` entries binarize to one.
    pub fn init_balanced(d: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mn = height * width;
        if d == 0 || mn < 2 {
            return Err(LsiError::config(format!("need d ≥ 1 and mn ≥ 2, got d={d}, mn={mn}")));
        }
        if d > mn {
            return Err(LsiError::config(format!("{d} measurements exceed {mn} pixels")));
        }
        let half = mn / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(d * mn);
        for _ in 0..d {
            let row: Vec<f64> = (0..mn).map(|_| rng.random::<f64>()).collect();
            let mut sorted = row.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            // midpoint between the half-th and (half+1)-th largest moves to 0.5
            let cut = if half == 0 {
                sorted[0] + 1.0
            } else if half == mn {
                sorted[mn - 1] - 1.0
            } else {
                0.5 * (sorted[half - 1] + sorted[half])
            };
            let shift = 0.5 - cut;
            data.extend(row.iter().map(|&v| T::lit((v + shift).clamp(1e-3, 1.0 - 1e-3))));
        }
        let logits = Tensor::new(vec![d, mn], data)?.with_grad();
        Ok(OpticalEncoder { logits, height, width, threshold: T::lit(0.5) })
    }

    pub fn from_logits(logits: Tensor<T>, height: usize, width: usize) -> Result<Self> {
        match *logits.shape() {
            [d, mn] if mn == height * width && d <= mn => {}
            ref s => return Err(LsiError::dim(format!("mask logits {s:?} for a {height}×{width} image"))),
        }
        let mut logits = logits;
        logits.set_requires_grad(true);
        Ok(OpticalEncoder { logits, height, width, threshold: T::lit(0.5) })
    }

    pub fn measurements(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn logits(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Tensor<T> {
        &mut self.logits
    }

    /// Clamps the logits back into `[0, 1]`.
    pub fn project(&mut self) {
        for v in self.logits.data_mut() {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    /// The deployed `{0,1}` mask matrix `d × mn`.
    pub fn binarized(&self) -> Vec<T> {
        self.logits.data().iter().map(|&v| if v >= self.threshold { T::one() } else { T::zero() }).collect()
    }

    /// Per-row count of ones in the binarized matrix.
    pub fn occupancy_histogram(&self) -> Vec<usize> {
        let mn = self.pixels();
        self.logits
            .data()
            .chunks(mn)
            .map(|row| row.iter().filter(|&&v| v >= self.threshold).count())
            .collect()
    }

    /// Records the logits and their straight-through binarization; returns
    /// `(logits, binarized)`.
    pub fn bind(&self, tape: &mut Tape<T>) -> (Var, Var) {
        let l = tape.leaf(&self.logits);
        let b = quantize_ste(tape, l, self.threshold);
        (l, b)
    }

    /// Ideal single-pixel readings `c = B · vec(Σ_channels image)`.
    pub fn measure(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let summed = self.summed_pixels(image)?;
        let mn = self.pixels();
        Ok(self
            .logits
            .data()
            .chunks(mn)
            .map(|row| {
                row.iter()
                    .zip(&summed)
                    .filter(|(&l, _)| l >= self.threshold)
                    .map(|(_, &p)| p)
                    .sum()
            })
            .collect())
    }

    fn summed_pixels(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mn = self.pixels();
        let ok = match *image.shape() {
            [_, h, w] | [h, w] => h == self.height && w == self.width,
            _ => false,
        };
        if !ok {
            return Err(LsiError::dim(format!(
                "image of shape {:?} for {}×{} masks",
                image.shape(),
                self.height,
                self.width
            )));
        }
        let mut summed = vec![T::zero(); mn];
        for ch in image.data().chunks(mn) {
            summed.iter_mut().zip(ch).for_each(|(s, &v)| *s += v);
        }
        Ok(summed)
    }
}

/// Straight-through binarization of mask logits that live in `[0, 1]`:
/// forward `1[x ≥ threshold]`, backward identity strictly inside `(0, 1)`.
pub fn quantize_ste<T: Scalar>(tape: &mut Tape<T>, logits: Var, threshold: T) -> Var {
    tape.ste_binarize(logits, threshold, T::zero(), T::one())
}

/// Differentiable batch measurement: `images [B×mn] · binarizedᵀ → [B×d]`.
pub fn measure_batch<T: Scalar>(tape: &mut Tape<T>, binarized: Var, images: Var) -> Result<Var> {
    let bt = tape.transpose(binarized)?;
    tape.matmul(images, bt)
}

/// Target one-counts for the energy loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnergyTargets {
    percents: Vec<u32>,
    counts: Vec<usize>,
}

impl EnergyTargets {
    /// Ramp cycled to length `d`, in ramp order.
    pub fn ramp(d: usize, mn: usize) -> Self {
        let percents: Vec<u32> = RAMP_PERCENT.cycle().take(d).collect();
        Self::from_percents(percents, mn)
    }

    /// Ramp cycled to length `d`, then shuffled with a seeded permutation.
    pub fn shuffled(d: usize, mn: usize, seed: u64) -> Self {
        let mut percents: Vec<u32> = RAMP_PERCENT.cycle().take(d).collect();
        percents.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::from_percents(percents, mn)
    }

    fn from_percents(percents: Vec<u32>, mn: usize) -> Self {
        // round(p·mn/100), half away from zero, in integers
        let counts = percents.iter().map(|&p| (2 * p as usize * mn + 100) / 200).collect();
        EnergyTargets { percents, counts }
    }

    pub fn percents(&self) -> &[u32] {
        &self.percents
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Mean absolute difference between a histogram and the targets.
    pub fn mean_abs_error(&self, histogram: &[usize]) -> f64 {
        let total: usize = histogram.iter().zip(&self.counts).map(|(&h, &e)| h.abs_diff(e)).sum();
        total as f64 / self.counts.len().max(1) as f64
    }
}

/// `(1/d) Σ_j |Σ_i B_ij − ε_j|` on the binarized masks `[d×mn]`; divided by
/// `mn` as well when `normalized`.
pub fn energy_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binarized: Var,
    targets: &EnergyTargets,
    normalized: bool,
) -> Result<Var> {
    let (d, mn) = match *tape.shape(binarized) {
        [d, mn] => (d, mn),
        ref s => return Err(LsiError::dim(format!("energy loss expects a d×mn matrix, got {s:?}"))),
    };
    if targets.len() != d {
        return Err(LsiError::dim(format!("{} energy targets for {d} masks", targets.len())));
    }
    let rows = tape.sum_axis(binarized, 1)?;
    let eps = Tensor::from_vec(targets.counts().iter().map(|&c| T::lit(c as f64)).collect());
    let eps = tape.constant(&eps);
    let diff = tape.sub(rows, eps)?;
    let diff = tape.abs(diff);
    let loss = tape.mean(diff);
    Ok(if normalized { tape.mul_scalar(loss, T::one() / T::lit(mn as f64)) } else { loss })
}
