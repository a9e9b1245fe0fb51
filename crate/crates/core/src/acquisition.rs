//! Simulated photodiode and ADC, plus white-image scale calibration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::Dataset;
use crate::error::{LsiError, Result};
use crate::generative::Generator;
use crate::scalar::Scalar;
use crate::train::losses::{weighted_sum, LossWeights};
use crate::train::optim::{ranger, Optimizer};
use crate::train::{encoder_objective, evaluate_with, summed_batch, EvalStats, LatentTargets, LsiModel};

#[derive(Clone, Debug, PartialEq)]
pub struct SensorModel {
    /// Volts per unit of integrated radiance.
    pub gain: f64,
    pub bias: f64,
    pub read_sigma: f64,
    /// Photon quantum in radiance units; 0 disables shot noise.
    pub shot_scale: f64,
    pub adc_bits: u32,
    pub adc_range: (f64, f64),
    /// Soft saturation `k·tanh(v/k)` applied to the amplified signal.
    /// Speculative; off unless set.
    pub saturation: Option<f64>,
    pub seed: u64,
}

impl SensorModel {
    /// Noise-free unit-gain detector with a 16-bit ADC over `[0, full_scale]`.
    pub fn ideal(full_scale: f64) -> Self {
        SensorModel {
            gain: 1.0,
            bias: 0.0,
            read_sigma: 0.0,
            shot_scale: 0.0,
            adc_bits: 16,
            adc_range: (0.0, full_scale),
            saturation: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(8..=16).contains(&self.adc_bits) {
            return Err(LsiError::config(format!("adc_bits {} outside 8..=16", self.adc_bits)));
        }
        let (lo, hi) = self.adc_range;
        if !(hi > lo) {
            return Err(LsiError::config(format!("adc range ({lo}, {hi}) is empty")));
        }
        if self.read_sigma < 0.0 || self.shot_scale < 0.0 || !self.gain.is_finite() {
            return Err(LsiError::config("sensor noise parameters must be non-negative"));
        }
        if matches!(self.saturation, Some(k) if k <= 0.0) {
            return Err(LsiError::config("saturation knee must be positive"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.adc_range.1 - self.adc_range.0) / ((1u64 << self.adc_bits) - 1) as f64
    }

    /// Clip to the ADC range and round to the nearest code.
    pub fn quantize(&self, v: f64) -> f64 {
        let (lo, hi) = self.adc_range;
        let step = self.step();
        lo + ((v.clamp(lo, hi) - lo) / step).round() * step
    }

    /// Sensed readings for ideal values `c`; `stream` selects an independent
    /// noise sequence (e.g. the image index).
    pub fn sense(&self, c: &[f64], stream: u64) -> Result<Vec<f64>> {
        self.validate()?;
        if let Some(i) = c.iter().position(|v| !(*v >= 0.0)) {
            return Err(LsiError::Domain(format!("reading {i} is {} (must be non-negative)", c[i])));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let read = Normal::new(0.0, self.read_sigma).map_err(|e| LsiError::config(e.to_string()))?;
        let mut out = Vec::with_capacity(c.len());
        for &ci in c {
            let mut signal = ci;
            if self.shot_scale > 0.0 && ci > 0.0 {
                let photons = Poisson::new(ci / self.shot_scale).map_err(|e| LsiError::Domain(e.to_string()))?;
                signal = photons.sample(&mut rng) * self.shot_scale;
            }
            let mut v = self.gain * signal;
            if let Some(k) = self.saturation {
                v = k * (v / k).tanh();
            }
            v += self.bias;
            if self.read_sigma > 0.0 {
                v += read.sample(&mut rng);
            }
            out.push(self.quantize(v));
        }
        Ok(out)
    }
}

/// Global scale `s = Σ expected / Σ measured` from a white-image capture.
pub fn calibrate_white(measured: &[f64], expected: &[f64]) -> Result<f64> {
    if measured.len() != expected.len() {
        return Err(LsiError::dim(format!("{} readings for {} masks", measured.len(), expected.len())));
    }
    let sv: f64 = measured.iter().sum();
    let se: f64 = expected.iter().sum();
    if sv == 0.0 || !sv.is_finite() {
        return Err(LsiError::Calibration(format!("white-image readings sum to {sv}")));
    }
    Ok(se / sv)
}

/// Calibration from `repeats` white captures averaged per mask.
pub fn calibrate_white_repeated(sensor: &SensorModel, expected: &[f64], repeats: usize) -> Result<f64> {
    if repeats == 0 {
        return Err(LsiError::config("at least one white capture is needed"));
    }
    let mut mean = vec![0.0; expected.len()];
    for r in 0..repeats {
        for (m, v) in mean.iter_mut().zip(sensor.sense(expected, u64::MAX - r as u64)?) {
            *m += v / repeats as f64;
        }
    }
    calibrate_white(&mean, expected)
}

/// Sensed and calibrated measurements `[B, d]` of dataset items `idx`;
/// item `i` is sensed on noise stream `i`.
pub fn sense_items<T: Scalar>(
    model: &LsiModel<T>,
    ds: &Dataset,
    idx: &[usize],
    sensor: &SensorModel,
    scale: f64,
) -> Result<Tensor<T>> {
    let ideal = model.measure(&summed_batch(ds, idx))?;
    let d = model.measurements();
    let mut out = Vec::with_capacity(ideal.numel());
    for (row, &i) in ideal.data().chunks(d).zip(idx) {
        let c: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        out.extend(sensor.sense(&c, i as u64)?.into_iter().map(|v| T::lit(v * scale)));
    }
    Tensor::new(vec![idx.len(), d], out)
}

/// One-counts of each binarized mask times the image channel count: the
/// ideal reading of an all-white scene.
pub fn white_expected<T: Scalar>(model: &LsiModel<T>, channels: usize) -> Vec<f64> {
    model.optical.occupancy_histogram().iter().map(|&h| (h * channels) as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Size of the paired training subset.
    pub pairs: usize,
    pub weights: LossWeights,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { lr: 1e-5, epochs: 400, batch_size: 8, pairs: 200, weights: LossWeights::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub pre: EvalStats,
    pub post: EvalStats,
    /// Mean training objective per epoch.
    pub losses: Vec<f64>,
}

impl FinetuneReport {
    pub fn psnr_gain(&self) -> f64 {
        self.post.psnr - self.pre.psnr
    }
}

/// Picks the paired subset: `cfg.pairs` items of `pool` after a seeded shuffle.
pub fn finetune_subset(pool: &[usize], pairs: usize, seed: u64) -> Vec<usize> {
    let mut idx = pool.to_vec();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(pairs);
    idx.sort_unstable();
    idx
}

/// Adapts the measurement encoder to sensed data; masks and decoder stay
/// fixed. `train` and `held_out` pair dataset items with their calibrated
/// sensed measurements.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Scalar>(
    model: &LsiModel<T>,
    gen: &Generator<T>,
    targets: &LatentTargets<T>,
    ds: &Dataset,
    train: (&[usize], &Tensor<T>),
    held_out: (&[usize], &Tensor<T>),
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(LsiModel<T>, FinetuneReport)> {
    if train.0.len() < 10 {
        return Err(LsiError::config(format!("fine-tuning needs at least 10 pairs, got {}", train.0.len())));
    }
    if cfg.batch_size == 0 {
        return Err(LsiError::config("batch size must be positive"));
    }
    let d = model.measurements();
    for (idx, c) in [train, held_out] {
        if c.shape() != [idx.len(), d] {
            return Err(LsiError::dim(format!("sensed measurements {:?} for {} items", c.shape(), idx.len())));
        }
    }
    let rows_of = |(idx, c): (&[usize], &Tensor<T>), pick: &[usize]| -> Result<Tensor<T>> {
        let data = pick
            .iter()
            .flat_map(|i| {
                let r = idx.iter().position(|j| j == i).expect("picked item is in the set");
                c.data()[r * d..(r + 1) * d].iter().copied()
            })
            .collect();
        Tensor::new(vec![pick.len(), d], data)
    };
    let eval = |m: &LsiModel<T>| evaluate_with(m, gen, targets, ds, held_out.0, |chunk| rows_of(held_out, chunk));
    let pre = eval(model)?;
    let mut tuned = model.clone();
    let mut opt = ranger(T::lit(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.0.to_vec();
    let mut w = cfg.weights;
    w.energy = 0.0;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = tuned.encoder.params().bind(&mut tape);
            let c = tape.constant(&rows_of(train, chunk)?);
            let (parts, _) =
                encoder_objective(&mut tape, &tuned.encoder, &p, c, gen, &targets.rows(chunk), &ds.batch::<T>(chunk), &w)?;
            let total = weighted_sum(&mut tape, &parts)?.ok_or_else(|| LsiError::config("every loss weight is zero"))?;
            let lv = tape.scalar_value(total).as_f64();
            if !lv.is_finite() {
                return Err(LsiError::Numeric { block: "fine-tuning".into(), detail: format!("loss {lv} at epoch {epoch}") });
            }
            let grads = tape.backward(total)?;
            tuned.encoder.params_mut().accumulate(&p, &grads)?;
            opt.step(tuned.encoder.params_mut().as_mut_slice())?;
            tuned.encoder.params_mut().zero_grad();
            sum += lv;
            n += 1;
        }
        losses.push(sum / n.max(1) as f64);
    }
    let post = eval(&tuned)?;
    log::info!("fine-tuning: held-out PSNR {:.3} -> {:.3} dB", pre.psnr, post.psnr);
    Ok((tuned, FinetuneReport { pre, post, losses }))
}
