//! Joint training of the mask bank and the measurement encoder against a
//! frozen decoder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{latent_loss, pixel_losses, weighted_sum, LossTerms, LossWeights};
use super::optim::{ranger, Lion, LionConfig, Optimizer, Ranger};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{Dataset, Split};
use crate::digital::{DigitalEncoder, EncoderConfig, InputNorm};
use crate::error::{LsiError, Result};
use crate::generative::{Generator, InversionEncoder};
use crate::metrics::{mean_abs, psnr};
use crate::nn::Bound;
use crate::optical::{energy_loss, measure_batch, EnergyTargets, OpticalEncoder};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LsiConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub lr_mask: f64,
    pub lr_encoder: f64,
    pub weights: LossWeights,
    /// Epoch cap for phase 1.
    pub phase1_epochs: usize,
    /// Phase 1 ends early once validation latent error improved by less
    /// than `min_improvement` (relative) over `patience` epochs.
    pub patience: usize,
    pub min_improvement: f64,
    pub phase2_epochs: usize,
    /// Divide the energy term by `mn`.
    pub energy_normalized: bool,
}

impl LsiConfig {
    pub fn desk(d: usize) -> Self {
        LsiConfig {
            encoder: EncoderConfig::desk(d),
            batch_size: 32,
            lr_mask: 1e-4,
            lr_encoder: 1e-4,
            weights: LossWeights::default(),
            phase1_epochs: 200,
            patience: 5,
            min_improvement: 0.01,
            phase2_epochs: 10,
            energy_normalized: false,
        }
    }
}

/// Mask bank plus measurement encoder.
#[derive(Clone, Debug)]
pub struct LsiModel<T> {
    pub optical: OpticalEncoder<T>,
    pub encoder: DigitalEncoder<T>,
}

impl<T: Scalar> LsiModel<T> {
    /// Balanced masks and a freshly initialized encoder for `cfg.encoder.d` measurements.
    pub fn new(cfg: &EncoderConfig, height: usize, width: usize, seed: u64) -> Result<Self> {
        Ok(LsiModel {
            optical: OpticalEncoder::init_balanced(cfg.d, height, width, seed)?,
            encoder: DigitalEncoder::new(cfg.clone(), seed.wrapping_add(1))?,
        })
    }

    pub fn measurements(&self) -> usize {
        self.optical.measurements()
    }

    /// Ideal measurements of channel-summed images `[B, mn]` through the binarized masks.
    pub fn measure(&self, summed: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = tape.constant(&Tensor::new(self.optical.logits().shape().to_vec(), self.optical.binarized())?);
        let x = tape.constant(summed);
        let c = measure_batch(&mut tape, b, x)?;
        Ok(tape.to_tensor(c))
    }

    /// Latent stacks `[B, l·c]` from measurements `[B, d]`.
    pub fn encode(&self, c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.encoder.params().bind_frozen(&mut tape);
        let cv = tape.constant(c);
        let z = self.encoder.encode(&mut tape, &p, cv)?;
        Ok(tape.to_tensor(z))
    }

    /// Fits the encoder's input standardization on measurements of `idx`.
    pub fn fit_input_norm(&mut self, ds: &Dataset, idx: &[usize]) -> Result<()> {
        let c = self.measure(&summed_batch(ds, idx))?;
        let d = self.measurements();
        let rows: Vec<Vec<f64>> = c.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
        let norm = InputNorm::fit(&rows, self.encoder.config().input_scale)?;
        self.encoder.set_input_norm(Some(norm))
    }
}

/// Channel-summed images of `idx` as `[B, mn]`.
pub fn summed_batch<T: Scalar>(ds: &Dataset, idx: &[usize]) -> Tensor<T> {
    let mn = ds.spec.pixels();
    let mut data = Vec::with_capacity(idx.len() * mn);
    for &i in idx {
        data.extend(ds.summed(i).into_iter().map(T::lit));
    }
    Tensor::new(vec![idx.len(), mn], data).expect("summed batch shape")
}

/// Regression targets `N(I)` for every dataset item.
#[derive(Clone, Debug)]
pub struct LatentTargets<T> {
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> LatentTargets<T> {
    pub fn compute(inv: &InversionEncoder<T>, ds: &Dataset) -> Result<Self> {
        let width = inv.config().latent_len();
        let mut data = Vec::with_capacity(ds.len() * width);
        let all: Vec<usize> = (0..ds.len()).collect();
        for chunk in all.chunks(64) {
            data.extend_from_slice(inv.invert(&ds.batch::<T>(chunk))?.data());
        }
        Ok(LatentTargets { width, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor<T> {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Tensor::new(vec![idx.len(), self.width], data).expect("target shape")
    }
}

/// Encoder-side objective on measurements `c`; returns the total (if any
/// term is active) and the forward value of every term.
#[allow(clippy::too_many_arguments)]
pub(crate) fn encoder_objective<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &DigitalEncoder<T>,
    p_enc: &Bound,
    c: Var,
    gen: &Generator<T>,
    z_gt: &Tensor<T>,
    images: &Tensor<T>,
    w: &LossWeights,
) -> Result<(Vec<(f64, Option<Var>)>, LossTerms)> {
    let z = encoder.encode(tape, p_enc, c)?;
    let zt = tape.constant(z_gt);
    let lat = latent_loss(tape, z, zt)?;
    let mut terms = LossTerms { latent: tape.scalar_value(lat).as_f64(), ..Default::default() };
    let (mut l2, mut surr) = (None, None);
    if w.l2 != 0.0 || w.perceptual != 0.0 {
        let pg = gen.params().bind_frozen(tape);
        let y = gen.forward(tape, &pg, z)?;
        let x = tape.constant(images);
        let (a, b) = pixel_losses(tape, y, x)?;
        terms.l2 = tape.scalar_value(a).as_f64();
        terms.perceptual = tape.scalar_value(b).as_f64();
        (l2, surr) = (Some(a), Some(b));
    }
    Ok((vec![(w.latent, Some(lat)), (w.l2, l2), (w.perceptual, surr)], terms))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub latent_l1: f64,
    pub psnr: f64,
    pub pixel_l1: f64,
}

/// Held-out quality of `G(E(Φ I))` on `split`, with ideal measurements.
pub fn evaluate<T: Scalar>(
    model: &LsiModel<T>,
    gen: &Generator<T>,
    targets: &LatentTargets<T>,
    ds: &Dataset,
    split: Split,
) -> Result<EvalStats> {
    let idx = ds.indices(split);
    evaluate_with(model, gen, targets, ds, &idx, |chunk| model.measure(&summed_batch(ds, chunk)))
}

/// Like [`evaluate`] on `idx`, with measurements supplied by `measure`.
pub fn evaluate_with<T: Scalar>(
    model: &LsiModel<T>,
    gen: &Generator<T>,
    targets: &LatentTargets<T>,
    ds: &Dataset,
    idx: &[usize],
    mut measure: impl FnMut(&[usize]) -> Result<Tensor<T>>,
) -> Result<EvalStats> {
    let per = ds.spec.numel();
    let mut s = EvalStats::default();
    for chunk in idx.chunks(64) {
        let z = model.encode(&measure(chunk)?)?;
        let y = gen.generate(&z)?;
        for (b, &i) in chunk.iter().enumerate() {
            let zp: Vec<f64> = z.data()[b * targets.width()..(b + 1) * targets.width()].iter().map(|v| v.as_f64()).collect();
            let zg: Vec<f64> = targets.row(i).iter().map(|v| v.as_f64()).collect();
            let img: Vec<f64> = y.data()[b * per..(b + 1) * per].iter().map(|v| v.as_f64()).collect();
            let truth = ds.items[i].image.data();
            s.latent_l1 += mean_abs(&zp, &zg);
            s.psnr += psnr(&img, truth);
            s.pixel_l1 += mean_abs(&img, truth);
        }
    }
    let n = idx.len().max(1) as f64;
    Ok(EvalStats { latent_l1: s.latent_l1 / n, psnr: s.psnr / n, pixel_l1: s.pixel_l1 / n })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    pub train: LossTerms,
    pub val: EvalStats,
    /// Standard deviation of the per-mask one-counts.
    pub occupancy_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Number of phase-1 epochs run.
    pub phase1_epochs: usize,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch",
            "phase",
            "latent",
            "l2",
            "perceptual",
            "energy",
            "total",
            "val_latent_l1",
            "val_psnr",
            "val_pixel_l1",
            "occupancy_std",
        ])?;
        for e in &self.epochs {
            w.write_record(&[
                e.epoch.to_string(),
                e.phase.to_string(),
                format!("{:.8}", e.train.latent),
                format!("{:.8}", e.train.l2),
                format!("{:.8}", e.train.perceptual),
                format!("{:.8}", e.train.energy),
                format!("{:.8}", e.train.total),
                format!("{:.8}", e.val.latent_l1),
                format!("{:.6}", e.val.psnr),
                format!("{:.8}", e.val.pixel_l1),
                format!("{:.4}", e.occupancy_std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last_phase1(&self) -> Option<&EpochLog> {
        self.epochs.iter().filter(|e| e.phase == 1).last()
    }
}

pub fn occupancy_std(hist: &[usize]) -> f64 {
    let n = hist.len().max(1) as f64;
    let mean = hist.iter().sum::<usize>() as f64 / n;
    (hist.iter().map(|&h| (h as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `true` once the best of the last `patience` values improves on the best
/// before them by less than `min_improvement` (relative).
pub fn plateaued(history: &[f64], patience: usize, min_improvement: f64) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    recent > before * (1.0 - min_improvement)
}

struct Trainer<'a, T: Scalar> {
    ds: &'a Dataset,
    gen: &'a Generator<T>,
    targets: &'a LatentTargets<T>,
    cfg: &'a LsiConfig,
    lion: Lion<T>,
    ranger: Ranger<T>,
    energy: EnergyTargets,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl<T: Scalar> Trainer<'_, T> {
    fn epoch(&mut self, model: &mut LsiModel<T>, epoch: usize, phase: u8) -> Result<LossTerms> {
        let mut w = self.cfg.weights;
        if phase == 1 {
            w.energy = 0.0;
        }
        self.order.shuffle(&mut self.rng);
        let mut acc = LossTerms::default();
        let mut steps = 0usize;
        let order = std::mem::take(&mut self.order);
        for chunk in order.chunks(self.cfg.batch_size) {
            let terms = self.step(model, chunk, &w).map_err(|e| match e {
                LsiError::Numeric { block, detail } => {
                    LsiError::Numeric { block, detail: format!("{detail} (phase {phase}, epoch {epoch}, step {steps})") }
                }
                other => other,
            })?;
            acc.latent += terms.latent;
            acc.l2 += terms.l2;
            acc.perceptual += terms.perceptual;
            acc.energy += terms.energy;
            acc.total += terms.total;
            steps += 1;
        }
        self.order = order;
        let n = steps.max(1) as f64;
        Ok(LossTerms {
            latent: acc.latent / n,
            l2: acc.l2 / n,
            perceptual: acc.perceptual / n,
            energy: acc.energy / n,
            total: acc.total / n,
        })
    }

    fn step(&mut self, model: &mut LsiModel<T>, chunk: &[usize], w: &LossWeights) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let (logits, bin) = model.optical.bind(&mut tape);
        let p_enc = model.encoder.params().bind(&mut tape);
        let x = tape.constant(&summed_batch(self.ds, chunk));
        let c = measure_batch(&mut tape, bin, x)?;
        let (mut parts, mut terms) = encoder_objective(
            &mut tape,
            &model.encoder,
            &p_enc,
            c,
            self.gen,
            &self.targets.rows(chunk),
            &self.ds.batch::<T>(chunk),
            w,
        )?;
        let energy = energy_loss(&mut tape, bin, &self.energy, self.cfg.energy_normalized)?;
        terms.energy = tape.scalar_value(energy).as_f64();
        parts.push((w.energy, Some(energy)));
        let total = weighted_sum(&mut tape, &parts)?.ok_or_else(|| LsiError::config("every loss weight is zero"))?;
        terms.total = tape.scalar_value(total).as_f64();
        if !terms.total.is_finite() {
            return Err(LsiError::Numeric { block: "LSI objective".into(), detail: format!("loss {:?}", terms) });
        }
        debug_assert!((terms.total - terms.weighted_total(w)).abs() <= 1e-6 * terms.total.abs().max(1.0));
        let grads = tape.backward(total)?;
        grads.accumulate_into(logits, model.optical.logits_mut())?;
        model.encoder.params_mut().accumulate(&p_enc, &grads)?;
        self.lion.step(std::slice::from_mut(model.optical.logits_mut()))?;
        self.ranger.step(model.encoder.params_mut().as_mut_slice())?;
        model.optical.logits_mut().zero_grad();
        model.encoder.params_mut().zero_grad();
        if !model.encoder.params().all_finite() {
            return Err(LsiError::Numeric { block: "digital encoder".into(), detail: "non-finite weights after update".into() });
        }
        Ok(terms)
    }
}

/// Phase 1 fits masks and encoder on the latent and pixel terms until
/// validation latent error plateaus; phase 2 adds the energy term.
pub fn train_lsi<T: Scalar>(
    ds: &Dataset,
    mut model: LsiModel<T>,
    gen: &Generator<T>,
    inv: &InversionEncoder<T>,
    cfg: &LsiConfig,
    seed: u64,
) -> Result<(LsiModel<T>, TrainReport)> {
    if cfg.batch_size == 0 {
        return Err(LsiError::config("batch size must be positive"));
    }
    if model.encoder.config().latent_len() != gen.config().latent_len() {
        return Err(LsiError::dim("encoder and decoder latent sizes differ"));
    }
    let frozen = (gen.params().checksum(), inv.params().checksum());
    let train_idx = ds.indices(Split::Train);
    if model.encoder.input_norm().is_none() {
        model.fit_input_norm(ds, &train_idx)?;
    }
    let targets = LatentTargets::compute(inv, ds)?;
    let mut trainer = Trainer {
        ds,
        gen,
        targets: &targets,
        cfg,
        lion: Lion::new(LionConfig::new(T::lit(cfg.lr_mask)).with_bounds(T::zero(), T::one())),
        ranger: ranger(T::lit(cfg.lr_encoder)),
        energy: EnergyTargets::shuffled(model.measurements(), model.optical.pixels(), seed),
        rng: ChaCha8Rng::seed_from_u64(seed),
        order: train_idx,
    };
    let mut report = TrainReport::default();
    let mut history = Vec::new();
    let mut epoch = 0;
    for phase in [1u8, 2] {
        let cap = if phase == 1 { cfg.phase1_epochs } else { cfg.phase2_epochs };
        for _ in 0..cap {
            epoch += 1;
            let train = trainer.epoch(&mut model, epoch, phase)?;
            let val = evaluate(&model, gen, &targets, ds, Split::Val)?;
            let occ = occupancy_std(&model.optical.occupancy_histogram());
            log::info!(
                "phase {phase} epoch {epoch}: loss {:.5} lat {:.5} val lat {:.5} val PSNR {:.2} occ std {:.1}",
                train.total,
                train.latent,
                val.latent_l1,
                val.psnr,
                occ
            );
            report.epochs.push(EpochLog { epoch, phase, train, val, occupancy_std: occ });
            if phase == 1 {
                history.push(val.latent_l1);
                if plateaued(&history, cfg.patience, cfg.min_improvement) {
                    break;
                }
            }
        }
        if phase == 1 {
            report.phase1_epochs = epoch;
        }
    }
    assert_eq!(
        frozen,
        (gen.params().checksum(), inv.params().checksum()),
        "frozen decoder weights changed during training"
    );
    Ok((model, report))
}
