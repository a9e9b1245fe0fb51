use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DecoderConfig, Generator, InversionEncoder};
use crate::autodiff::Tape;
use crate::dataset::{Dataset, Split};
use crate::error::{LsiError, Result};
use crate::metrics::psnr;
use crate::scalar::Scalar;
use crate::train::losses::pixel_losses;
use crate::train::optim::{ranger, Optimizer};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub decoder: DecoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub surrogate_weight: f64,
}

impl PretrainConfig {
    pub fn desk(channels: usize) -> Self {
        PretrainConfig { decoder: DecoderConfig::desk(channels), epochs: 60, batch_size: 32, lr: 1e-3, surrogate_weight: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub epochs: Vec<PretrainEpoch>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }
}

/// Mean per-image PSNR of `G(N(I))` over `split`.
pub fn autoencoder_psnr<T: Scalar>(
    gen: &Generator<T>,
    inv: &InversionEncoder<T>,
    ds: &Dataset,
    split: Split,
) -> Result<f64> {
    let idx = ds.indices(split);
    let per = ds.spec.numel();
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let x = ds.batch::<T>(chunk);
        let y = gen.generate(&inv.invert(&x)?)?;
        for (b, &i) in chunk.iter().enumerate() {
            let pred: Vec<f64> = y.data()[b * per..(b + 1) * per].iter().map(|v| v.as_f64()).collect();
            total += psnr(&pred, ds.items[i].image.data());
        }
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Trains decoder and inversion encoder jointly on the train split.
pub fn pretrain_autoencoder<T: Scalar>(
    ds: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Generator<T>, InversionEncoder<T>, PretrainReport)> {
    let d = &cfg.decoder;
    if ds.spec.channels != d.channels || ds.spec.height != d.size() || ds.spec.width != d.size() {
        return Err(LsiError::config(format!(
            "decoder produces {}×{}×{} images, dataset holds {}×{}×{}",
            d.channels,
            d.size(),
            d.size(),
            ds.spec.channels,
            ds.spec.height,
            ds.spec.width
        )));
    }
    if cfg.batch_size == 0 {
        return Err(LsiError::config("batch size must be positive"));
    }
    let mut gen = Generator::<T>::new(d.clone(), seed)?;
    let mut inv = InversionEncoder::<T>::new(d.clone(), seed.wrapping_add(1))?;
    let mut opt_g = ranger(T::lit(cfg.lr));
    let mut opt_n = ranger(T::lit(cfg.lr));
    let mut order = ds.indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut report = PretrainReport::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let x = ds.batch::<T>(chunk);
            let mut tape = Tape::new();
            let pg = gen.params().bind(&mut tape);
            let pn = inv.params().bind(&mut tape);
            let xv = tape.constant(&x);
            let z = inv.forward(&mut tape, &pn, xv)?;
            let y = gen.forward(&mut tape, &pg, z)?;
            let (mse, surr) = pixel_losses(&mut tape, y, xv)?;
            let surr = tape.mul_scalar(surr, T::lit(cfg.surrogate_weight));
            let loss = tape.add(mse, surr)?;
            let lv = tape.scalar_value(loss).as_f64();
            if !lv.is_finite() {
                return Err(LsiError::Numeric {
                    block: "autoencoder pretraining".into(),
                    detail: format!("loss {lv} at epoch {epoch}, batch {batches}"),
                });
            }
            let grads = tape.backward(loss)?;
            gen.params_mut().accumulate(&pg, &grads)?;
            inv.params_mut().accumulate(&pn, &grads)?;
            opt_g.step(gen.params_mut().as_mut_slice())?;
            opt_n.step(inv.params_mut().as_mut_slice())?;
            gen.params_mut().zero_grad();
            inv.params_mut().zero_grad();
            sum += lv;
            batches += 1;
        }
        let val_psnr = autoencoder_psnr(&gen, &inv, ds, Split::Val)?;
        let rec = PretrainEpoch { epoch, loss: sum / batches.max(1) as f64, val_psnr };
        log::info!("pretrain epoch {epoch}: loss {:.5}, val PSNR {:.2} dB", rec.loss, rec.val_psnr);
        report.epochs.push(rec);
    }
    Ok((gen, inv, report))
}
