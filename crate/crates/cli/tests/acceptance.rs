//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The pipeline criteria (5, 6, 7, 10) train on a 1,200-image synthetic face
//! set and take tens of minutes on one core. Checkpoints are cached under
//! `LSI_ACCEPTANCE_CACHE` (default: the cargo target tmp dir); set it to
//! `off` to retrain from scratch.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use lsi_core::acquisition::{
    calibrate_white_repeated, finetune, finetune_subset, sense_items, white_expected, FinetuneConfig, FinetuneReport, SensorModel,
};
use lsi_core::autodiff::{grad_check, grad_check_entries, Tape, Tensor, Var};
use lsi_core::checkpoint::Checkpoint;
use lsi_core::dataset::{load_dataset, read_labels, write_synthetic, Dataset, ImageSpec, Split};
use lsi_core::digital::{DigitalEncoder, EncoderConfig};
use lsi_core::fsi::{fsi_acquire, fsi_reconstruct, fsi_reconstruct_raw, full_coverage, select_frequencies};
use lsi_core::generative::{
    autoencoder_psnr, pretrain_autoencoder, DecoderConfig, Generator, InversionEncoder, PretrainConfig,
};
use lsi_core::metrics::{loo_1nn_accuracy, mse, psnr};
use lsi_core::optical::{energy_loss, measure_batch, quantize_ste, EnergyTargets, OpticalEncoder};
use lsi_core::train::losses::{latent_loss, pixel_losses, weighted_sum, LossWeights};
use lsi_core::train::optim::{Lion, LionConfig, Lookahead, Optimizer, RAdam, RAdamConfig};
use lsi_core::train::{evaluate, summed_batch, train_lsi, LatentTargets, LsiConfig, LsiModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String)>;

fn report(id: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let res = f();
    let took = t.elapsed();
    let (mut pass, mut detail) = match res {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e:#}")),
    };
    if let Some(limit) = limit {
        if took > limit {
            pass = false;
            detail.push_str(&format!("; over the {:.0} s budget", limit.as_secs_f64()));
        }
    }
    println!("{} {id:>2} {name}: {detail} ({:.1} s)", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
    pass
}

fn info(msg: &str) {
    println!("INFO    {msg}");
}

// ---- 1: gradients -----------------------------------------------------------

const SEEDS: u64 = 20;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform in [-2, 2], at least `margin` from each kink.
fn off_kinks(shape: &[usize], kinks: &[f64], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so each output entry gets
/// its own upstream gradient.
fn probe(tape: &mut Tape<f64>, y: Var, weights: &[f64]) -> lsi_core::Result<Var> {
    let n = tape.numel(y);
    let w = Tensor::new(tape.shape(y).to_vec(), weights[..n].to_vec())?;
    let w = tape.constant(&w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> lsi_core::Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    op: OpFn,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Tape<f64>, &[Var]) -> lsi_core::Result<Var> + 'static) -> Case {
    Case { name, inputs, op: Box::new(op) }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let r = |s: &[usize], rng: &mut ChaCha8Rng| uniform(s, -2.0, 2.0, rng);
    vec![
        case("add", vec![r(&[2, 3], rng), r(&[2, 3], rng)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![r(&[2, 3], rng), r(&[2, 3], rng)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![r(&[2, 3], rng), r(&[2, 3], rng)], |t, v| t.mul(v[0], v[1])),
        case("div", vec![r(&[2, 3], rng), off_kinks(&[2, 3], &[0.0], 0.3, rng)], |t, v| t.div(v[0], v[1])),
        case("scalar broadcast", vec![r(&[2, 3], rng), r(&[1], rng)], |t, v| t.mul(v[0], v[1])),
        case("clamp", vec![off_kinks(&[3, 4], &[-1.0, 1.0], 1e-3, rng)], |t, v| Ok(t.clamp(v[0], -1.0, 1.0))),
        case("abs", vec![off_kinks(&[3, 4], &[0.0], 1e-3, rng)], |t, v| Ok(t.abs(v[0]))),
        case("leaky_relu", vec![off_kinks(&[3, 4], &[0.0], 1e-3, rng)], |t, v| Ok(t.leaky_relu(v[0]))),
        case("sign", vec![off_kinks(&[3, 4], &[0.0], 1e-3, rng)], |t, v| Ok(t.sign(v[0]))),
        case("sigmoid", vec![r(&[3, 4], rng)], |t, v| Ok(t.sigmoid(v[0]))),
        case("square", vec![r(&[3, 4], rng)], |t, v| Ok(t.square(v[0]))),
        case("add_scalar", vec![r(&[3, 4], rng)], |t, v| Ok(t.add_scalar(v[0], 0.7))),
        case("mul_scalar", vec![r(&[3, 4], rng)], |t, v| Ok(t.mul_scalar(v[0], -1.3))),
        case("sum", vec![r(&[3, 4], rng)], |t, v| {
            let s = t.sum(v[0]);
            Ok(t.square(s))
        }),
        case("mean", vec![r(&[3, 4], rng)], |t, v| {
            let s = t.mean(v[0]);
            Ok(t.square(s))
        }),
        case("sum_axis 0", vec![r(&[2, 3, 4], rng)], |t, v| t.sum_axis(v[0], 0)),
        case("sum_axis 2", vec![r(&[2, 3, 4], rng)], |t, v| t.sum_axis(v[0], 2)),
        case("reshape", vec![r(&[2, 6], rng)], |t, v| {
            let x = t.reshape(v[0], vec![3, 4])?;
            Ok(t.square(x))
        }),
        case("transpose", vec![r(&[2, 3], rng), r(&[3, 2], rng)], |t, v| {
            let a = t.transpose(v[0])?;
            t.mul(a, v[1])
        }),
        case("concat_cols", vec![r(&[2, 3], rng), r(&[2, 2], rng)], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            Ok(t.square(c))
        }),
        case("slice_cols", vec![r(&[3, 5], rng)], |t, v| t.slice_cols(v[0], 1, 3)),
        case("matmul", vec![r(&[3, 4], rng), r(&[4, 5], rng)], |t, v| t.matmul(v[0], v[1])),
        case("add_row", vec![r(&[3, 4], rng), r(&[4], rng)], |t, v| t.add_row(v[0], v[1])),
        case("linear", vec![r(&[3, 4], rng), r(&[4, 5], rng), r(&[5], rng)], |t, v| t.linear(v[0], v[1], v[2])),
        case("conv2d s1 p1", vec![r(&[2, 2, 5, 5], rng), r(&[3, 2, 3, 3], rng)], |t, v| t.conv2d(v[0], v[1], 1, 1)),
        case("conv2d s2 p0", vec![r(&[2, 2, 5, 5], rng), r(&[3, 2, 3, 3], rng)], |t, v| t.conv2d(v[0], v[1], 2, 0)),
        case("conv2d 1x1", vec![r(&[1, 3, 4, 4], rng), r(&[2, 3, 1, 1], rng)], |t, v| t.conv2d(v[0], v[1], 1, 0)),
        case("add_channel_bias", vec![r(&[2, 3, 4, 4], rng), r(&[3], rng)], |t, v| t.add_channel_bias(v[0], v[1])),
        case("film", vec![r(&[2, 3, 4, 4], rng), r(&[2, 3], rng), r(&[2, 3], rng)], |t, v| t.film(v[0], v[1], v[2])),
        case("add_batch_broadcast", vec![r(&[2, 3, 4, 4], rng), r(&[3, 4, 4], rng)], |t, v| {
            let y = t.add_batch_broadcast(v[0], v[1])?;
            Ok(t.square(y))
        }),
        case("upsample2x", vec![r(&[2, 2, 3, 3], rng)], |t, v| t.upsample2x_nearest(v[0])),
        case("avg_pool2x", vec![r(&[2, 2, 4, 4], rng)], |t, v| t.avg_pool2x(v[0])),
        case("layer_norm 1", vec![r(&[3, 5], rng)], |t, v| t.layer_norm(v[0], 1)),
        case("layer_norm 0", vec![r(&[4, 3], rng)], |t, v| t.layer_norm(v[0], 0)),
        case("layer_norm 3-d", vec![r(&[2, 4, 3], rng)], |t, v| t.layer_norm(v[0], 1)),
        case("level_mix", vec![r(&[6, 4], rng), r(&[3, 3], rng), r(&[3], rng)], |t, v| t.level_mix(v[0], 3, v[1], v[2])),
    ]
}

fn small_encoder(d: usize) -> EncoderConfig {
    EncoderConfig { d, levels: 3, latent_width: 8, split: (1, 1, 1), hidden: 16, expansion: 4, depths: (1, 2, 2), input_scale: 1.0 }
}

fn small_decoder() -> DecoderConfig {
    DecoderConfig { levels: 3, latent_width: 8, channels: 1, widths: vec![8, 8, 4] }
}

struct Composite {
    optical: OpticalEncoder<f64>,
    encoder: DigitalEncoder<f64>,
    gen: Generator<f64>,
    images: Tensor<f64>,
    z_gt: Tensor<f64>,
}

impl Composite {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (b, d) = (2, 6);
        let images = uniform(&[b, 1, 16, 16], 0.0, 1.0, &mut rng);
        let z_gt = uniform(&[b, 24], -1.0, 1.0, &mut rng);
        Composite {
            optical: OpticalEncoder::init_balanced(d, 16, 16, seed).unwrap(),
            encoder: DigitalEncoder::new(small_encoder(d), seed).unwrap(),
            gen: Generator::new(small_decoder(), seed).unwrap(),
            images,
            z_gt,
        }
    }

    /// Masks, measurement, encoder, generator and the weighted objective;
    /// `x` is the scene as `[B, mn]`.
    fn loss(&self, t: &mut Tape<f64>, x: Var, enc: Option<(&str, Var)>, gen: Option<(&str, Var)>) -> lsi_core::Result<Var> {
        let l = t.constant(self.optical.logits());
        let bin = quantize_ste(t, l, 0.5);
        let c = measure_batch(t, bin, x)?;
        let c = t.mul_scalar(c, 1.0 / 64.0);
        let mut pe = self.encoder.params().bind_frozen(t);
        if let Some((name, v)) = enc {
            pe = pe.with(self.encoder.params().id(name).unwrap(), v);
        }
        let z = self.encoder.encode(t, &pe, c)?;
        let mut pg = self.gen.params().bind_frozen(t);
        if let Some((name, v)) = gen {
            pg = pg.with(self.gen.params().id(name).unwrap(), v);
        }
        let y = self.gen.forward(t, &pg, z)?;
        let zt = t.constant(&self.z_gt);
        let lat = latent_loss(t, z, zt)?;
        let target = t.constant(&self.images);
        let (l2, surr) = pixel_losses(t, y, target)?;
        let w = LossWeights::default();
        Ok(weighted_sum(t, &[(w.latent, Some(lat)), (w.l2, Some(l2)), (w.perceptual, Some(surr))])?.unwrap())
    }

    fn scene(&self) -> Tensor<f64> {
        self.images.clone().reshaped(vec![2, 256]).unwrap()
    }
}

/// Up to `k` spread-out flat indices of a tensor with `n` entries.
fn sample_indices(n: usize, k: usize) -> Vec<usize> {
    let step = (n / k).max(1);
    (0..n).step_by(step).take(k).collect()
}

fn criterion_gradients() -> Outcome {
    let h = 1e-6;
    let mut worst_op = (0.0f64, "");
    let mut checks = 0usize;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in op_cases(&mut rng) {
            for k in 0..c.inputs.len() {
                let err = grad_check(
                    |t, x| {
                        let vars: Vec<Var> =
                            c.inputs.iter().enumerate().map(|(j, v)| if j == k { x } else { t.constant(v) }).collect();
                        let y = (c.op)(t, &vars)?;
                        probe(t, y, &weights)
                    },
                    &c.inputs[k],
                    h,
                )?;
                checks += 1;
                if err > worst_op.0 {
                    worst_op = (err, c.name);
                }
            }
        }
    }

    let mut worst_comp = (0.0f64, String::new());
    for seed in 0..SEEDS {
        let m = Composite::new(seed);
        let scene = m.scene();
        let mut errs = vec![("scene".to_string(), grad_check(|t, x| m.loss(t, x, None, None), &scene, h)?)];
        for (name, p) in m.encoder.params().iter() {
            let idx = sample_indices(p.numel(), 6);
            let e = grad_check_entries(|t, v| {
                    let x = t.constant(&scene);
                    m.loss(t, x, Some((name, v)), None)
                }, p, h, &idx);
            errs.push((format!("encoder {name}"), e?));
        }
        for (name, p) in m.gen.params().iter() {
            let idx = sample_indices(p.numel(), 6);
            let e = grad_check_entries(|t, v| {
                    let x = t.constant(&scene);
                    m.loss(t, x, None, Some((name, v)))
                }, p, h, &idx);
            errs.push((format!("generator {name}"), e?));
        }
        for (name, e) in errs {
            if e > worst_comp.0 {
                worst_comp = (e, name);
            }
        }
    }
    let pass = worst_op.0 < 1e-4 && worst_comp.0 < 1e-3;
    Ok((
        pass,
        format!(
            "{checks} op checks over {SEEDS} seeds, max rel err {:.2e} ({}); composite max {:.2e} ({})",
            worst_op.0, worst_op.1, worst_comp.0, worst_comp.1
        ),
    ))
}

// ---- 2: straight-through estimator -----------------------------------------

fn criterion_ste() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut logits: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
    logits.extend([0.0, 1.0, 0.5, 0.5 - 1e-12, -0.25, 1.25]);
    let n = logits.len();
    let upstream: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let x = Tensor::new(vec![n], logits.clone())?.with_grad();
    let mut t = Tape::new();
    let l = t.leaf(&x);
    let b = quantize_ste(&mut t, l, 0.5);
    let forward = t.value(b).to_vec();
    let g = t.constant(&Tensor::from_vec(upstream.clone()));
    let p = t.mul(b, g)?;
    let s = t.sum(p);
    let grads = t.backward(s)?;
    let back = grads.get_or_zeros(l, n);

    let binary = forward.iter().all(|&v| v == 0.0 || v == 1.0);
    let thresholded = logits.iter().zip(&forward).all(|(&x, &y)| y == if x >= 0.5 { 1.0 } else { 0.0 });
    let straight = logits.iter().zip(&back).zip(&upstream).all(|((&x, &gx), &u)| {
        if x > 0.0 && x < 1.0 {
            gx == u
        } else {
            gx == 0.0
        }
    });

    // Lion on the energy term plus a random linear pull that drives logits
    // against both bounds.
    let (d, side) = (16, 16);
    let mut enc = OpticalEncoder::<f64>::init_balanced(d, side, side, 3)?;
    let targets = EnergyTargets::shuffled(d, side * side, 3);
    let pull = uniform(&[d, side * side], -1.0, 1.0, &mut rng);
    let mut lion = Lion::new(LionConfig::new(0.01).with_bounds(0.0, 1.0));
    let mut in_bounds = true;
    let mut saturated = 0usize;
    for _ in 0..1000 {
        let mut t = Tape::new();
        let (lv, bin) = enc.bind(&mut t);
        let e = energy_loss(&mut t, bin, &targets, true)?;
        let pv = t.constant(&pull);
        let lin = t.mul(lv, pv)?;
        let lin = t.mean(lin);
        let total = t.add(e, lin)?;
        let grads = t.backward(total)?;
        grads.accumulate_into(lv, enc.logits_mut())?;
        lion.step(std::slice::from_mut(enc.logits_mut()))?;
        enc.logits_mut().zero_grad();
        in_bounds &= enc.logits().data().iter().all(|v| (0.0..=1.0).contains(v));
    }
    saturated += enc.logits().data().iter().filter(|&&v| v == 0.0 || v == 1.0).count();
    Ok((
        binary && thresholded && straight && in_bounds,
        format!(
            "forward binary {binary}, threshold {thresholded}, backward pass-through {straight}; \
             1000 Lion steps in [0,1]: {in_bounds} ({saturated} logits at a bound)"
        ),
    ))
}

// ---- 3: energy loss -----------------------------------------------------------

fn criterion_energy() -> Outcome {
    let (d, side) = (81, 32);
    let mn = side * side;
    let mut enc = OpticalEncoder::<f64>::init_balanced(d, side, side, 81)?;
    let targets = EnergyTargets::shuffled(d, mn, 81);
    let mut lion = Lion::new(LionConfig::new(1e-3).with_bounds(0.0, 1.0));
    let start = targets.mean_abs_error(&enc.occupancy_histogram());
    for _ in 0..2000 {
        let mut t = Tape::new();
        let (lv, bin) = enc.bind(&mut t);
        let e = energy_loss(&mut t, bin, &targets, false)?;
        let e = t.mul_scalar(e, 3.0);
        let grads = t.backward(e)?;
        grads.accumulate_into(lv, enc.logits_mut())?;
        lion.step(std::slice::from_mut(enc.logits_mut()))?;
        enc.logits_mut().zero_grad();
    }
    let hist = enc.occupancy_histogram();
    let err = targets.mean_abs_error(&hist);
    let (lo, hi) = (*hist.iter().min().unwrap(), *hist.iter().max().unwrap());
    let spans = lo as f64 <= 0.15 * mn as f64 && hi as f64 >= 0.85 * mn as f64;
    Ok((
        err < 0.02 * mn as f64 && spans,
        format!(
            "mean |occupancy - target| {start:.1} -> {err:.2} (limit {:.2}); histogram [{lo}, {hi}] of {mn}",
            0.02 * mn as f64
        ),
    ))
}

// ---- 4: FSI -------------------------------------------------------------------

fn criterion_fsi() -> Outcome {
    let (m, n) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let full = full_coverage(m, n);
    let mut worst_mse = 0.0f64;
    let mut lowpass = true;
    let mut worst_ratio = 0.0f64;
    for _ in 0..10 {
        let img: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (rec, _) = fsi_reconstruct_raw(&fsi_acquire(&img, &full)?, &full)?;
        worst_mse = worst_mse.max(mse(&rec, &img));
        let energy: f64 = img.iter().map(|v| v * v).sum();
        for budget in [3, 24, 48, 96, 192, 768, 1536] {
            let set = select_frequencies(budget, m, n)?;
            let (rec, _) = fsi_reconstruct_raw(&fsi_acquire(&img, &set)?, &set)?;
            let e: f64 = rec.iter().map(|v| v * v).sum();
            worst_ratio = worst_ratio.max(e / energy);
            lowpass &= e <= energy * (1.0 + 1e-12);
        }
    }
    Ok((
        worst_mse < 1e-6 && lowpass,
        format!("full coverage max MSE {worst_mse:.2e}; circular budgets max energy ratio {worst_ratio:.6}"),
    ))
}

// ---- 8: optimizers ---------------------------------------------------------------

fn with_grads(values: &[f64], grads: &[f64]) -> Tensor<f64> {
    let mut t = Tensor::from_vec(values.to_vec()).with_grad();
    set_grad(&mut t, grads);
    t
}

fn set_grad(t: &mut Tensor<f64>, grads: &[f64]) {
    t.zero_grad();
    t.accumulate_grad(grads).unwrap();
}

fn criterion_optimizers() -> Outcome {
    // Lion, lr 0.01, weight decay 0.1, two steps worked by hand:
    //   θ = 0.5,  g = 0.2, -0.3 : 0.4895, 0.4990105
    //   θ = -0.2, g = -1, 0.05  : -0.1898, -0.1796102
    //   θ = 0,    g = 0, 0      : 0, 0
    let mut cfg = LionConfig::new(0.01);
    cfg.weight_decay = 0.1;
    let mut lion = Lion::new(cfg);
    let mut p = [with_grads(&[0.5, -0.2, 0.0], &[0.2, -1.0, 0.0])];
    lion.step(&mut p)?;
    let s1 = p[0].data().to_vec();
    set_grad(&mut p[0], &[-0.3, 0.05, 0.0]);
    lion.step(&mut p)?;
    let s2 = p[0].data().to_vec();
    let lion_err = s1
        .iter()
        .zip([0.4895, -0.1898, 0.0])
        .chain(s2.iter().zip([0.4990105, -0.1796102, 0.0]))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let init: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gs: Vec<Vec<f64>> = (0..23).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut plain = RAdam::new(RAdamConfig::new(1e-2));
    let mut la = Lookahead::new(RAdam::new(RAdamConfig::new(1e-2)), 5, 1.0);
    let mut a = [with_grads(&init, &gs[0])];
    let mut b = [with_grads(&init, &gs[0])];
    let mut la_err = 0.0f64;
    for g in &gs {
        set_grad(&mut a[0], g);
        set_grad(&mut b[0], g);
        plain.step(&mut a)?;
        la.step(&mut b)?;
        la_err = a[0].data().iter().zip(b[0].data()).map(|(x, y)| (x - y).abs()).fold(la_err, f64::max);
    }

    let mut radam = RAdam::new(RAdamConfig::new(1e-3));
    let mut ranger = lsi_core::train::optim::ranger(1e-3);
    let mut c = [with_grads(&init, &[0.0; 7])];
    let mut d = [Tensor::from_vec(init.clone())];
    for _ in 0..50 {
        radam.step(&mut c)?;
        ranger.step(&mut d)?;
    }
    let fixed = c[0].data() == &init[..] && d[0].data() == &init[..];
    Ok((
        lion_err <= 1e-12 && la_err <= 1e-12 && fixed,
        format!("Lion hand-step error {lion_err:.1e}; Lookahead(α=1) vs RAdam {la_err:.1e}; RAdam/Ranger zero-gradient fixed point {fixed}"),
    ))
}

// ---- 9: CLI reproducibility ------------------------------------------------------

const TINY: &str = "\
data.height = 16
data.width = 16
data.synthetic_count = 500
decoder.levels = 3
decoder.latent_width = 8
decoder.widths = 8,8,4
pretrain.epochs = 1
pretrain.batch_size = 64
encoder.d = 4
encoder.split = 1,1,1
encoder.hidden = 16
encoder.depths = 1,1,1
train.phase1_epochs = 1
train.phase2_epochs = 1
train.batch_size = 64
finetune.epochs = 1
finetune.pairs = 20
sensor.gain = 1.3
sensor.bias = 0.02
sensor.read_noise = 0.005
sensor.adc_bits = 10
calibrate.repeats = 2
run.seed = 5
";

fn lsi(config: &Path, args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_lsi")).arg("--config").arg(config).args(args).env("RUST_LOG", "warn").output()?;
    ensure!(out.status.success(), "lsi {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn artifacts(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "lsi")) {
            files.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p)?));
        }
    }
    files.sort();
    Ok(files)
}

fn dir_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        files.push((p.clone(), fs::read(&p)?));
    }
    files.sort();
    Ok(files)
}

fn criterion_reproducible() -> Outcome {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path();
    let config = root.join("tiny.cfg");
    fs::write(
        &config,
        format!(
            "{TINY}data.dir = {}\ndata.labels = {}\npaths.runs = {}\n",
            root.join("data").display(),
            root.join("data/labels.csv").display(),
            root.join("runs").display()
        ),
    )?;
    let image = root.join("data/face_00007.png");
    let image_arg = format!("data.image={}", image.display());
    let commands: [&[&str]; 11] = [
        &["make-dataset"],
        &["pretrain"],
        &["train"],
        &["evaluate"],
        &["reconstruct", "--set", &image_arg],
        &["fsi"],
        &["calibrate"],
        &["finetune"],
        &["export-latents"],
        &["export-masks"],
        &["evaluate"],
    ];
    let mut compared = 0usize;
    for (k, args) in commands.iter().enumerate() {
        let first = root.join(format!("out/{k}-a"));
        let second = root.join(format!("out/{k}-b"));
        let mut a_args = args.to_vec();
        a_args.extend(["--out", first.to_str().unwrap()]);
        lsi(&config, &a_args)?;
        // make-dataset rewrites data.dir in place; snapshot it first
        let data_before = if k == 0 { Some(dir_bytes(&root.join("data"))?) } else { None };
        let mut b_args = args.to_vec();
        b_args.extend(["--out", second.to_str().unwrap()]);
        lsi(&first.join("config.txt"), &b_args)?;
        if let Some(before) = data_before {
            ensure!(before == dir_bytes(&root.join("data"))?, "regenerated dataset differs");
        }
        let (a, b) = (artifacts(&first)?, artifacts(&second)?);
        ensure!(!a.is_empty(), "{args:?} wrote no CSV or checkpoint");
        if a != b {
            let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
            return Ok((false, format!("`{}` outputs differ: {differing:?}", args[0])));
        }
        compared += a.len();
        // later subcommands resolve their inputs from paths.runs
        let dest = root.join("runs").join(format!("{k}-{}", args[0]));
        fs::create_dir_all(root.join("runs"))?;
        fs::rename(&first, &dest)?;
        // keep modification times ordered for the newest-run lookup
        std::thread::sleep(Duration::from_millis(20));
    }
    Ok((true, format!("{} subcommand runs repeated, {compared} CSV/checkpoint files bit-identical", commands.len())))
}

// ---- pipeline: 5, 6, 7, 10 -------------------------------------------------------

const FACES: usize = 1200;
const FACE_SEED: u64 = 7;
const PRETRAIN_SEED: u64 = 0;
const LSI_SEED: u64 = 1;
const DS: [usize; 4] = [64, 32, 16, 8];
const FINETUNE_D: usize = 8;
const RETRIEVAL_D: usize = 64;

struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    fn from_env() -> Self {
        let dir = match std::env::var("LSI_ACCEPTANCE_CACHE") {
            Ok(v) if v == "off" => None,
            Ok(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => Some(PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("lsi-acceptance")),
        };
        Cache { dir }
    }

    fn file(&self, stem: &str, key: &impl std::fmt::Debug, ext: &str) -> Option<PathBuf> {
        let mut h = DefaultHasher::new();
        format!("{key:?}").hash(&mut h);
        self.dir.as_ref().map(|d| d.join(format!("{stem}-{:016x}.{ext}", h.finish())))
    }
}

struct Pipeline {
    ds: Dataset,
    labels: Vec<u32>,
    gen: Generator<f64>,
    targets: LatentTargets<f64>,
    ae_test_psnr: f64,
    models: Vec<(usize, LsiModel<f64>)>,
    _tmp: tempfile::TempDir,
}

/// Saves through a checkpoint and reads back, so evaluation sees the stored
/// `f32` weights.
fn round_trip_decoder(gen: &Generator<f64>, inv: &InversionEncoder<f64>, path: &Path) -> Result<(Generator<f64>, InversionEncoder<f64>)> {
    let mut c = Checkpoint::new();
    c.insert_store(gen.params());
    c.insert_store(inv.params());
    c.save(path)?;
    Ok(Checkpoint::load(path)?.load_decoder(gen.config())?)
}

fn round_trip_model(model: &LsiModel<f64>, path: &Path) -> Result<LsiModel<f64>> {
    let mut c = Checkpoint::new();
    c.insert_lsi(model);
    c.save(path)?;
    Ok(Checkpoint::load(path)?.load_lsi(model.encoder.config(), model.optical.height(), model.optical.width())?)
}

fn read_log(path: &Path) -> Result<Vec<(u8, f64, f64)>> {
    let mut rows = Vec::new();
    for r in csv::Reader::from_path(path)?.records() {
        let r = r?;
        rows.push((r[1].parse()?, r[7].parse()?, r[10].parse()?));
    }
    Ok(rows)
}

fn build_pipeline() -> Result<Pipeline> {
    let cache = Cache::from_env();
    let tmp = tempfile::tempdir()?;
    let data_dir = match &cache.dir {
        Some(d) => d.join(format!("faces-{FACES}-{FACE_SEED}")),
        None => tmp.path().join("faces"),
    };
    if !data_dir.join("labels.csv").is_file() {
        write_synthetic(&data_dir, FACES, 32, FACE_SEED)?;
    }
    let ds = load_dataset(&data_dir, ImageSpec::gray(32, 32), 0, &tmp.path().join("manifest.tsv"))?;
    let labels = read_labels(&data_dir.join("labels.csv"), &ds)?;
    info(&format!(
        "dataset: {} faces at 32x32 ({} train / {} val / {} test), manifest {}",
        ds.len(),
        ds.indices(Split::Train).len(),
        ds.indices(Split::Val).len(),
        ds.indices(Split::Test).len(),
        &ds.manifest_hash()[..12]
    ));

    let pcfg = PretrainConfig::desk(1);
    let key = (&pcfg, PRETRAIN_SEED, ds.manifest_hash());
    let pre_path = cache.file("decoder", &key, "lsi").unwrap_or_else(|| tmp.path().join("decoder.lsi"));
    let (gen, inv) = if pre_path.is_file() {
        info(&format!("decoder: cached {}", pre_path.display()));
        Checkpoint::load(&pre_path)?.load_decoder(&pcfg.decoder)?
    } else {
        let t = Instant::now();
        let (g, n, rep) = pretrain_autoencoder::<f64>(&ds, &pcfg, PRETRAIN_SEED)?;
        info(&format!("decoder: pretrained {} epochs in {:.0} s", rep.epochs.len(), t.elapsed().as_secs_f64()));
        fs::create_dir_all(pre_path.parent().unwrap())?;
        round_trip_decoder(&g, &n, &pre_path)?
    };
    let ae_test_psnr = autoencoder_psnr(&gen, &inv, &ds, Split::Test)?;
    let targets = LatentTargets::compute(&inv, &ds)?;

    let mut models = Vec::new();
    for d in DS {
        let cfg = LsiConfig::desk(d);
        let key = (&cfg, LSI_SEED, ds.manifest_hash(), pre_path.file_name());
        let path = cache.file(&format!("lsi-d{d}"), &key, "lsi").unwrap_or_else(|| tmp.path().join(format!("lsi-d{d}.lsi")));
        let log = path.with_extension("csv");
        let model = if path.is_file() && log.is_file() {
            info(&format!("d={d}: cached {}", path.display()));
            Checkpoint::load(&path)?.load_lsi(&cfg.encoder, 32, 32)?
        } else {
            let t = Instant::now();
            let init = LsiModel::new(&cfg.encoder, 32, 32, LSI_SEED)?;
            let (m, rep) = train_lsi(&ds, init, &gen, &inv, &cfg, LSI_SEED)?;
            info(&format!(
                "d={d}: trained {} epochs ({} in phase 1) in {:.0} s",
                rep.epochs.len(),
                rep.phase1_epochs,
                t.elapsed().as_secs_f64()
            ));
            rep.write_csv(&log)?;
            round_trip_model(&m, &path)?
        };
        let rows = read_log(&log)?;
        let p1: Vec<&(u8, f64, f64)> = rows.iter().filter(|r| r.0 == 1).collect();
        let p2: Vec<&(u8, f64, f64)> = rows.iter().filter(|r| r.0 == 2).collect();
        if let (Some(first), Some(last)) = (p1.first(), p1.last()) {
            let drop = 1.0 - last.1 / first.1;
            info(&format!(
                "d={d}: phase-1 validation latent L1 {:.4} -> {:.4} ({:.0}% drop; expected >= 30%: {})",
                first.1,
                last.1,
                100.0 * drop,
                if drop >= 0.3 { "yes" } else { "no" }
            ));
            if let Some(end) = p2.last() {
                info(&format!(
                    "d={d}: occupancy std after phase 1 {:.1}, after phase 2 {:.1} (wider: {})",
                    last.2,
                    end.2,
                    if end.2 > last.2 { "yes" } else { "no" }
                ));
            }
        }
        models.push((d, model));
    }
    Ok(Pipeline { ds, labels, gen, targets, ae_test_psnr, models, _tmp: tmp })
}

impl Pipeline {
    fn model(&self, d: usize) -> &LsiModel<f64> {
        &self.models.iter().find(|(k, _)| *k == d).expect("trained width").1
    }

    fn fsi_psnr(&self, budget: usize) -> Result<f64> {
        let set = select_frequencies(budget, 32, 32)?;
        let test = self.ds.indices(Split::Test);
        let mut sum = 0.0;
        for &i in &test {
            let img = self.ds.items[i].image.data();
            sum += psnr(&fsi_reconstruct(&fsi_acquire(img, &set)?, &set)?, img);
        }
        Ok(sum / test.len() as f64)
    }
}

fn criterion_compression(p: &Pipeline) -> Outcome {
    let gate = p.ae_test_psnr >= 22.0;
    let mut pass = gate;
    let mut parts = vec![format!("autoencoder test PSNR {:.2} dB (gate 22)", p.ae_test_psnr)];
    for d in DS {
        let lsi = evaluate(p.model(d), &p.gen, &p.targets, &p.ds, Split::Test)?.psnr;
        let fsi = p.fsi_psnr(d)?;
        let margin = lsi - fsi;
        if d <= 16 {
            pass &= margin >= 2.0;
        }
        parts.push(format!("d={d}: LSI {lsi:.2} / FSI {fsi:.2} ({margin:+.2})"));
    }
    Ok((pass, parts.join("; ")))
}

fn criterion_monotone(p: &Pipeline) -> Outcome {
    let mut errs = Vec::new();
    for d in [8, 16, 32, 64] {
        errs.push((d, evaluate(p.model(d), &p.gen, &p.targets, &p.ds, Split::Test)?.latent_l1));
    }
    let mut violations = 0;
    let mut large = false;
    for w in errs.windows(2) {
        if w[1].1 > w[0].1 {
            violations += 1;
            large |= w[1].1 > w[0].1 * 1.02;
        }
    }
    let listing: Vec<String> = errs.iter().map(|(d, e)| format!("d={d} {e:.4}")).collect();
    Ok((violations <= 1 && !large, format!("test latent L1 {}; {violations} increase(s)", listing.join(", "))))
}

/// `(calibration error, fine-tuning report)` for the width-`d` model.
fn sensed_finetune(p: &Pipeline, d: usize) -> Result<(f64, FinetuneReport)> {
    let model = p.model(d);
    let full = 1.5 * 1024.0;
    let sensor = SensorModel {
        gain: 1.3,
        bias: 0.02,
        read_sigma: 0.005 * full,
        shot_scale: 0.0,
        adc_bits: 10,
        adc_range: (0.0, full),
        saturation: None,
        seed: 3,
    };
    let scale = calibrate_white_repeated(&sensor, &white_expected(model, 1), 16)?;
    let cfg = FinetuneConfig::default();
    let train = finetune_subset(&p.ds.indices(Split::Train), cfg.pairs, 5);
    let held: Vec<usize> = p.ds.indices(Split::Val).into_iter().chain(p.ds.indices(Split::Test)).collect();
    let ct = sense_items(model, &p.ds, &train, &sensor, scale)?;
    let ch = sense_items(model, &p.ds, &held, &sensor, scale)?;
    let (_, rep) = finetune(model, &p.gen, &p.targets, &p.ds, (&train, &ct), (&held, &ch), &cfg, 5)?;
    Ok(((scale * sensor.gain - 1.0).abs(), rep))
}

fn criterion_calibration(p: &Pipeline) -> Outcome {
    for d in DS.into_iter().filter(|&d| d != FINETUNE_D && d <= 16) {
        let (err, rep) = sensed_finetune(p, d)?;
        info(&format!(
            "fine-tuning d={d}: scale error {:.3}%, held-out sensed PSNR {:.2} -> {:.2} dB ({:+.2})",
            100.0 * err,
            rep.pre.psnr,
            rep.post.psnr,
            rep.psnr_gain()
        ));
    }
    let (cal_err, rep) = sensed_finetune(p, FINETUNE_D)?;
    let gain = rep.psnr_gain();
    let cfg = FinetuneConfig::default();
    Ok((
        cal_err < 0.01 && gain >= 0.5,
        format!(
            "d={FINETUNE_D}: scale error {:.3}%; held-out sensed PSNR {:.2} -> {:.2} dB ({gain:+.2}, need +0.5) after {} epochs on {} pairs",
            100.0 * cal_err,
            rep.pre.psnr,
            rep.post.psnr,
            cfg.epochs,
            cfg.pairs
        ),
    ))
}

fn criterion_retrieval(p: &Pipeline) -> Outcome {
    let held: Vec<usize> = p.ds.indices(Split::Val).into_iter().chain(p.ds.indices(Split::Test)).collect();
    let labels: Vec<u32> = held.iter().map(|&i| p.labels[i]).collect();
    let pixels: Vec<Vec<f64>> = held.iter().map(|&i| p.ds.items[i].image.data().to_vec()).collect();
    let pixel = loo_1nn_accuracy(&pixels, &labels)?;
    let mut result = None;
    for d in DS {
        let model = p.model(d);
        let z = model.encode(&model.measure(&summed_batch(&p.ds, &held))?)?;
        let w = p.targets.width();
        let lat: Vec<Vec<f64>> = z.data().chunks(w).map(<[f64]>::to_vec).collect();
        let acc = loo_1nn_accuracy(&lat, &labels)?;
        info(&format!("retrieval d={d}: latent {acc:.3} vs pixel {pixel:.3} on {} held-out faces", held.len()));
        if d == RETRIEVAL_D {
            result = Some(acc);
        }
    }
    let inv: Vec<Vec<f64>> = held.iter().map(|&i| p.targets.row(i).to_vec()).collect();
    info(&format!("retrieval N(I): latent {:.3}", loo_1nn_accuracy(&inv, &labels)?));
    let latent = result.context("retrieval width was not trained")?;
    let margin = latent - pixel;
    let pass = margin >= -0.02;
    let note = if margin < 0.0 && pass { " (shortfall within 2 points, logged as a finding)" } else { "" };
    Ok((pass, format!("d={RETRIEVAL_D} latent 1-NN {latent:.3} vs pixel {pixel:.3}{note}")))
}

fn main() {
    // numeric arguments select criteria: `cargo test --test acceptance -- 1 8`
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| only.is_empty() || only.contains(&id);
    let mut all = true;
    let quick: [(u32, &str, Option<u64>, fn() -> Outcome); 6] = [
        (1, "gradients", Some(60), criterion_gradients),
        (2, "straight-through estimator", Some(60), criterion_ste),
        (3, "energy loss", Some(300), criterion_energy),
        (4, "FSI exactness and low-pass", Some(60), criterion_fsi),
        (8, "optimizers", Some(1), criterion_optimizers),
        (9, "reproducibility", None, criterion_reproducible),
    ];
    for (id, name, limit, f) in quick {
        if want(id) {
            all &= report(id, name, limit.map(Duration::from_secs), f);
        }
    }
    let slow: [(u32, &str, fn(&Pipeline) -> Outcome); 4] = [
        (5, "compression ordering", criterion_compression),
        (6, "measurement-count monotonicity", criterion_monotone),
        (7, "calibration and fine-tuning", criterion_calibration),
        (10, "latent-semantics proxy", criterion_retrieval),
    ];
    if slow.iter().any(|c| want(c.0)) {
        let t = Instant::now();
        let pipeline = build_pipeline();
        if pipeline.is_ok() {
            info(&format!("pipeline ready in {:.0} s", t.elapsed().as_secs_f64()));
        }
        for (id, name, f) in slow.into_iter().filter(|c| want(c.0)) {
            all &= report(id, name, None, || match &pipeline {
                Ok(p) => f(p),
                Err(e) => Err(anyhow::anyhow!("pipeline failed: {e:#}")),
            });
        }
    }
    if !all {
        std::process::exit(1);
    }
}
