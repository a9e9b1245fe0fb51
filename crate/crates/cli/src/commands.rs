use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lsi_core::acquisition::{
    calibrate_white_repeated, finetune, finetune_subset, sense_items, white_expected, SensorModel,
};
use lsi_core::checkpoint::Checkpoint;
use lsi_core::dataset::{load_image, read_labels, sum_channels, write_synthetic, Dataset, Split};
use lsi_core::fsi::{fsi_acquire, fsi_acquire_sensed, fsi_readings, fsi_reconstruct, select_frequencies};
use lsi_core::generative::{autoencoder_psnr, pretrain_autoencoder, Generator, InversionEncoder};
use lsi_core::metrics::{format_psnr, mean_abs, metrics, psnr, retrieval_proxy, Metrics};
use lsi_core::output::{read_latents_csv, save_image, save_mask, write_latents_csv};
use lsi_core::train::{evaluate, summed_batch, train_lsi, EvalStats, LatentTargets, LsiModel};
use lsi_core::{LsiError, Tensor};

use crate::run::{Run, CALIBRATION_FILE, DECODER_FILE, MODEL_FILE};

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    Ok(w)
}

fn stats_row(label: &str, n: usize, s: &EvalStats) -> Vec<String> {
    vec![label.to_string(), n.to_string(), format_psnr(s.psnr), f(s.latent_l1), f(s.pixel_l1)]
}

/// Saves the decoder pair and reloads it so later metrics use the stored weights.
fn store_decoder(run: &Run, gen: &Generator<f64>, inv: &InversionEncoder<f64>) -> Result<(Generator<f64>, InversionEncoder<f64>)> {
    let mut c = Checkpoint::new();
    c.insert_store(gen.params());
    c.insert_store(inv.params());
    let path = run.path(DECODER_FILE);
    c.save(&path)?;
    log::info!("saved {} (payload sha256 {})", path.display(), c.payload_hash());
    Ok(Checkpoint::load(&path)?.load_decoder(&run.cfg.decoder()?)?)
}

fn store_model(run: &Run, model: &LsiModel<f64>) -> Result<LsiModel<f64>> {
    let mut c = Checkpoint::new();
    c.insert_lsi(model);
    let path = run.path(MODEL_FILE);
    c.save(&path)?;
    log::info!("saved {} (payload sha256 {})", path.display(), c.payload_hash());
    run.load_model(&path)
}

pub fn make_dataset(run: Run) -> Result<()> {
    run.record_config()?;
    let spec = run.cfg.image_spec();
    if spec.height != spec.width || spec.channels != 1 {
        bail!(LsiError::Config("synthetic faces are square and grayscale".into()));
    }
    let dir = PathBuf::from(run.cfg.str("data.dir"));
    let s = write_synthetic(&dir, run.cfg.usize("data.synthetic_count"), spec.height, run.cfg.seed())?;
    let mut w = csv_writer(&run.path("dataset.csv"), &["count", "positives", "labels"])?;
    w.write_record([s.count.to_string(), s.positives.to_string(), s.labels.display().to_string()])?;
    w.flush()?;
    log::info!("wrote {} images ({} with glasses) to {}", s.count, s.positives, dir.display());
    Ok(())
}

pub fn pretrain(run: Run) -> Result<()> {
    run.record_config()?;
    let ds = run.dataset()?;
    let cfg = run.cfg.pretrain()?;
    let (gen, inv, report) = pretrain_autoencoder::<f64>(&ds, &cfg, run.cfg.seed())?;
    let mut w = csv_writer(&run.path("pretrain_log.csv"), &["epoch", "loss", "val_psnr"])?;
    for e in &report.epochs {
        w.write_record([e.epoch.to_string(), f(e.loss), format_psnr(e.val_psnr)])?;
    }
    w.flush()?;
    let (gen, inv) = store_decoder(&run, &gen, &inv)?;
    let mut w = csv_writer(&run.path("metrics.csv"), &["split", "autoencoder_psnr"])?;
    for split in [Split::Val, Split::Test] {
        let p = autoencoder_psnr(&gen, &inv, &ds, split)?;
        log::info!("autoencoder {split} PSNR {p:.3} dB");
        if split == Split::Test && p < 22.0 {
            log::warn!("autoencoder test PSNR {p:.2} dB is below the 22 dB gate");
        }
        w.write_record([split.to_string(), format_psnr(p)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(mut run: Run) -> Result<()> {
    let (gen, inv) = run.decoder()?;
    run.record_config()?;
    let ds = run.dataset()?;
    let cfg = run.cfg.lsi()?;
    let spec = run.cfg.image_spec();
    let seed = run.cfg.seed();
    let model = LsiModel::new(&cfg.encoder, spec.height, spec.width, seed)?;
    let (model, report) = train_lsi(&ds, model, &gen, &inv, &cfg, seed)?;
    report.write_csv(&run.path("train_log.csv"))?;
    let model = store_model(&run, &model)?;
    write_eval(&run, &model, &gen, &inv, &ds)
}

fn write_eval(run: &Run, model: &LsiModel<f64>, gen: &Generator<f64>, inv: &InversionEncoder<f64>, ds: &Dataset) -> Result<()> {
    let targets = LatentTargets::compute(inv, ds)?;
    let mut w = csv_writer(&run.path("metrics.csv"), &["split", "n", "psnr", "latent_l1", "pixel_l1"])?;
    for split in [Split::Val, Split::Test] {
        let s = evaluate(model, gen, &targets, ds, split)?;
        log::info!("{split}: PSNR {:.3} dB, latent L1 {:.5}", s.psnr, s.latent_l1);
        w.write_record(stats_row(split.as_str(), ds.indices(split).len(), &s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate_cmd(mut run: Run) -> Result<()> {
    let (model, gen, inv) = run.model_and_decoder()?;
    run.record_config()?;
    let ds = run.dataset()?;
    write_eval(&run, &model, &gen, &inv, &ds)?;
    let idx = ds.indices(Split::Test);
    let z = model.encode(&model.measure(&summed_batch(&ds, &idx))?)?;
    let y = gen.generate(&z)?;
    let zt = inv.invert(&ds.batch::<f64>(&idx))?;
    let (zw, per) = (z.numel() / idx.len().max(1), ds.spec.numel());
    let mut w = csv_writer(&run.path("eval_test.csv"), &["id", "psnr", "latent_l1", "pixel_l1"])?;
    for (b, &i) in idx.iter().enumerate() {
        let m = metrics(
            &y.data()[b * per..(b + 1) * per],
            ds.items[i].image.data(),
            &z.data()[b * zw..(b + 1) * zw],
            &zt.data()[b * zw..(b + 1) * zw],
        )?;
        w.write_record(metric_row(&ds.items[i].id, &m))?;
    }
    w.flush()?;
    Ok(())
}

fn metric_row(id: &str, m: &Metrics) -> Vec<String> {
    vec![id.to_string(), format_psnr(m.psnr_db), f(m.latent_l1), f(m.pixel_l1)]
}

pub fn reconstruct(mut run: Run) -> Result<()> {
    let image = run.cfg.str("data.image").to_string();
    if image.is_empty() {
        bail!(LsiError::Config("reconstruct needs --set data.image=<path>".into()));
    }
    let (model, gen, inv) = run.model_and_decoder()?;
    run.record_config()?;
    let spec = run.cfg.image_spec();
    let path = PathBuf::from(&image);
    let img = load_image(&path, spec)?;
    let summed = sum_channels(&img);
    let summed = Tensor::new(vec![1, spec.pixels()], summed.data().to_vec())?;
    let z = model.encode(&model.measure(&summed)?)?;
    let y = gen.generate(&z)?;
    let batch = Tensor::new(vec![1, spec.channels, spec.height, spec.width], img.data().to_vec())?;
    let zt = inv.invert(&batch)?;
    let m = metrics(y.data(), img.data(), z.data(), zt.data())?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    save_image(&run.path(&format!("{stem}_recon.png")), y.data(), spec)?;
    let mut w = csv_writer(&run.path("reconstruct.csv"), &["image", "psnr", "latent_l1", "pixel_l1"])?;
    w.write_record(metric_row(&image, &m))?;
    w.flush()?;
    log::info!("{image}: PSNR {} dB, latent L1 {:.5}", format_psnr(m.psnr_db), m.latent_l1);
    Ok(())
}

/// Sensor noise is used when any non-ideal parameter is set.
fn sensed(sensor: &SensorModel) -> bool {
    sensor.gain != 1.0
        || sensor.bias != 0.0
        || sensor.read_sigma > 0.0
        || sensor.shot_scale > 0.0
        || sensor.saturation.is_some()
        || sensor.adc_bits != 16
}

pub fn fsi(run: Run) -> Result<()> {
    run.record_config()?;
    let ds = run.dataset()?;
    let spec = run.cfg.image_spec();
    let budget = run.cfg.fsi_budget();
    let set = select_frequencies(budget, spec.height, spec.width)?
        .with_amplitude(run.cfg.f64("fsi.a"), run.cfg.f64("fsi.b"))?;
    let sensor = run.cfg.sensor()?;
    let noisy = sensed(&sensor);
    let scale = if noisy {
        let white = fsi_readings(&vec![1.0; spec.pixels()], &set)?;
        calibrate_white_repeated(&sensor, &white, run.cfg.usize("calibrate.repeats"))?
    } else {
        1.0
    };
    let mut w = csv_writer(&run.path("fsi_metrics.csv"), &["id", "budget", "frequencies", "psnr", "pixel_l1"])?;
    let (mut sum_psnr, mut sum_l1, mut n) = (0.0, 0.0, 0usize);
    for (k, &i) in ds.indices(Split::Test).iter().enumerate() {
        let item = &ds.items[i];
        let mut rec = Vec::with_capacity(spec.numel());
        for c in 0..spec.channels {
            let plane = &item.image.data()[c * spec.pixels()..(c + 1) * spec.pixels()];
            let coeffs =
                if noisy { fsi_acquire_sensed(plane, &set, &sensor, i as u64, scale)? } else { fsi_acquire(plane, &set)? };
            rec.extend(fsi_reconstruct(&coeffs, &set)?);
        }
        let (p, l1) = (psnr(&rec, item.image.data()), mean_abs(&rec, item.image.data()));
        if k < 4 {
            save_image(&run.path(&format!("fsi_{}.png", item.id)), &rec, spec)?;
        }
        w.write_record([
            item.id.clone(),
            set.readings().to_string(),
            set.len().to_string(),
            format_psnr(p),
            f(l1),
        ])?;
        sum_psnr += p;
        sum_l1 += l1;
        n += 1;
    }
    let n = n.max(1) as f64;
    w.write_record(["mean".into(), set.readings().to_string(), set.len().to_string(), format_psnr(sum_psnr / n), f(sum_l1 / n)])?;
    w.flush()?;
    log::info!("FSI with {} readings: mean test PSNR {:.3} dB", set.readings(), sum_psnr / n);
    Ok(())
}

pub fn calibrate(mut run: Run) -> Result<()> {
    let model_path = run.resolve("paths.model", MODEL_FILE, "train")?;
    run.record_config()?;
    let model = run.load_model(&model_path)?;
    let sensor = run.cfg.sensor()?;
    let repeats = run.cfg.usize("calibrate.repeats");
    let expected = white_expected(&model, run.cfg.image_spec().channels);
    let scale = calibrate_white_repeated(&sensor, &expected, repeats)?;
    let mut w = csv_writer(&run.path(CALIBRATION_FILE), &["scale", "repeats", "relative_error"])?;
    w.write_record([format!("{scale:e}"), repeats.to_string(), f((scale * sensor.gain - 1.0).abs())])?;
    w.flush()?;
    log::info!("white calibration scale {scale:.6} (gain {:.4})", sensor.gain);
    Ok(())
}

fn read_scale(path: &Path) -> Result<f64> {
    let mut r = csv::Reader::from_path(path)?;
    let rec = r.records().next().context("empty calibration file")??;
    rec.get(0).and_then(|v| v.parse().ok()).context("calibration scale is not a number")
}

pub fn finetune_cmd(mut run: Run) -> Result<()> {
    let (model, gen, inv) = run.model_and_decoder()?;
    let cal = run.resolve("paths.calibration", CALIBRATION_FILE, "calibrate")?;
    run.record_config()?;
    let scale = read_scale(&cal)?;
    let ds = run.dataset()?;
    let sensor = run.cfg.sensor()?;
    let cfg = run.cfg.finetune();
    let seed = run.cfg.seed();
    let pairs = finetune_subset(&ds.indices(Split::Train), cfg.pairs, seed);
    let held: Vec<usize> = ds.indices(Split::Val).into_iter().chain(ds.indices(Split::Test)).collect();
    let c_train = sense_items(&model, &ds, &pairs, &sensor, scale)?;
    let c_held = sense_items(&model, &ds, &held, &sensor, scale)?;
    write_sensed(&run.path("sensed.csv"), &ds, &[(&pairs, &c_train, "pairs"), (&held, &c_held, "held_out")])?;
    let targets = LatentTargets::compute(&inv, &ds)?;
    let (tuned, report) = finetune(&model, &gen, &targets, &ds, (&pairs, &c_train), (&held, &c_held), &cfg, seed)?;
    store_model(&run, &tuned)?;
    let mut w = csv_writer(&run.path("finetune_log.csv"), &["epoch", "loss"])?;
    for (e, l) in report.losses.iter().enumerate() {
        w.write_record([(e + 1).to_string(), f(*l)])?;
    }
    w.flush()?;
    let mut w = csv_writer(&run.path("finetune_metrics.csv"), &["stage", "n", "psnr", "latent_l1", "pixel_l1"])?;
    w.write_record(stats_row("before", held.len(), &report.pre))?;
    w.write_record(stats_row("after", held.len(), &report.post))?;
    w.flush()?;
    Ok(())
}

/// One row per sensed image: its path, role and calibrated measurements.
fn write_sensed(path: &Path, ds: &Dataset, sets: &[(&[usize], &Tensor, &str)]) -> Result<()> {
    let d = sets.first().map_or(0, |s| s.1.shape()[1]);
    let mut header = vec!["image".to_string(), "set".to_string()];
    header.extend((0..d).map(|j| format!("c{j}")));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (idx, c, set) in sets {
        for (&i, row) in idx.iter().zip(c.data().chunks(d)) {
            let mut rec = vec![ds.items[i].path.display().to_string(), set.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_latents(mut run: Run) -> Result<()> {
    let (model, _gen, _inv) = run.model_and_decoder()?;
    run.record_config()?;
    let ds = run.dataset()?;
    let idx = ds.indices(Split::Test);
    let z = model.encode(&model.measure(&summed_batch(&ds, &idx))?)?;
    let width = z.numel() / idx.len().max(1);
    let rows: Vec<Vec<f64>> = z.data().chunks(width.max(1)).map(<[f64]>::to_vec).collect();
    let ids: Vec<String> = idx.iter().map(|&i| ds.items[i].id.clone()).collect();
    let path = run.path("latents.csv");
    write_latents_csv(&path, &ids, &rows)?;
    let labels = run.cfg.str("data.labels");
    if !labels.is_empty() {
        let all = read_labels(Path::new(labels), &ds)?;
        let (_, latents) = read_latents_csv(&path)?;
        let labels: Vec<u32> = idx.iter().map(|&i| all[i]).collect();
        let pixels: Vec<Vec<f64>> = idx.iter().map(|&i| ds.items[i].image.data().to_vec()).collect();
        let r = retrieval_proxy(&latents, &pixels, &labels)?;
        let mut w = csv_writer(&run.path("retrieval.csv"), &["space", "n", "accuracy"])?;
        w.write_record(["latent".into(), idx.len().to_string(), f(r.latent_accuracy)])?;
        w.write_record(["pixel".into(), idx.len().to_string(), f(r.pixel_accuracy)])?;
        w.flush()?;
        log::info!("1-NN accuracy: latent {:.3}, pixel {:.3}", r.latent_accuracy, r.pixel_accuracy);
    }
    Ok(())
}

pub fn export_masks(mut run: Run) -> Result<()> {
    let model_path = run.resolve("paths.model", MODEL_FILE, "train")?;
    run.record_config()?;
    let model = run.load_model(&model_path)?;
    let (h, w, d) = (model.optical.height(), model.optical.width(), model.measurements());
    let masks = model.optical.binarized();
    let dir = run.path("masks");
    fs::create_dir_all(&dir)?;
    let mut out = csv_writer(&run.path("masks.csv"), &["mask", "ones", "occupancy"])?;
    for (i, row) in masks.chunks(h * w).enumerate() {
        save_mask(&dir.join(format!("mask_{i:03}.png")), row, h, w)?;
        let ones = row.iter().filter(|&&v| v >= 0.5).count();
        out.write_record([i.to_string(), ones.to_string(), f(ones as f64 / (h * w) as f64)])?;
    }
    out.flush()?;
    let mut c = Checkpoint::new();
    c.insert("phi.masks", &Tensor::new(vec![d, h * w], masks)?);
    c.save(&run.path("masks.lsi"))?;
    Ok(())
}
