mod common;

use lsi_core::acquisition::{
    calibrate_white, finetune, finetune_subset, sense_items, white_expected, FinetuneConfig, SensorModel,
};
use lsi_core::dataset::Split;
use lsi_core::generative::{Generator, InversionEncoder};
use lsi_core::train::{evaluate, train_lsi, LatentTargets, LsiModel};
use lsi_core::LsiError;

struct Fixture {
    ds: lsi_core::dataset::Dataset,
    gen: Generator<f64>,
    targets: LatentTargets<f64>,
    model: LsiModel<f64>,
}

fn fixture() -> Fixture {
    let ds = common::faces(80, 11);
    let gen = Generator::new(common::decoder(), 1).unwrap();
    let inv = InversionEncoder::new(common::decoder(), 2).unwrap();
    let cfg = common::lsi(6);
    let model = LsiModel::new(&cfg.encoder, 16, 16, 4).unwrap();
    let (model, _) = train_lsi(&ds, model, &gen, &inv, &cfg, 4).unwrap();
    let targets = LatentTargets::compute(&inv, &ds).unwrap();
    Fixture { ds, gen, targets, model }
}

fn small_cfg() -> FinetuneConfig {
    FinetuneConfig { epochs: 3, batch_size: 8, pairs: 40, ..FinetuneConfig::default() }
}

#[test]
fn too_few_pairs_is_a_config_error() {
    let f = fixture();
    let sensor = SensorModel::ideal(400.0);
    let pairs: Vec<usize> = f.ds.indices(Split::Train).into_iter().take(9).collect();
    let held = f.ds.indices(Split::Val);
    let c = sense_items(&f.model, &f.ds, &pairs, &sensor, 1.0).unwrap();
    let ch = sense_items(&f.model, &f.ds, &held, &sensor, 1.0).unwrap();
    let r = finetune(&f.model, &f.gen, &f.targets, &f.ds, (&pairs, &c), (&held, &ch), &small_cfg(), 0);
    assert!(matches!(r, Err(LsiError::Config(_))));
}

#[test]
fn noise_free_sensing_leaves_little_to_correct() {
    let f = fixture();
    let mut sensor = SensorModel::ideal(400.0);
    sensor.gain = 2.0;
    sensor.adc_range = (0.0, 800.0);
    let expected = white_expected(&f.model, 1);
    let scale = calibrate_white(&sensor.sense(&expected, 0).unwrap(), &expected).unwrap();
    assert!((scale - 0.5).abs() < 1e-3);

    let pairs = finetune_subset(&f.ds.indices(Split::Train), 40, 1);
    let held: Vec<usize> = f.ds.indices(Split::Val).into_iter().chain(f.ds.indices(Split::Test)).collect();
    let c = sense_items(&f.model, &f.ds, &pairs, &sensor, scale).unwrap();
    let ch = sense_items(&f.model, &f.ds, &held, &sensor, scale).unwrap();
    let cfg = small_cfg();
    let (tuned, report) = finetune(&f.model, &f.gen, &f.targets, &f.ds, (&pairs, &c), (&held, &ch), &cfg, 2).unwrap();
    assert!(report.psnr_gain().abs() < 0.1, "{report:?}");
    assert_eq!(report.losses.len(), cfg.epochs);
    assert_eq!(tuned.optical.logits().data(), f.model.optical.logits().data());

    let ideal = evaluate(&f.model, &f.gen, &f.targets, &f.ds, Split::Val).unwrap();
    let n_val = f.ds.indices(Split::Val).len();
    assert!(n_val > 0 && ideal.psnr.is_finite());

    let (again, report2) = finetune(&f.model, &f.gen, &f.targets, &f.ds, (&pairs, &c), (&held, &ch), &cfg, 2).unwrap();
    assert_eq!(report, report2);
    assert_eq!(again.encoder.params().checksum(), tuned.encoder.params().checksum());
}

#[test]
fn subset_is_seeded_and_bounded() {
    let pool: Vec<usize> = (0..500).collect();
    let a = finetune_subset(&pool, 200, 3);
    assert_eq!(a.len(), 200);
    assert_eq!(a, finetune_subset(&pool, 200, 3));
    assert_ne!(a, finetune_subset(&pool, 200, 4));
    assert!(a.windows(2).all(|w| w[0] < w[1]));
}
