#![allow(dead_code)]

use std::path::PathBuf;

use lsi_core::autodiff::Tensor;
use lsi_core::dataset::{render_face, Dataset, FaceParams, ImageSpec, Item, Split};
use lsi_core::digital::EncoderConfig;
use lsi_core::generative::DecoderConfig;
use lsi_core::train::LsiConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// In-memory face set at 16x16: every tenth item is validation, the next test.
pub fn faces(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|i| {
            let p = FaceParams::sample(&mut rng);
            let split = match i % 10 {
                0 => Split::Val,
                1 => Split::Test,
                _ => Split::Train,
            };
            Item {
                id: format!("f{i}"),
                path: PathBuf::new(),
                image: Tensor::new(vec![1, 16, 16], render_face(&p, 16)).unwrap(),
                split,
            }
        })
        .collect();
    Dataset { spec: ImageSpec::gray(16, 16), items, manifest: PathBuf::new() }
}

pub fn decoder() -> DecoderConfig {
    DecoderConfig { levels: 3, latent_width: 8, channels: 1, widths: vec![8, 8, 4] }
}

pub fn encoder(d: usize) -> EncoderConfig {
    EncoderConfig {
        d,
        levels: 3,
        latent_width: 8,
        split: (1, 1, 1),
        hidden: 16,
        expansion: 4,
        depths: (1, 1, 1),
        input_scale: 1.0,
    }
}

pub fn lsi(d: usize) -> LsiConfig {
    LsiConfig {
        encoder: encoder(d),
        batch_size: 16,
        phase1_epochs: 2,
        patience: 0,
        phase2_epochs: 1,
        ..LsiConfig::desk(d)
    }
}
