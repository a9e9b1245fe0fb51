//! Flat `section.key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::acquisition::{FinetuneConfig, SensorModel};
use crate::dataset::ImageSpec;
use crate::digital::EncoderConfig;
use crate::error::{LsiError, Result};
use crate::generative::{DecoderConfig, PretrainConfig};
use crate::train::losses::LossWeights;
use crate::train::LsiConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Str,
    Ints,
}

const KEYS: &[(&str, Kind, &str)] = &[
    ("run.seed", Kind::Int, "0"),
    ("data.dir", Kind::Str, "data"),
    ("data.height", Kind::Int, "32"),
    ("data.width", Kind::Int, "32"),
    ("data.channels", Kind::Int, "1"),
    ("data.split_seed", Kind::Int, "0"),
    ("data.image", Kind::Str, ""),
    ("data.labels", Kind::Str, ""),
    ("data.synthetic_count", Kind::Int, "1200"),
    ("decoder.levels", Kind::Int, "4"),
    ("decoder.latent_width", Kind::Int, "64"),
    ("decoder.widths", Kind::Ints, "32,32,16,8"),
    ("pretrain.epochs", Kind::Int, "60"),
    ("pretrain.batch_size", Kind::Int, "32"),
    ("pretrain.lr", Kind::Float, "0.001"),
    ("pretrain.surrogate_weight", Kind::Float, "1"),
    ("encoder.d", Kind::Int, "16"),
    ("encoder.split", Kind::Ints, "1,1,2"),
    ("encoder.hidden", Kind::Int, "256"),
    ("encoder.expansion", Kind::Int, "4"),
    ("encoder.depths", Kind::Ints, "2,3,4"),
    ("encoder.input_scale", Kind::Float, "1"),
    ("train.batch_size", Kind::Int, "32"),
    ("train.lr_mask", Kind::Float, "0.0001"),
    ("train.lr_encoder", Kind::Float, "0.0001"),
    ("train.phase1_epochs", Kind::Int, "200"),
    ("train.patience", Kind::Int, "5"),
    ("train.min_improvement", Kind::Float, "0.01"),
    ("train.phase2_epochs", Kind::Int, "10"),
    ("train.energy_normalized", Kind::Bool, "false"),
    ("loss.latent", Kind::Float, "1"),
    ("loss.id", Kind::Float, "0.5"),
    ("loss.perceptual", Kind::Float, "0.8"),
    ("loss.l2", Kind::Float, "1"),
    ("loss.energy", Kind::Float, "3"),
    ("fsi.budget", Kind::Int, "0"),
    ("fsi.a", Kind::Float, "0.5"),
    ("fsi.b", Kind::Float, "0.5"),
    ("sensor.gain", Kind::Float, "1"),
    ("sensor.bias", Kind::Float, "0"),
    ("sensor.read_noise", Kind::Float, "0"),
    ("sensor.shot_scale", Kind::Float, "0"),
    ("sensor.adc_bits", Kind::Int, "16"),
    ("sensor.full_scale", Kind::Float, "1.5"),
    ("sensor.saturation", Kind::Float, "0"),
    ("sensor.seed", Kind::Int, "0"),
    ("calibrate.repeats", Kind::Int, "16"),
    ("finetune.lr", Kind::Float, "0.00001"),
    ("finetune.epochs", Kind::Int, "400"),
    ("finetune.batch_size", Kind::Int, "8"),
    ("finetune.pairs", Kind::Int, "200"),
    ("paths.runs", Kind::Str, "runs"),
    ("paths.decoder", Kind::Str, ""),
    ("paths.model", Kind::Str, ""),
    ("paths.calibration", Kind::Str, ""),
];

/// Every known key with its value; defaults fill what a file leaves out.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: KEYS.iter().map(|(k, _, v)| (k.to_string(), v.to_string())).collect() }
    }
}

fn kind(key: &str) -> Result<Kind> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|(_, kind, _)| *kind)
        .ok_or_else(|| LsiError::config(format!("unknown config key {key:?}")))
}

fn check(key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| LsiError::config(format!("{key} = {value:?} is not {what}"));
    match kind(key)? {
        Kind::Int => value.parse::<u64>().map(|_| ()).map_err(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|_| bad("true or false")),
        Kind::Str => Ok(()),
        Kind::Ints => parse_ints(value).map(|_| ()).ok_or_else(|| bad("a comma-separated integer list")),
    }
}

fn parse_ints(value: &str) -> Option<Vec<usize>> {
    value.split(',').map(|s| s.trim().parse().ok()).collect()
}

impl RunConfig {
    /// Parses `section.key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LsiError::config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LsiError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check(key, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) =
            spec.split_once('=').ok_or_else(|| LsiError::config(format!("override {spec:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Fully resolved config, one sorted line per key; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("unknown config key {key}"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.str(key).parse().unwrap_or_else(|_| panic!("{key} is not an integer"))
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.str(key).parse().unwrap_or_else(|_| panic!("{key} is not an integer"))
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.str(key).parse().unwrap_or_else(|_| panic!("{key} is not a number"))
    }

    pub fn bool(&self, key: &str) -> bool {
        self.str(key).parse().unwrap_or_else(|_| panic!("{key} is not a bool"))
    }

    pub fn ints(&self, key: &str) -> Vec<usize> {
        parse_ints(self.str(key)).unwrap_or_else(|| panic!("{key} is not an integer list"))
    }

    pub fn seed(&self) -> u64 {
        self.u64("run.seed")
    }

    pub fn image_spec(&self) -> ImageSpec {
        ImageSpec { height: self.usize("data.height"), width: self.usize("data.width"), channels: self.usize("data.channels") }
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        let cfg = DecoderConfig {
            levels: self.usize("decoder.levels"),
            latent_width: self.usize("decoder.latent_width"),
            channels: self.usize("data.channels"),
            widths: self.ints("decoder.widths"),
        };
        cfg.validate()?;
        let spec = self.image_spec();
        if (spec.height, spec.width) != (cfg.size(), cfg.size()) {
            return Err(LsiError::config(format!(
                "decoder with {} levels produces {s}x{s} images but data is {}x{}",
                cfg.levels,
                spec.height,
                spec.width,
                s = cfg.size()
            )));
        }
        Ok(cfg)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            decoder: self.decoder()?,
            epochs: self.usize("pretrain.epochs"),
            batch_size: self.usize("pretrain.batch_size"),
            lr: self.f64("pretrain.lr"),
            surrogate_weight: self.f64("pretrain.surrogate_weight"),
        })
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let split = self.ints("encoder.split");
        let depths = self.ints("encoder.depths");
        if split.len() != 3 || depths.len() != 3 {
            return Err(LsiError::config("encoder.split and encoder.depths need three entries"));
        }
        let dec = self.decoder()?;
        let cfg = EncoderConfig {
            d: self.usize("encoder.d"),
            levels: dec.levels,
            latent_width: dec.latent_width,
            split: (split[0], split[1], split[2]),
            hidden: self.usize("encoder.hidden"),
            expansion: self.usize("encoder.expansion"),
            depths: (depths[0], depths[1], depths[2]),
            input_scale: self.f64("encoder.input_scale"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            latent: self.f64("loss.latent"),
            id: self.f64("loss.id"),
            perceptual: self.f64("loss.perceptual"),
            l2: self.f64("loss.l2"),
            energy: self.f64("loss.energy"),
        }
    }

    pub fn lsi(&self) -> Result<LsiConfig> {
        Ok(LsiConfig {
            encoder: self.encoder()?,
            batch_size: self.usize("train.batch_size"),
            lr_mask: self.f64("train.lr_mask"),
            lr_encoder: self.f64("train.lr_encoder"),
            weights: self.weights(),
            phase1_epochs: self.usize("train.phase1_epochs"),
            patience: self.usize("train.patience"),
            min_improvement: self.f64("train.min_improvement"),
            phase2_epochs: self.usize("train.phase2_epochs"),
            energy_normalized: self.bool("train.energy_normalized"),
        })
    }

    /// FSI reading budget; 0 means the LSI measurement count.
    pub fn fsi_budget(&self) -> usize {
        match self.usize("fsi.budget") {
            0 => self.usize("encoder.d"),
            b => b,
        }
    }

    /// Detector model; `sensor.full_scale` and `sensor.read_noise` are
    /// relative to the brightest possible reading `m·n·C`.
    pub fn sensor(&self) -> Result<SensorModel> {
        let spec = self.image_spec();
        let full = self.f64("sensor.full_scale") * spec.numel() as f64;
        let sat = self.f64("sensor.saturation");
        let s = SensorModel {
            gain: self.f64("sensor.gain"),
            bias: self.f64("sensor.bias"),
            read_sigma: self.f64("sensor.read_noise") * full,
            shot_scale: self.f64("sensor.shot_scale"),
            adc_bits: self.usize("sensor.adc_bits") as u32,
            adc_range: (0.0, full),
            saturation: (sat > 0.0).then(|| sat * full),
            seed: self.u64("sensor.seed"),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.f64("finetune.lr"),
            epochs: self.usize("finetune.epochs"),
            batch_size: self.usize("finetune.batch_size"),
            pairs: self.usize("finetune.pairs"),
            weights: self.weights(),
        }
    }
}
