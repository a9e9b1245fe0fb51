use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lsi_core::checkpoint::Checkpoint;
use lsi_core::config::RunConfig;
use lsi_core::dataset::{load_dataset, Dataset};
use lsi_core::generative::{Generator, InversionEncoder};
use lsi_core::train::LsiModel;
use lsi_core::LsiError;

pub const CONFIG_FILE: &str = "config.txt";
pub const DECODER_FILE: &str = "decoder.lsi";
pub const MODEL_FILE: &str = "model.lsi";
pub const CALIBRATION_FILE: &str = "calibration.csv";

/// One subcommand invocation: its resolved config and output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Creates `out`, or `<paths.runs>/<timestamp>-<command>-seed<seed>`.
    pub fn create(cfg: RunConfig, command: &str, out: Option<&Path>) -> Result<Self> {
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = PathBuf::from(cfg.str("paths.runs"));
                let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
                let base = format!("{stamp}-{command}-seed{}", cfg.seed());
                let mut dir = root.join(&base);
                let mut k = 2;
                while dir.exists() {
                    dir = root.join(format!("{base}-{k}"));
                    k += 1;
                }
                dir
            }
        };
        fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        Ok(Run { cfg, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes and logs the fully resolved config.
    pub fn record_config(&self) -> Result<()> {
        let text = self.cfg.to_text();
        for line in text.lines() {
            log::info!("config: {line}");
        }
        fs::write(self.path(CONFIG_FILE), text)?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let dir = PathBuf::from(self.cfg.str("data.dir"));
        if !dir.is_dir() {
            return Err(LsiError::MissingDependency { path: dir, producer: "make-dataset" }.into());
        }
        Ok(load_dataset(&dir, self.cfg.image_spec(), self.cfg.u64("data.split_seed"), &self.path("manifest.tsv"))?)
    }

    /// Resolves `key` to a file: an explicit value, or the newest run under
    /// `paths.runs` holding `file`. The result is pinned in the config.
    pub fn resolve(&mut self, key: &str, file: &str, producer: &'static str) -> Result<PathBuf> {
        let explicit = self.cfg.str(key).to_string();
        let path = if explicit.is_empty() {
            latest(Path::new(self.cfg.str("paths.runs")), file, &self.dir)
                .ok_or(LsiError::MissingDependency { path: PathBuf::from(file), producer })?
        } else {
            PathBuf::from(explicit)
        };
        if !path.is_file() {
            return Err(LsiError::MissingDependency { path, producer }.into());
        }
        self.cfg.set(key, &path.to_string_lossy())?;
        Ok(path)
    }

    /// Trained model plus the decoder it was trained against; an unset
    /// `paths.decoder` follows the model run's own config.
    pub fn model_and_decoder(&mut self) -> Result<(LsiModel<f64>, Generator<f64>, InversionEncoder<f64>)> {
        let model_path = self.resolve("paths.model", MODEL_FILE, "train")?;
        if self.cfg.str("paths.decoder").is_empty() {
            if let Some(parent_cfg) = model_path.parent().map(|p| p.join(CONFIG_FILE)).filter(|p| p.is_file()) {
                let parent = RunConfig::load(&parent_cfg)?;
                self.cfg.set("paths.decoder", parent.str("paths.decoder"))?;
            }
        }
        let (gen, inv) = self.decoder()?;
        let model = self.load_model(&model_path)?;
        Ok((model, gen, inv))
    }

    pub fn decoder(&mut self) -> Result<(Generator<f64>, InversionEncoder<f64>)> {
        let path = self.resolve("paths.decoder", DECODER_FILE, "pretrain")?;
        let ckpt = Checkpoint::load(&path)?;
        log::info!("loaded {} (payload sha256 {})", path.display(), ckpt.payload_hash());
        ckpt.load_decoder(&self.cfg.decoder()?).with_context(|| format!("loading {}", path.display()))
    }

    pub fn load_model(&self, path: &Path) -> Result<LsiModel<f64>> {
        let spec = self.cfg.image_spec();
        let ckpt = Checkpoint::load(path)?;
        log::info!("loaded {} (payload sha256 {})", path.display(), ckpt.payload_hash());
        ckpt.load_lsi(&self.cfg.encoder()?, spec.height, spec.width)
            .with_context(|| format!("loading {} (does encoder.d match the trained model?)", path.display()))
    }
}

fn latest(root: &Path, file: &str, exclude: &Path) -> Option<PathBuf> {
    fs::read_dir(root)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path().join(file)))
        .filter(|p| p.parent() != Some(exclude) && p.is_file())
        .filter_map(|p| Some((fs::metadata(&p).ok()?.modified().ok()?, p)))
        .max()
        .map(|(_, p)| p)
}
