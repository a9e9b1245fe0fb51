//! Level-conditioned convolutional decoder and its matching image encoder.
//!
//! The pair is trained as an autoencoder and then frozen: the decoder plays
//! the generator that turns a latent stack into an image, the encoder
//! provides the regression targets for the measurement encoder.

mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{LsiError, Result};
use crate::nn::{uniform, Bound, Conv, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;

pub use pretrain::{autoencoder_psnr, pretrain_autoencoder, PretrainConfig, PretrainEpoch, PretrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub levels: usize,
    pub latent_width: usize,
    /// Image channels.
    pub channels: usize,
    /// Feature width per level, coarsest first.
    pub widths: Vec<usize>,
}

impl DecoderConfig {
    /// 4 levels at 4, 8, 16 and 32 pixels.
    pub fn desk(channels: usize) -> Self {
        DecoderConfig { levels: 4, latent_width: 64, channels, widths: vec![32, 32, 16, 8] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.widths.len() != self.levels {
            return Err(LsiError::config(format!("{} widths for {} levels", self.widths.len(), self.levels)));
        }
        if self.latent_width == 0 || self.channels == 0 || self.widths.contains(&0) {
            return Err(LsiError::config("decoder sizes must be positive"));
        }
        Ok(())
    }

    /// Side length of the generated image.
    pub fn size(&self) -> usize {
        4 << (self.levels - 1)
    }

    pub fn resolution(&self, level: usize) -> usize {
        4 << level
    }

    pub fn latent_len(&self) -> usize {
        self.levels * self.latent_width
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size() * self.size()
    }
}

fn check_latents<T: Scalar>(tape: &Tape<T>, z: Var, cfg: &DecoderConfig) -> Result<usize> {
    match *tape.shape(z) {
        [b, n] if n == cfg.latent_len() => Ok(b),
        ref s => Err(LsiError::dim(format!(
            "expected [B, {}] latents ({} levels × {}), got {s:?}",
            cfg.latent_len(),
            cfg.levels,
            cfg.latent_width
        ))),
    }
}

fn check_images<T: Scalar>(tape: &Tape<T>, x: Var, cfg: &DecoderConfig) -> Result<usize> {
    let s = cfg.size();
    match *tape.shape(x) {
        [b, c, h, w] if c == cfg.channels && h == s && w == s => Ok(b),
        ref sh => Err(LsiError::dim(format!("expected [B, {}, {s}, {s}] images, got {sh:?}", cfg.channels))),
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    cfg: DecoderConfig,
    params: ParamStore<T>,
    seed_map: ParamId,
    spatial: Linear,
    convs: Vec<Conv>,
    styles: Vec<Linear>,
    to_image: Vec<Conv>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c0 = cfg.widths[0];
        let seed_map = store.add("gen.seed", uniform(vec![c0, 4, 4], 1.0, &mut rng));
        let spatial = Linear::new(&mut store, "gen.spatial", cfg.latent_width, c0 * 16, &mut rng);
        let (mut convs, mut styles, mut to_image) = (Vec::new(), Vec::new(), Vec::new());
        for l in 0..cfg.levels {
            let cin = if l == 0 { c0 } else { cfg.widths[l - 1] };
            let cout = cfg.widths[l];
            convs.push(Conv::new(&mut store, &format!("gen.l{l}.conv"), cin, cout, 3, 1, &mut rng));
            let style = Linear::new(&mut store, &format!("gen.l{l}.style"), cfg.latent_width, 2 * cout, &mut rng);
            for v in store.get_mut(style.w).data_mut() {
                *v *= T::lit(0.25);
            }
            styles.push(style);
            to_image.push(Conv::new(&mut store, &format!("gen.l{l}.to_image"), cout, cfg.channels, 1, 1, &mut rng));
        }
        Ok(Generator { cfg, params: store, seed_map, spatial, convs, styles, to_image })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Images `[B, C, s, s]` in `[0, 1]` from latent stacks `[B, l·c]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let batch = check_latents(tape, z, &self.cfg)?;
        let w = self.cfg.latent_width;
        let c0 = self.cfg.widths[0];
        let z0 = tape.slice_cols(z, 0, w)?;
        let sp = self.spatial.forward(tape, p, z0)?;
        let sp = tape.reshape(sp, vec![batch, c0, 4, 4])?;
        let mut x = tape.add_batch_broadcast(sp, p[self.seed_map])?;
        let mut rgb: Option<Var> = None;
        for l in 0..self.cfg.levels {
            if l > 0 {
                x = tape.upsample2x_nearest(x)?;
            }
            x = self.convs[l].forward(tape, p, x)?;
            let zl = tape.slice_cols(z, l * w, w)?;
            let style = self.styles[l].forward(tape, p, zl)?;
            let cout = self.cfg.widths[l];
            let scale = tape.slice_cols(style, 0, cout)?;
            let shift = tape.slice_cols(style, cout, cout)?;
            x = tape.film(x, scale, shift)?;
            x = tape.leaky_relu(x);
            let out = self.to_image[l].forward(tape, p, x)?;
            rgb = Some(match rgb {
                None => out,
                Some(prev) => {
                    let up = tape.upsample2x_nearest(prev)?;
                    tape.add(up, out)?
                }
            });
        }
        Ok(tape.sigmoid(rgb.expect("at least one level")))
    }

    /// Untracked forward pass for a batch of latent stacks.
    pub fn generate(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(z);
        let zv = match *z.shape() {
            [n] => tape.reshape(zv, vec![1, n])?,
            [l, c] if l == self.cfg.levels && c == self.cfg.latent_width => tape.reshape(zv, vec![1, l * c])?,
            _ => zv,
        };
        let y = self.forward(&mut tape, &p, zv)?;
        Ok(tape.to_tensor(y))
    }
}

/// Strided convolution pyramid with one linear head per latent level.
#[derive(Clone, Debug)]
pub struct InversionEncoder<T> {
    cfg: DecoderConfig,
    params: ParamStore<T>,
    stages: Vec<Conv>,
    heads: Vec<Linear>,
}

impl<T: Scalar> InversionEncoder<T> {
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lv = cfg.levels;
        // stage j runs at resolution size >> j and mirrors decoder level lv-1-j
        let mut stages = Vec::new();
        let mut cin = cfg.channels;
        for j in 0..lv {
            let cout = cfg.widths[lv - 1 - j];
            let stride = if j == 0 { 1 } else { 2 };
            stages.push(Conv::new(&mut store, &format!("inv.s{j}"), cin, cout, 3, stride, &mut rng));
            cin = cout;
        }
        let heads = (0..lv)
            .map(|l| {
                let r = Self::head_res(&cfg, l);
                let fan_in = cfg.widths[l] * r * r;
                Linear::new(&mut store, &format!("inv.head{l}"), fan_in, cfg.latent_width, &mut rng)
            })
            .collect();
        Ok(InversionEncoder { cfg, params: store, stages, heads })
    }

    fn head_res(cfg: &DecoderConfig, level: usize) -> usize {
        cfg.resolution(level).min(8)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Latent stacks `[B, l·c]` for images `[B, C, s, s]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let batch = check_images(tape, x, &self.cfg)?;
        let lv = self.cfg.levels;
        let mut feats = Vec::with_capacity(lv);
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(tape, p, h)?;
            h = tape.leaky_relu(h);
            feats.push(h);
        }
        let mut outs = Vec::with_capacity(lv);
        for l in 0..lv {
            let mut f = feats[lv - 1 - l];
            let target = Self::head_res(&self.cfg, l);
            while tape.shape(f)[2] > target {
                f = tape.avg_pool2x(f)?;
            }
            let f = tape.reshape(f, vec![batch, self.cfg.widths[l] * target * target])?;
            outs.push(self.heads[l].forward(tape, p, f)?);
        }
        tape.concat_cols(&outs)
    }

    /// Untracked inversion of a batch `[B, C, s, s]` (or one `[C, s, s]` image).
    pub fn invert(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(images);
        let xv = match *images.shape() {
            [c, h, w] => tape.reshape(xv, vec![1, c, h, w])?,
            _ => xv,
        };
        let z = self.forward(&mut tape, &p, xv)?;
        Ok(tape.to_tensor(z))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::grad_check_entries;

    fn tiny() -> DecoderConfig {
        DecoderConfig { levels: 3, latent_width: 5, channels: 1, widths: vec![4, 3, 2] }
    }

    fn random(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_bounds() {
        let cfg = DecoderConfig::desk(1);
        let g = Generator::<f64>::new(cfg.clone(), 0).unwrap();
        let inv = InversionEncoder::<f64>::new(cfg.clone(), 1).unwrap();
        let z = random(vec![3, 256], -3.0, 3.0, 2);
        let img = g.generate(&z).unwrap();
        assert_eq!(img.shape(), &[3, 1, 32, 32]);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = inv.invert(&img).unwrap();
        assert_eq!(back.shape(), &[3, 256]);
        assert!(back.is_finite());
        assert_eq!(inv.invert(&img).unwrap().data(), back.data());

        let one = g.generate(&random(vec![4, 64], -1.0, 1.0, 3)).unwrap();
        assert_eq!(one.shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn rgb_decoder() {
        let cfg = DecoderConfig::desk(3);
        let g = Generator::<f64>::new(cfg.clone(), 0).unwrap();
        let img = g.generate(&random(vec![1, 256], -1.0, 1.0, 2)).unwrap();
        assert_eq!(img.shape(), &[1, 3, 32, 32]);
        let z = InversionEncoder::<f64>::new(cfg, 1).unwrap().invert(&img.reshaped(vec![3, 32, 32]).unwrap()).unwrap();
        assert_eq!(z.shape(), &[1, 256]);
    }

    #[test]
    fn level_mismatch_is_dimension_error() {
        let g = Generator::<f64>::new(DecoderConfig::desk(1), 0).unwrap();
        let err = g.generate(&Tensor::zeros(vec![1, 3 * 64])).unwrap_err();
        assert!(matches!(err, LsiError::Dimension(_)));
        let inv = InversionEncoder::<f64>::new(DecoderConfig::desk(1), 0).unwrap();
        assert!(matches!(inv.invert(&Tensor::zeros(vec![1, 16, 16])), Err(LsiError::Dimension(_))));
    }

    #[test]
    fn generator_gradient_wrt_latents() {
        let g = Generator::<f64>::new(tiny(), 4).unwrap();
        let z = random(vec![2, 15], -1.0, 1.0, 5);
        let w = random(vec![2, 1, 16, 16], -1.0, 1.0, 6);
        let err = grad_check_entries(
            |tape, zv| {
                let p = g.params().bind_frozen(tape);
                let y = g.forward(tape, &p, zv)?;
                let wv = tape.constant(&w);
                let prod = tape.mul(y, wv)?;
                Ok(tape.sum(prod))
            },
            &z,
            1e-5,
            &[0, 3, 7, 11, 14, 17, 29],
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn encoder_gradient_wrt_image() {
        let inv = InversionEncoder::<f64>::new(tiny(), 7).unwrap();
        let x = random(vec![1, 1, 16, 16], 0.0, 1.0, 8);
        let w = random(vec![1, 15], -1.0, 1.0, 9);
        let err = grad_check_entries(
            |tape, xv| {
                let p = inv.params().bind_frozen(tape);
                let z = inv.forward(tape, &p, xv)?;
                let wv = tape.constant(&w);
                let prod = tape.mul(z, wv)?;
                Ok(tape.sum(prod))
            },
            &x,
            1e-5,
            &[0, 17, 100, 200, 255],
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn parameter_names_are_prefixed() {
        let g = Generator::<f64>::new(tiny(), 0).unwrap();
        let inv = InversionEncoder::<f64>::new(tiny(), 0).unwrap();
        assert!(g.params().iter().all(|(n, _)| n.starts_with("gen.")));
        assert!(inv.params().iter().all(|(n, _)| n.starts_with("inv.")));
    }
}
