use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::digital::Mix;
use crate::error::{LsiError, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Measurement count.
    pub d: usize,
    pub levels: usize,
    pub latent_width: usize,
    /// Levels produced by the coarse, middle and fine blocks.
    pub split: (usize, usize, usize),
    pub hidden: usize,
    pub expansion: usize,
    /// Linear layers per level in the coarse, middle and fine blocks.
    pub depths: (usize, usize, usize),
    /// Multiplier applied to raw measurements before the first layer.
    pub input_scale: f64,
}

impl EncoderConfig {
    /// Desk configuration: 4 levels of width 64 split (1, 1, 2).
    pub fn desk(d: usize) -> Self {
        EncoderConfig {
            d,
            levels: 4,
            latent_width: 64,
            split: (1, 1, 2),
            hidden: 256,
            expansion: 4,
            depths: (2, 3, 4),
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, m, f) = self.split;
        if c + m + f != self.levels {
            return Err(LsiError::config(format!("split {:?} does not sum to {} levels", self.split, self.levels)));
        }
        if c == 0 || m == 0 || f == 0 {
            return Err(LsiError::config("every block needs at least one level"));
        }
        if self.expansion < 2 || (self.expansion * self.latent_width) % 2 != 0 {
            return Err(LsiError::config(format!("mix expansion {} is invalid", self.expansion)));
        }
        let (a, b, e) = self.depths;
        if a == 0 || b == 0 || e == 0 || self.d == 0 || self.hidden == 0 || self.latent_width == 0 {
            return Err(LsiError::config("encoder sizes must be positive"));
        }
        Ok(())
    }

    pub fn latent_len(&self) -> usize {
        self.levels * self.latent_width
    }
}

fn mlp_count(fan_in: usize, hidden: usize, out: usize, depth: usize) -> usize {
    if depth == 1 {
        return fan_in * out + out;
    }
    (fan_in * hidden + hidden) + (depth - 2) * (hidden * hidden + hidden) + (hidden * out + out)
}

/// Exact number of trainable scalars of [`DigitalEncoder`] for `cfg`.
pub fn count_parameters(cfg: &EncoderConfig) -> usize {
    let (nc, nm, nf) = cfg.split;
    let (dc, dm, df) = cfg.depths;
    let (d, h, w, e) = (cfg.d, cfg.hidden, cfg.latent_width, cfg.expansion);
    nc * mlp_count(d, h, w, dc)
        + Mix::param_count(nc, w, e)
        + nm * mlp_count(d + nc * w, h, w, dm)
        + Mix::param_count(nm, w, e)
        + (d * nm * w + nm * w)
        + nf * mlp_count(nm * w, h, w, df)
        + Mix::param_count(cfg.levels, w, e)
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        hidden: usize,
        out: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let a = if i == 0 { fan_in } else { hidden };
                let b = if i + 1 == depth { out } else { hidden };
                Linear::new(store, &format!("{name}.l{i}"), a, b, rng)
            })
            .collect();
        Mlp { layers }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h);
            }
        }
        Ok(h)
    }
}

/// Intermediate results of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStages {
    /// Concatenated block outputs before the final mix, `[B, l·c]`.
    pub stack: Var,
    /// Final latent stack, `[B, l·c]`.
    pub latents: Var,
}

/// Non-linear map from measurements `[B, d]` to latent stacks `[B, l·c]`.
#[derive(Clone, Debug)]
pub struct DigitalEncoder<T> {
    cfg: EncoderConfig,
    params: ParamStore<T>,
    coarse: Vec<Mlp>,
    mix_coarse: Mix,
    middle: Vec<Mlp>,
    mix_middle: Mix,
    embed: Linear,
    fine: Vec<Mlp>,
    mix_final: Mix,
    /// Fixed per-measurement standardization applied after `input_scale`.
    input_norm: Option<InputNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    /// Statistics of scaled measurement rows; zero spread maps to unit std.
    pub fn fit(rows: &[Vec<f64>], input_scale: f64) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.len() < 2 || rows.iter().any(|r| r.len() != d) {
            return Err(LsiError::config("input statistics need at least two equal-length rows"));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v * input_scale / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v * input_scale - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(InputNorm { mean, std })
    }
}

impl<T: Scalar> DigitalEncoder<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (nc, nm, nf) = cfg.split;
        let (dc, dm, df) = cfg.depths;
        let (d, h, w, e) = (cfg.d, cfg.hidden, cfg.latent_width, cfg.expansion);
        let coarse = (0..nc).map(|i| Mlp::new(&mut store, &format!("enc.coarse.{i}"), d, h, w, dc, &mut rng)).collect();
        let mix_coarse = Mix::new(&mut store, "enc.mix_coarse", nc, w, e, &mut rng)?;
        let middle =
            (0..nm).map(|i| Mlp::new(&mut store, &format!("enc.middle.{i}"), d + nc * w, h, w, dm, &mut rng)).collect();
        let mix_middle = Mix::new(&mut store, "enc.mix_middle", nm, w, e, &mut rng)?;
        let embed = Linear::new(&mut store, "enc.embed", d, nm * w, &mut rng);
        let fine = (0..nf).map(|i| Mlp::new(&mut store, &format!("enc.fine.{i}"), nm * w, h, w, df, &mut rng)).collect();
        let mix_final = Mix::new(&mut store, "enc.mix_final", cfg.levels, w, e, &mut rng)?;
        Ok(DigitalEncoder {
            cfg,
            params: store,
            coarse,
            mix_coarse,
            middle,
            mix_middle,
            embed,
            fine,
            mix_final,
            input_norm: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<()> {
        if let Some(n) = &norm {
            if n.mean.len() != self.cfg.d || n.std.len() != self.cfg.d || n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(LsiError::config(format!("input normalization must hold {} positive spreads", self.cfg.d)));
            }
        }
        self.input_norm = norm;
        Ok(())
    }

    /// Latent stacks for measurements `c: [B, d]`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, c: Var) -> Result<Var> {
        Ok(self.encode_stages(tape, p, c, false)?.latents)
    }

    /// Full pass; with `ablate_mix` every MIX block is replaced by the identity.
    pub fn encode_stages(&self, tape: &mut Tape<T>, p: &Bound, c: Var, ablate_mix: bool) -> Result<EncoderStages> {
        match *tape.shape(c) {
            [_, d] if d == self.cfg.d => {}
            ref s => return Err(LsiError::dim(format!("encoder expects [B, {}] measurements, got {s:?}", self.cfg.d))),
        }
        let batch = tape.shape(c)[0];
        let mut c = tape.mul_scalar(c, T::lit(self.cfg.input_scale));
        if let Some(n) = &self.input_norm {
            let shift = tape.constant(&Tensor::from_vec(n.mean.iter().map(|&m| T::lit(-m)).collect()));
            c = tape.add_row(c, shift)?;
            let inv: Vec<T> = (0..batch).flat_map(|_| n.std.iter().map(|&s| T::lit(1.0 / s))).collect();
            let inv = tape.constant(&Tensor::new(vec![batch, self.cfg.d], inv)?);
            c = tape.mul(c, inv)?;
        }
        let mix = |tape: &mut Tape<T>, m: &Mix, x: Var| if ablate_mix { Ok(x) } else { m.forward(tape, p, x) };

        let coarse = run_block(tape, p, &self.coarse, c)?;
        check_finite(tape, coarse, "coarse block")?;
        let mixed_coarse = mix(tape, &self.mix_coarse, coarse)?;
        let mid_in = tape.concat_cols(&[c, mixed_coarse])?;
        let middle = run_block(tape, p, &self.middle, mid_in)?;
        check_finite(tape, middle, "middle block")?;
        let mixed_middle = mix(tape, &self.mix_middle, middle)?;
        let embedded = self.embed.forward(tape, p, c)?;
        let fine_in = tape.add(mixed_middle, embedded)?;
        let fine = run_block(tape, p, &self.fine, fine_in)?;
        check_finite(tape, fine, "fine block")?;
        let stack = tape.concat_cols(&[coarse, middle, fine])?;
        let latents = mix(tape, &self.mix_final, stack)?;
        check_finite(tape, latents, "final mix")?;
        Ok(EncoderStages { stack, latents })
    }
}

fn run_block<T: Scalar>(tape: &mut Tape<T>, p: &Bound, mlps: &[Mlp], x: Var) -> Result<Var> {
    let outs = mlps.iter().map(|m| m.forward(tape, p, x)).collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, block: &str) -> Result<()> {
    if let Some(i) = tape.value(v).iter().position(|x| !x.is_finite()) {
        return Err(LsiError::Numeric { block: block.to_string(), detail: format!("non-finite activation at index {i}") });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::grad_check_entries;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d: 6,
            levels: 4,
            latent_width: 4,
            split: (1, 1, 2),
            hidden: 8,
            expansion: 2,
            depths: (2, 3, 4),
            input_scale: 1.0,
        }
    }

    fn perturb(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }

    fn run(enc: &DigitalEncoder<f64>, c: &[f64], batch: usize, ablate: bool) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let p = enc.params().bind_frozen(&mut tape);
        let cv = tape.input(vec![batch, enc.config().d], c.to_vec(), false).unwrap();
        let s = enc.encode_stages(&mut tape, &p, cv, ablate).unwrap();
        (tape.value(s.stack).to_vec(), tape.value(s.latents).to_vec())
    }

    #[test]
    fn deterministic_and_shaped() {
        let enc = DigitalEncoder::<f64>::new(small_cfg(), 1).unwrap();
        let c: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let (_, a) = run(&enc, &c, 2, false);
        let (_, b) = run(&enc, &c, 2, false);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 4 * 4);

        let desk = DigitalEncoder::<f64>::new(EncoderConfig::desk(16), 0).unwrap();
        let (_, z) = run(&desk, &vec![0.5; 16], 1, false);
        assert_eq!(z.len(), 4 * 64);
    }

    #[test]
    fn identity_mix_is_transparent() {
        let enc = DigitalEncoder::<f64>::new(small_cfg(), 2).unwrap();
        let c: Vec<f64> = (0..18).map(|i| (i as f64).sin()).collect();
        let (stack, z) = run(&enc, &c, 3, false);
        assert_eq!(stack, z);
        let (_, ablated) = run(&enc, &c, 3, true);
        assert_eq!(ablated, z);
    }

    #[test]
    fn input_norm_standardizes() {
        let rows = vec![vec![1.0, 10.0], vec![3.0, 10.0], vec![5.0, 10.0]];
        let n = InputNorm::fit(&rows, 0.5).unwrap();
        assert_eq!(n.mean, vec![1.5, 5.0]);
        assert!((n.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(n.std[1], 1.0);

        let mut cfg = small_cfg();
        cfg.d = 2;
        let mut enc = DigitalEncoder::<f64>::new(cfg.clone(), 1).unwrap();
        let raw = run(&enc, &[2.0, 7.0], 1, false).1;
        enc.set_input_norm(Some(InputNorm { mean: vec![1.0, 2.0], std: vec![0.5, 2.5] })).unwrap();
        let normed = run(&enc, &[2.0, 19.5], 1, false).1;
        for (a, b) in raw.iter().zip(&normed) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(enc.set_input_norm(Some(InputNorm { mean: vec![0.0], std: vec![1.0] })).is_err());
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let enc = DigitalEncoder::<f64>::new(small_cfg(), 2).unwrap();
        let mut tape = Tape::new();
        let p = enc.params().bind_frozen(&mut tape);
        let cv = tape.input(vec![1, 5], vec![0.0; 5], false).unwrap();
        assert!(matches!(enc.encode(&mut tape, &p, cv), Err(LsiError::Dimension(_))));
    }

    #[test]
    fn non_finite_input_reports_block() {
        let enc = DigitalEncoder::<f64>::new(small_cfg(), 2).unwrap();
        let mut tape = Tape::new();
        let p = enc.params().bind_frozen(&mut tape);
        let mut c = vec![0.1; 6];
        c[2] = f64::NAN;
        let cv = tape.input(vec![1, 6], c, false).unwrap();
        match enc.encode(&mut tape, &p, cv) {
            Err(LsiError::Numeric { block, .. }) => assert_eq!(block, "coarse block"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        for cfg in [small_cfg(), EncoderConfig::desk(16), EncoderConfig::desk(64)] {
            let enc = DigitalEncoder::<f64>::new(cfg.clone(), 0).unwrap();
            assert_eq!(enc.params().count(), count_parameters(&cfg));
        }
        // hand-derived for desk(16): h = 256, w = 64, e = 4
        let (h, w, d) = (256usize, 64usize, 16usize);
        let mix = |l: usize| (w * 4 * w + 4 * w) + (l * l + l) + (2 * w * w + w);
        let coarse = (d * h + h) + (h * w + w);
        let middle = ((d + w) * h + h) + (h * h + h) + (h * w + w);
        let fine = (w * h + h) + 2 * (h * h + h) + (h * w + w);
        let embed = d * w + w;
        let want = coarse + mix(1) + middle + mix(1) + embed + 2 * fine + mix(4);
        assert_eq!(count_parameters(&EncoderConfig::desk(16)), want);
    }

    #[test]
    fn doubling_hidden_doubles_hidden_weights() {
        let mut a = small_cfg();
        a.split = (1, 1, 1);
        a.levels = 3;
        a.depths = (1, 1, 3);
        let mut b = a.clone();
        b.hidden *= 2;
        // only the fine block has hidden layers: (w·h + h) + (h² + h) + (h·w + w)
        let (h, w) = (a.hidden, a.latent_width);
        let fine = |h: usize| (w * h + h) + (h * h + h) + (h * w + w);
        assert_eq!(count_parameters(&b) - count_parameters(&a), fine(2 * h) - fine(h));
        let enc = DigitalEncoder::<f64>::new(b.clone(), 0).unwrap();
        assert_eq!(enc.params().count(), count_parameters(&b));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut enc = DigitalEncoder::<f64>::new(small_cfg(), 3).unwrap();
        perturb(enc.params_mut(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Tensor::new(vec![1, 6], (0..6).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        for out_idx in [0usize, 5, 9, 15] {
            let err = grad_check_entries(
                |tape, cv| {
                    let p = enc.params().bind_frozen(tape);
                    let z = enc.encode(tape, &p, cv)?;
                    let z = tape.reshape(z, vec![1, 16])?;
                    tape.slice_cols(z, out_idx, 1)
                },
                &c,
                1e-5,
                &[0, 2, 5],
            )
            .unwrap();
            assert!(err < 1e-3, "output {out_idx}: {err}");
        }
    }
}
