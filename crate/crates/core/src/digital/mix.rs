use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{LsiError, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Spatial gating across latent levels.
///
/// Channels are expanded by `expansion`, split into halves `u | v`; `v` is
/// layer-normalized over channels and mixed across levels by a static
/// `levels × levels` map. The gated `u ⊙ mix(v)` is projected back and
/// added to the input. Initialized as an exact identity: the level map is
/// zero with unit bias and the output projection is zero.
#[derive(Clone, Debug)]
pub struct Mix {
    pub levels: usize,
    pub width: usize,
    pub expansion: usize,
    proj_in: Linear,
    gate_w: ParamId,
    gate_b: ParamId,
    proj_out: Linear,
}

impl Mix {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        levels: usize,
        width: usize,
        expansion: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if expansion < 2 || (expansion * width) % 2 != 0 {
            return Err(LsiError::config(format!(
                "mix expansion {expansion} × width {width} must be even and expansion ≥ 2"
            )));
        }
        let wide = expansion * width;
        let proj_in = Linear::new(store, &format!("{name}.proj_in"), width, wide, rng);
        let gate_w = store.add(format!("{name}.gate.w"), Tensor::zeros(vec![levels, levels]));
        let gate_b = store.add(format!("{name}.gate.b"), Tensor::full(vec![levels], T::one()));
        let proj_out = Linear::constant(store, &format!("{name}.proj_out"), wide / 2, width, T::zero(), T::zero());
        Ok(Mix { levels, width, expansion, proj_in, gate_w, gate_b, proj_out })
    }

    pub fn param_count(levels: usize, width: usize, expansion: usize) -> usize {
        let wide = expansion * width;
        (width * wide + wide) + (levels * levels + levels) + (wide / 2 * width + width)
    }

    /// `z` is `[B, levels·width]`, one row per sample.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let rows = match *tape.shape(z) {
            [b, w] if w == self.levels * self.width => b,
            ref s => {
                return Err(LsiError::dim(format!(
                    "mix over {} levels × {} expects [B, {}], got {s:?}",
                    self.levels,
                    self.width,
                    self.levels * self.width
                )))
            }
        };
        let half = self.expansion * self.width / 2;
        let x = tape.reshape(z, vec![rows * self.levels, self.width])?;
        let h = self.proj_in.forward(tape, p, x)?;
        let u = tape.slice_cols(h, 0, half)?;
        let v = tape.slice_cols(h, half, half)?;
        let v = tape.layer_norm(v, 1)?;
        let v = tape.level_mix(v, self.levels, p[self.gate_w], p[self.gate_b])?;
        let gated = tape.mul(u, v)?;
        let out = self.proj_out.forward(tape, p, gated)?;
        let y = tape.add(out, x)?;
        tape.reshape(y, vec![rows, self.levels * self.width])
    }
}
