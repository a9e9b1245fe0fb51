//! Loss terms of the LSI objective.

use crate::autodiff::{Tape, Var};
use crate::error::{LsiError, Result};
use crate::scalar::Scalar;

/// Weights of the objective terms. `id` is kept for configuration
/// compatibility only: no identity network is evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub latent: f64,
    pub id: f64,
    pub perceptual: f64,
    pub l2: f64,
    pub energy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { latent: 1.0, id: 0.5, perceptual: 0.8, l2: 1.0, energy: 3.0 }
    }
}

/// Mean absolute difference between two latent stacks.
pub fn latent_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(LsiError::dim(format!(
            "latent loss: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `(mse, surrogate)` where the surrogate is the mean over scales
/// `{1, ½, ¼}` of the L1 distance after 2×2 average pooling.
pub fn pixel_losses<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<(Var, Var)> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(LsiError::dim(format!(
            "pixel losses: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    let mse = tape.mean(sq);

    let (mut p, mut t) = (pred, target);
    let mut terms = Vec::with_capacity(3);
    for scale in 0..3 {
        if scale > 0 {
            p = tape.avg_pool2x(p)?;
            t = tape.avg_pool2x(t)?;
        }
        let d = tape.sub(p, t)?;
        let a = tape.abs(d);
        terms.push(tape.mean(a));
    }
    let s = tape.add(terms[0], terms[1])?;
    let s = tape.add(s, terms[2])?;
    let surrogate = tape.mul_scalar(s, T::one() / T::lit(3.0));
    Ok((mse, surrogate))
}

/// Forward values of every term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub latent: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub energy: f64,
    pub total: f64,
}

impl LossTerms {
    /// `λ · terms`; the dropped identity term contributes nothing.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.latent * self.latent + w.l2 * self.l2 + w.perceptual * self.perceptual + w.energy * self.energy
    }
}

/// Sums `λ_k · term_k` on the tape, skipping terms with `λ_k = 0` so they
/// contribute exactly nothing to the gradient.
pub fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, terms: &[(f64, Option<Var>)]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &(w, term) in terms {
        let Some(term) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = tape.mul_scalar(term, T::lit(w));
        total = Some(match total {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(total)
}
