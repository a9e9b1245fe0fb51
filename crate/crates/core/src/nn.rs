//! Named parameter storage and the small layer vocabulary the models share.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{LsiError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Substitutes one handle, e.g. to differentiate a single parameter.
    pub fn with(mut self, id: ParamId, v: Var) -> Self {
        self.vars[id.0] = v;
        self
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// All parameters as one slice, the form optimizers consume.
    pub fn as_mut_slice(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Records every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t)).collect() }
    }

    /// Records every parameter as a constant (frozen model).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.constant(t)).collect() }
    }

    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values by name; every stored parameter must be present with
    /// a matching shape.
    pub fn load_from(&mut self, lookup: impl Fn(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| LsiError::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(LsiError::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values; used to prove frozen models stay frozen.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Uniform initializer scaled for leaky-ReLU(0.2) fan-in.
pub fn kaiming_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / ((1.0 + 0.04) * fan_in as f64)).sqrt();
    uniform(shape, bound, rng)
}

pub fn uniform<T: Scalar>(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("initializer shape")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), kaiming_uniform(vec![fan_in, fan_out], fan_in, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    /// Weight and bias set to constants.
    pub fn constant<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        w: T,
        b: T,
    ) -> Self {
        let wi = store.add(format!("{name}.w"), Tensor::full(vec![fan_in, fan_out], w));
        let bi = store.add(format!("{name}.b"), Tensor::full(vec![fan_out], b));
        Linear { w: wi, b: bi, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(format!("{name}.w"), kaiming_uniform(vec![out_ch, in_ch, kernel, kernel], fan_in, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        Conv { w, b, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w], self.stride, self.pad)?;
        tape.add_channel_bias(y, p[self.b])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "l", 16, 64, &mut rng);
        assert_eq!(l.param_count(), 16 * 64 + 64);
        assert_eq!(store.count(), l.param_count());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("a", Tensor::from_vec(vec![1.0, 2.0]));
        let before = store.checksum();
        assert_eq!(before, store.clone().checksum());
        store.get_mut(id).data_mut()[0] = 1.5;
        assert_ne!(before, store.checksum());
    }
}
