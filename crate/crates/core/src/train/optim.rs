//! Lion for mask logits; RAdam wrapped in Lookahead ("Ranger") for networks.

use crate::autodiff::Tensor;
use crate::error::{LsiError, Result};
use crate::scalar::Scalar;

pub trait Optimizer<T: Scalar> {
    /// One update from the gradients accumulated on `params`. Tensors
    /// without a gradient are treated as having a zero gradient.
    fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()>;

    fn steps_taken(&self) -> u64;
}

fn check_buffers<T: Scalar>(buffers: &mut Vec<Vec<T>>, params: &[Tensor<T>], what: &str) -> Result<()> {
    if buffers.is_empty() {
        *buffers = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        return Ok(());
    }
    if buffers.len() != params.len() || buffers.iter().zip(params).any(|(b, p)| b.len() != p.numel()) {
        return Err(LsiError::dim(format!("{what}: parameter layout changed between steps")));
    }
    Ok(())
}

fn grad_or_zero<T: Scalar>(p: &Tensor<T>) -> std::borrow::Cow<'_, [T]> {
    match p.grad() {
        Some(g) => std::borrow::Cow::Borrowed(g),
        None => std::borrow::Cow::Owned(vec![T::zero(); p.numel()]),
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LionConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub weight_decay: T,
    /// Projection applied after every step, e.g. `[0, 1]` for mask logits.
    pub bounds: Option<(T, T)>,
}

impl<T: Scalar> LionConfig<T> {
    pub fn new(lr: T) -> Self {
        LionConfig { lr, beta1: T::lit(0.9), beta2: T::lit(0.99), weight_decay: T::zero(), bounds: None }
    }

    pub fn with_bounds(mut self, lo: T, hi: T) -> Self {
        self.bounds = Some((lo, hi));
        self
    }
}

/// Sign-momentum optimizer.
///
/// ```text
/// u = sign(β₁·m + (1−β₁)·g)
/// θ ← θ − lr·(u + wd·θ)
/// m ← β₂·m + (1−β₂)·g
/// ```
#[derive(Clone, Debug)]
pub struct Lion<T> {
    pub config: LionConfig<T>,
    momentum: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Lion<T> {
    pub fn new(config: LionConfig<T>) -> Self {
        Lion { config, momentum: Vec::new(), steps: 0 }
    }

    pub fn momentum(&self) -> &[Vec<T>] {
        &self.momentum
    }
}

impl<T: Scalar> Optimizer<T> for Lion<T> {
    fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        check_buffers(&mut self.momentum, params, "lion")?;
        let c = self.config;
        for (p, m) in params.iter_mut().zip(&mut self.momentum) {
            let g = grad_or_zero(p).into_owned();
            for ((theta, mi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(&g) {
                let u = sign(c.beta1 * *mi + (T::one() - c.beta1) * gi);
                *theta = *theta - c.lr * (u + c.weight_decay * *theta);
                *mi = c.beta2 * *mi + (T::one() - c.beta2) * gi;
                if let Some((lo, hi)) = c.bounds {
                    *theta = theta.max(lo).min(hi);
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RAdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> RAdamConfig<T> {
    pub fn new(lr: T) -> Self {
        RAdamConfig { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), weight_decay: T::zero() }
    }
}

/// Adam with variance rectification. While the approximated SMA length
/// `ρ_t ≤ 5` the adaptive term is skipped and the step is `lr·m̂`.
#[derive(Clone, Debug)]
pub struct RAdam<T> {
    pub config: RAdamConfig<T>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> RAdam<T> {
    pub fn new(config: RAdamConfig<T>) -> Self {
        RAdam { config, m: Vec::new(), v: Vec::new(), steps: 0 }
    }

    /// `(ρ_t, rectification factor)`; the factor is `None` during warmup.
    pub fn rectification(beta2: f64, t: u64) -> (f64, Option<f64>) {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b2t = beta2.powi(t as i32);
        let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        if rho_t > 5.0 {
            let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            (rho_t, Some(r))
        } else {
            (rho_t, None)
        }
    }
}

impl<T: Scalar> Optimizer<T> for RAdam<T> {
    fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        check_buffers(&mut self.m, params, "radam")?;
        check_buffers(&mut self.v, params, "radam")?;
        self.steps += 1;
        let t = self.steps;
        let c = self.config;
        let b1t = c.beta1.powi(t as i32);
        let b2t = c.beta2.powi(t as i32);
        let (_, rect) = Self::rectification(c.beta2.as_f64(), t);
        let rect = rect.map(T::lit);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = grad_or_zero(p).into_owned();
            for (((theta, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
                let gi = gi + c.weight_decay * *theta;
                *mi = c.beta1 * *mi + (T::one() - c.beta1) * gi;
                *vi = c.beta2 * *vi + (T::one() - c.beta2) * gi * gi;
                let m_hat = *mi / (T::one() - b1t);
                match rect {
                    Some(r) => {
                        let adaptive = (T::one() - b2t).sqrt() / (vi.sqrt() + c.eps);
                        *theta = *theta - c.lr * m_hat * r * adaptive;
                    }
                    None => *theta = *theta - c.lr * m_hat,
                }
            }
        }
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }
}

/// Every `k` inner steps: `slow ← slow + α·(fast − slow)`, then `fast ← slow`.
#[derive(Clone, Debug)]
pub struct Lookahead<O, T> {
    pub inner: O,
    pub k: u64,
    pub alpha: T,
    slow: Vec<Vec<T>>,
}

impl<O: Optimizer<T>, T: Scalar> Lookahead<O, T> {
    pub fn new(inner: O, k: u64, alpha: T) -> Self {
        Lookahead { inner, k: k.max(1), alpha, slow: Vec::new() }
    }
}

impl<O: Optimizer<T>, T: Scalar> Optimizer<T> for Lookahead<O, T> {
    fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if self.slow.is_empty() {
            self.slow = params.iter().map(|p| p.data().to_vec()).collect();
        } else if self.slow.len() != params.len() || self.slow.iter().zip(params.iter()).any(|(s, p)| s.len() != p.numel()) {
            return Err(LsiError::dim("lookahead: parameter layout changed between steps"));
        }
        self.inner.step(params)?;
        if self.inner.steps_taken() % self.k == 0 {
            let a = self.alpha;
            for (p, slow) in params.iter_mut().zip(&mut self.slow) {
                for (f, s) in p.data_mut().iter_mut().zip(slow.iter_mut()) {
                    // written as a convex combination so α = 1 reproduces `fast` exactly
                    *s = a * *f + (T::one() - a) * *s;
                    *f = *s;
                }
            }
        }
        Ok(())
    }

    fn steps_taken(&self) -> u64 {
        self.inner.steps_taken()
    }
}

pub type Ranger<T> = Lookahead<RAdam<T>, T>;

/// Lookahead(k = 5, α = 0.5) around RAdam.
pub fn ranger<T: Scalar>(lr: T) -> Ranger<T> {
    Lookahead::new(RAdam::new(RAdamConfig::new(lr)), 5, T::lit(0.5))
}
