use crate::autodiff::kernels::{self, ConvGeom};
use crate::autodiff::Tensor;
use crate::error::{LsiError, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<T> {
    Clamp(T, T),
    Abs,
    LeakyRelu(T),
    Sign,
    Sigmoid,
    Square,
    AddScalar(T),
    MulScalar(T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary<T>, Var),
    /// Forward: hard threshold. Backward: identity on (lo, hi), zero elsewhere.
    Ste { x: Var, lo: T, hi: T },
    Sum(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Reshape(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    AddRow { x: Var, bias: Var, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { x: Var, start: usize, width: usize, cols: usize },
    Conv2d { x: Var, w: Var, batch: usize, out_ch: usize, geom: ConvGeom },
    ChannelBias { x: Var, bias: Var, channels: usize, plane: usize },
    Film { x: Var, scale: Var, shift: Var, batch: usize, channels: usize, plane: usize },
    BatchBroadcastAdd { x: Var, y: Var },
    Upsample2x { x: Var, planes: usize, h: usize, w: usize },
    AvgPool2x { x: Var, planes: usize, h: usize, w: usize },
    LayerNorm { x: Var, outer: usize, len: usize, inner: usize, xhat: Vec<T>, inv_std: Vec<T> },
    LevelMix { v: Var, w: Var, bias: Var, batch: usize, levels: usize, width: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the given length when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    /// Accumulates the gradient of `v` into `tensor`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![T::zero(); tensor.numel()]),
        }
    }
}

/// Reverse-mode tape. Rebuilt for every forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Records a copy of `t`; gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a copy of `t` that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, requires_grad))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.numel(a), self.numel(b));
        let shape = if sa == sb || nb == 1 {
            sa.clone()
        } else if na == 1 {
            sb.clone()
        } else {
            return Err(LsiError::dim(format!(
                "{op:?}: shapes {} and {} are not broadcastable",
                shape_str(&sa),
                shape_str(&sb)
            )));
        };
        let n = na.max(nb);
        let (va, vb) = (self.value(a), self.value(b));
        let at = |i: usize| if na == 1 { va[0] } else { va[i] };
        let bt = |i: usize| if nb == 1 { vb[0] } else { vb[i] };
        let value: Vec<T> = (0..n)
            .map(|i| match op {
                Binary::Add => at(i) + bt(i),
                Binary::Sub => at(i) - bt(i),
                Binary::Mul => at(i) * bt(i),
                Binary::Div => at(i) / bt(i),
            })
            .collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, value, Op::Binary(op, a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, op: Unary<T>, x: Var) -> Var {
        let half = T::lit(0.5);
        let value: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| match op {
                Unary::Clamp(lo, hi) => v.max(lo).min(hi),
                Unary::Abs => v.abs(),
                Unary::LeakyRelu(slope) => {
                    if v > T::zero() {
                        v
                    } else {
                        v * slope
                    }
                }
                Unary::Sign => sign(v),
                // tanh form avoids overflow of exp for large |v|
                Unary::Sigmoid => half * ((v * half).tanh() + T::one()),
                Unary::Square => v * v,
                Unary::AddScalar(s) => v + s,
                Unary::MulScalar(s) => v * s,
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) && !matches!(op, Unary::Sign);
        self.push(shape, value, Op::Unary(op, x), tracked)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// Leaky ReLU with negative slope 0.2.
    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(Unary::LeakyRelu(T::lit(0.2)), x)
    }

    pub fn sign(&mut self, x: Var) -> Var {
        self.unary(Unary::Sign, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(Unary::AddScalar(s), x)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(Unary::MulScalar(s), x)
    }

    /// Straight-through binarization: `1` where `x ≥ threshold`, else `0`.
    /// The backward pass copies the upstream gradient where `lo < x < hi`.
    pub fn ste_binarize(&mut self, x: Var, threshold: T, lo: T, hi: T) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| if v >= threshold { T::one() } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x);
        self.push(shape, value, Op::Ste { x, lo, hi }, tracked)
    }

    // ---- reductions and shape ----------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.numel(x) as f64);
        let s = self.sum(x);
        self.mul_scalar(s, T::one() / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let v = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (i, &r) in row.iter().enumerate() {
                    out[o * inner + i] += r;
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let tracked = self.tracked(x);
        Ok(self.push(new_shape, out, Op::SumAxis { x, outer, len, inner }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(LsiError::dim(format!(
                "cannot reshape {} to {}",
                shape_str(self.shape(x)),
                shape_str(&shape)
            )));
        }
        let value = self.value(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape, value, Op::Reshape(x), tracked))
    }

    fn matrix_dims(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [r, c] => Ok((r, c)),
            ref s => Err(LsiError::dim(format!("{what}: expected a matrix, got {}", shape_str(s)))),
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(LsiError::dim("concat_cols: no inputs"));
        }
        let rows = self.matrix_dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(LsiError::dim(format!("concat_cols: row counts {rows} and {r} differ")));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: widths, rows }, tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > cols {
            return Err(LsiError::dim(format!("slice_cols: [{start}, {}) outside {cols} columns", start + width)));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + width]);
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![rows, width], out, Op::SliceCols { x, start, width, cols }, tracked))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(LsiError::dim(format!("matmul: inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, tracked))
    }

    /// `x[N×F] + bias[F]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.matrix_dims(x, "add_row")?;
        if self.numel(bias) != cols {
            return Err(LsiError::dim(format!("add_row: bias of {} for {cols} columns", self.numel(bias))));
        }
        let b = self.value(bias).to_vec();
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(shape, out, Op::AddRow { x, bias, cols }, tracked))
    }

    /// `x·w + b` for `x: [N×in]`, `w: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    // ---- spatial -----------------------------------------------------------

    fn nchw(&self, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape(x) {
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(LsiError::dim(format!("{what}: expected B×C×H×W, got {}", shape_str(s)))),
        }
    }

    /// 2-D convolution without bias; `w` is `[O, C, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c, h, wd) = self.nchw(x, "conv2d")?;
        let (o, wc, k, k2) = self.nchw(w, "conv2d weight")?;
        if wc != c {
            return Err(LsiError::dim(format!("conv2d: input has {c} channels, kernel expects {wc}")));
        }
        if k != k2 || k % 2 == 0 {
            return Err(LsiError::dim(format!("conv2d: kernel must be square and odd, got {k}×{k2}")));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(LsiError::dim("conv2d: kernel larger than padded input or zero stride"));
        }
        let geom = ConvGeom { channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (p, patch) = (geom.positions(), geom.patch());
        let mut cols = vec![T::zero(); patch * p];
        let mut out = vec![T::zero(); batch * o * p];
        let xv = self.value(x);
        let wv = self.value(w);
        for bi in 0..batch {
            kernels::im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], &geom, &mut cols);
            T::gemm(
                o,
                patch,
                p,
                T::one(),
                wv,
                patch as isize,
                1,
                &cols,
                p as isize,
                1,
                T::zero(),
                &mut out[bi * o * p..(bi + 1) * o * p],
                p as isize,
                1,
            );
        }
        let shape = vec![batch, o, geom.out_height(), geom.out_width()];
        let tracked = self.tracked(x) || self.tracked(w);
        Ok(self.push(shape, out, Op::Conv2d { x, w, batch, out_ch: o, geom }, tracked))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, h, w) = self.nchw(x, "add_channel_bias")?;
        if self.numel(bias) != c {
            return Err(LsiError::dim(format!("add_channel_bias: {} biases for {c} channels", self.numel(bias))));
        }
        let plane = h * w;
        let b = self.value(bias);
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &v)| v + b[(i / plane) % c]).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(shape, out, Op::ChannelBias { x, bias, channels: c, plane }, tracked))
    }

    /// Feature-wise modulation `x·(1 + scale) + shift` with per-sample,
    /// per-channel `scale, shift: [B×C]`.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (batch, c, h, w) = self.nchw(x, "film")?;
        for s in [scale, shift] {
            if self.shape(s) != [batch, c] {
                return Err(LsiError::dim(format!(
                    "film: modulation shape {} for {batch}×{c}",
                    shape_str(self.shape(s))
                )));
            }
        }
        let plane = h * w;
        let (sv, tv) = (self.value(scale), self.value(shift));
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let bc = i / plane;
                v * (T::one() + sv[bc]) + tv[bc]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) || self.tracked(scale) || self.tracked(shift);
        Ok(self.push(shape, out, Op::Film { x, scale, shift, batch, channels: c, plane }, tracked))
    }

    /// `x[B, …] + y[…]`, broadcasting `y` over the leading batch axis.
    pub fn add_batch_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || sx[1..] != *self.shape(y) {
            return Err(LsiError::dim(format!(
                "add_batch_broadcast: {} vs {}",
                shape_str(&sx),
                shape_str(self.shape(y))
            )));
        }
        let yv = self.value(y);
        let per = yv.len();
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &v)| v + yv[i % per]).collect();
        let tracked = self.tracked(x) || self.tracked(y);
        Ok(self.push(sx, out, Op::BatchBroadcastAdd { x, y }, tracked))
    }

    pub fn upsample2x_nearest(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nchw(x, "upsample2x")?;
        let out = kernels::upsample2x(self.value(x), b * c, h, w);
        let tracked = self.tracked(x);
        Ok(self.push(vec![b, c, 2 * h, 2 * w], out, Op::Upsample2x { x, planes: b * c, h, w }, tracked))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nchw(x, "avg_pool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(LsiError::dim(format!("avg_pool2x: odd spatial size {h}×{w}")));
        }
        let out = kernels::avg_pool2x(self.value(x), b * c, h, w);
        let tracked = self.tracked(x);
        Ok(self.push(vec![b, c, h / 2, w / 2], out, Op::AvgPool2x { x, planes: b * c, h, w }, tracked))
    }

    // ---- normalization and mixing -----------------------------------------

    /// Normalizes to zero mean and unit (population) variance along `axis`,
    /// with `1e-5` added to the variance.
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let eps = T::lit(1e-5);
        let nlen = T::lit(len as f64);
        let v = self.value(x);
        let mut xhat = vec![T::zero(); v.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| v[idx(l)]).sum::<T>() / nlen;
                let var = (0..len).map(|l| (v[idx(l)] - mean).powi(2)).sum::<T>() / nlen;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for l in 0..len {
                    xhat[idx(l)] = (v[idx(l)] - mean) * is;
                }
            }
        }
        let tracked = self.tracked(x);
        let value = xhat.clone();
        Ok(self.push(shape, value, Op::LayerNorm { x, outer, len, inner, xhat, inv_std }, tracked))
    }

    /// Static mixing across the level axis: for `v` viewed as `[B, L, W]`,
    /// `out[b, i, :] = Σ_j w[i, j]·v[b, j, :] + bias[i]`.
    pub fn level_mix(&mut self, v: Var, levels: usize, w: Var, bias: Var) -> Result<Var> {
        let (rows, width) = self.matrix_dims(v, "level_mix")?;
        if levels == 0 || rows % levels != 0 {
            return Err(LsiError::dim(format!("level_mix: {rows} rows not divisible into {levels} levels")));
        }
        if self.shape(w) != [levels, levels] || self.numel(bias) != levels {
            return Err(LsiError::dim(format!(
                "level_mix: weight {} / bias {} for {levels} levels",
                shape_str(self.shape(w)),
                shape_str(self.shape(bias))
            )));
        }
        let batch = rows / levels;
        let per = levels * width;
        let mut out = vec![T::zero(); rows * width];
        let (vv, wv, bv) = (self.value(v), self.value(w), self.value(bias));
        for b in 0..batch {
            let dst = &mut out[b * per..(b + 1) * per];
            for i in 0..levels {
                dst[i * width..(i + 1) * width].iter_mut().for_each(|o| *o = bv[i]);
            }
            T::gemm(
                levels,
                levels,
                width,
                T::one(),
                wv,
                levels as isize,
                1,
                &vv[b * per..(b + 1) * per],
                width as isize,
                1,
                T::one(),
                dst,
                width as isize,
                1,
            );
        }
        let tracked = self.tracked(v) || self.tracked(w) || self.tracked(bias);
        Ok(self.push(vec![rows, width], out, Op::LevelMix { v, w, bias, batch, levels, width }, tracked))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates from the scalar `loss` to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.numel(loss) != 1 {
            return Err(LsiError::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.shape(loss))
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let want = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a), self.value(b));
                let (na, nb) = (va.len(), vb.len());
                let at = |i: usize| if na == 1 { va[0] } else { va[i] };
                let bt = |i: usize| if nb == 1 { vb[0] } else { vb[i] };
                if want(a) {
                    let ga: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| match op {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bt(i),
                            Binary::Div => gi / bt(i),
                        })
                        .collect();
                    acc_reduced(&mut grads[a.0], &ga, na);
                }
                if want(b) {
                    let gb: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| match op {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * at(i),
                            Binary::Div => -gi * at(i) / (bt(i) * bt(i)),
                        })
                        .collect();
                    acc_reduced(&mut grads[b.0], &gb, nb);
                }
            }
            Op::Unary(op, x) => {
                let x = *x;
                if !want(x) {
                    return;
                }
                let xv = self.value(x);
                let out = &node.value;
                let gx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let v = xv[i];
                        match *op {
                            Unary::Clamp(lo, hi) => {
                                if v > lo && v < hi {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Abs => gi * sign(v),
                            Unary::LeakyRelu(s) => {
                                if v > T::zero() {
                                    gi
                                } else {
                                    gi * s
                                }
                            }
                            Unary::Sign => T::zero(),
                            Unary::Sigmoid => gi * out[i] * (T::one() - out[i]),
                            Unary::Square => gi * T::lit(2.0) * v,
                            Unary::AddScalar(_) => gi,
                            Unary::MulScalar(s) => gi * s,
                        }
                    })
                    .collect();
                acc(&mut grads[x.0], &gx);
            }
            Op::Ste { x, lo, hi } => {
                if !want(*x) {
                    return;
                }
                let xv = self.value(*x);
                let gx: Vec<T> = g
                    .iter()
                    .zip(xv)
                    .map(|(&gi, &v)| if v > *lo && v < *hi { gi } else { T::zero() })
                    .collect();
                acc(&mut grads[x.0], &gx);
            }
            Op::Sum(x) => {
                if want(*x) {
                    let gx = vec![g[0]; self.numel(*x)];
                    acc(&mut grads[x.0], &gx);
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                if want(*x) {
                    let mut gx = vec![T::zero(); outer * len * inner];
                    for o in 0..*outer {
                        for l in 0..*len {
                            for i in 0..*inner {
                                gx[(o * len + l) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    acc(&mut grads[x.0], &gx);
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    acc(&mut grads[x.0], g);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if want(*a) {
                    // dA = dC · Bᵀ
                    let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, self.value(*b), 1, n as isize, T::one(), slot, k as isize, 1);
                }
                if want(*b) {
                    // dB = Aᵀ · dC
                    let slot = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * n]);
                    T::gemm(k, m, n, T::one(), self.value(*a), 1, k as isize, g, n as isize, 1, T::one(), slot, n as isize, 1);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if want(*x) {
                    let mut gx = vec![T::zero(); rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gx[r * cols + c] = g[c * rows + r];
                        }
                    }
                    acc(&mut grads[x.0], &gx);
                }
            }
            Op::AddRow { x, bias, cols } => {
                if want(*x) {
                    acc(&mut grads[x.0], g);
                }
                if want(*bias) {
                    let mut gb = vec![T::zero(); *cols];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % cols] += gi;
                    }
                    acc(&mut grads[bias.0], &gb);
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if want(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..*rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(&mut grads[p.0], &gp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start, width, cols } => {
                if want(*x) {
                    let rows = g.len() / width;
                    let slot = grads[x.0].get_or_insert_with(|| vec![T::zero(); rows * cols]);
                    for r in 0..rows {
                        for c in 0..*width {
                            slot[r * cols + start + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::Conv2d { x, w, batch, out_ch, geom } => {
                let (p, patch) = (geom.positions(), geom.patch());
                let in_size = geom.channels * geom.height * geom.width;
                let o = *out_ch;
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut cols = vec![T::zero(); patch * p];
                if want(*w) {
                    let mut gw = vec![T::zero(); o * patch];
                    for bi in 0..*batch {
                        kernels::im2col(&xv[bi * in_size..(bi + 1) * in_size], geom, &mut cols);
                        T::gemm(
                            o,
                            p,
                            patch,
                            T::one(),
                            &g[bi * o * p..(bi + 1) * o * p],
                            p as isize,
                            1,
                            &cols,
                            1,
                            p as isize,
                            T::one(),
                            &mut gw,
                            patch as isize,
                            1,
                        );
                    }
                    acc(&mut grads[w.0], &gw);
                }
                if want(*x) {
                    let mut gx = vec![T::zero(); batch * in_size];
                    for bi in 0..*batch {
                        T::gemm(
                            patch,
                            o,
                            p,
                            T::one(),
                            wv,
                            1,
                            patch as isize,
                            &g[bi * o * p..(bi + 1) * o * p],
                            p as isize,
                            1,
                            T::zero(),
                            &mut cols,
                            p as isize,
                            1,
                        );
                        kernels::col2im_add(&cols, geom, &mut gx[bi * in_size..(bi + 1) * in_size]);
                    }
                    acc(&mut grads[x.0], &gx);
                }
            }
            Op::ChannelBias { x, bias, channels, plane } => {
                if want(*x) {
                    acc(&mut grads[x.0], g);
                }
                if want(*bias) {
                    let mut gb = vec![T::zero(); *channels];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[(i / plane) % channels] += gi;
                    }
                    acc(&mut grads[bias.0], &gb);
                }
            }
            Op::Film { x, scale, shift, batch, channels, plane } => {
                let bc = batch * channels;
                let xv = self.value(*x);
                let sv = self.value(*scale);
                if want(*x) {
                    let gx: Vec<T> =
                        g.iter().enumerate().map(|(i, &gi)| gi * (T::one() + sv[i / plane])).collect();
                    acc(&mut grads[x.0], &gx);
                }
                if want(*scale) {
                    let mut gs = vec![T::zero(); bc];
                    for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                        gs[i / plane] += gi * xi;
                    }
                    acc(&mut grads[scale.0], &gs);
                }
                if want(*shift) {
                    let mut gt = vec![T::zero(); bc];
                    for (i, &gi) in g.iter().enumerate() {
                        gt[i / plane] += gi;
                    }
                    acc(&mut grads[shift.0], &gt);
                }
            }
            Op::BatchBroadcastAdd { x, y } => {
                if want(*x) {
                    acc(&mut grads[x.0], g);
                }
                if want(*y) {
                    let per = self.numel(*y);
                    let mut gy = vec![T::zero(); per];
                    for (i, &gi) in g.iter().enumerate() {
                        gy[i % per] += gi;
                    }
                    acc(&mut grads[y.0], &gy);
                }
            }
            Op::Upsample2x { x, planes, h, w } => {
                if want(*x) {
                    let gx = kernels::upsample2x_backward(g, *planes, *h, *w);
                    acc(&mut grads[x.0], &gx);
                }
            }
            Op::AvgPool2x { x, planes, h, w } => {
                if want(*x) {
                    let gx = kernels::avg_pool2x_backward(g, *planes, *h, *w);
                    acc(&mut grads[x.0], &gx);
                }
            }
            Op::LayerNorm { x, outer, len, inner, xhat, inv_std } => {
                if !want(*x) {
                    return;
                }
                let (outer, len, inner) = (*outer, *len, *inner);
                let nlen = T::lit(len as f64);
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let sg: T = (0..len).map(|l| g[idx(l)]).sum();
                        let sgx: T = (0..len).map(|l| g[idx(l)] * xhat[idx(l)]).sum();
                        let is = inv_std[o * inner + i];
                        for l in 0..len {
                            gx[idx(l)] = is / nlen * (nlen * g[idx(l)] - sg - xhat[idx(l)] * sgx);
                        }
                    }
                }
                acc(&mut grads[x.0], &gx);
            }
            Op::LevelMix { v, w, bias, batch, levels, width } => {
                let (l, wd) = (*levels, *width);
                let per = l * wd;
                if want(*v) {
                    let wv = self.value(*w);
                    let mut gv = vec![T::zero(); batch * per];
                    for b in 0..*batch {
                        T::gemm(
                            l,
                            l,
                            wd,
                            T::one(),
                            wv,
                            1,
                            l as isize,
                            &g[b * per..(b + 1) * per],
                            wd as isize,
                            1,
                            T::zero(),
                            &mut gv[b * per..(b + 1) * per],
                            wd as isize,
                            1,
                        );
                    }
                    acc(&mut grads[v.0], &gv);
                }
                if want(*w) {
                    let vv = self.value(*v);
                    let mut gw = vec![T::zero(); l * l];
                    for b in 0..*batch {
                        T::gemm(
                            l,
                            wd,
                            l,
                            T::one(),
                            &g[b * per..(b + 1) * per],
                            wd as isize,
                            1,
                            &vv[b * per..(b + 1) * per],
                            1,
                            wd as isize,
                            T::one(),
                            &mut gw,
                            l as isize,
                            1,
                        );
                    }
                    acc(&mut grads[w.0], &gw);
                }
                if want(*bias) {
                    let mut gb = vec![T::zero(); l];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[(i / wd) % l] += gi;
                    }
                    acc(&mut grads[bias.0], &gb);
                }
            }
        }
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

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(LsiError::dim(format!("axis {axis} out of range for shape {}", shape_str(shape))));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(s) => s.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Accumulates `g`, summing it down to one element when the operand was a
/// broadcast scalar.
fn acc_reduced<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T], target_len: usize) {
    if target_len == 1 && g.len() != 1 {
        let s: T = g.iter().copied().sum();
        acc(slot, &[s]);
    } else {
        acc(slot, g);
    }
}
