use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{bail, Result};

/// Negative-side slope of every LeakyReLU in the crate.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: Padding,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: Padding::Same,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    None,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Output length and leading pad of one spatial axis of a convolution.
pub fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        bail!(Shape, "kernel, stride and dilation must be positive");
    }
    let effective = (kernel - 1) * dilation + 1;
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + effective).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if effective > input {
                bail!(
                    Shape,
                    "receptive field {} exceeds input length {} under valid padding",
                    effective,
                    input
                );
            }
            Ok(((input - effective) / stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.sh + i * self.dh) as isize - self.pad_top as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.sw + j * self.dw) as isize - self.pad_left as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                x[base + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.sh + i * self.dh) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.sw + j * self.dw) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < self.w as isize {
                                let d = &mut dx[base + ix as usize];
                                *d = *d + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Concat {
        parts: Vec<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    RowBlend {
        a: Var,
        b: Var,
        mask: Vec<T>,
    },
    SumAll(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of operations recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so reverse iteration is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => bail!(Shape, "{} expects a [batch, channels, H, W] tensor, got {:?}", what, shape),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => bail!(Shape, "{} expects a 2-D tensor, got {:?}", what, shape),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = p.trainable;
        self.push(p.value.clone(), Op::Param(id), trainable)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Shape,
                "{}: operand shapes differ ({:?} vs {:?})",
                what,
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(av.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        Tensor::from_vec(av.shape(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x · w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, k) = dims2(self.shape(x), "affine input")?;
        let (k2, n) = dims2(self.shape(w), "affine weights")?;
        if k != k2 {
            bail!(Shape, "affine: input width {} does not match weight rows {}", k, k2);
        }
        if let Some(b) = b {
            if self.shape(b) != [n] {
                bail!(Shape, "affine: bias shape {:?} does not match {} outputs", self.shape(b), n);
            }
        }
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            (k as isize, 1),
            self.value(w).data(),
            (n as isize, 1),
            beta,
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&[rows, n], out)?, Op::Affine { x, w, b }, rg))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine(x, w, None)
    }

    /// Cross-correlation of `x: [batch, c_in, H, W]` with `w: [c_out, c_in, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (batch, c_in, h, wd) = dims4(self.shape(x), "conv2d input")?;
        let (c_out, c_in2, kh, kw) = dims4(self.shape(w), "conv2d kernel")?;
        if c_in != c_in2 {
            bail!(Shape, "conv2d: input has {} channels, kernel expects {}", c_in, c_in2);
        }
        let (ho, pad_top) = conv_output_len(h, kh, spec.stride.0, spec.dilation.0, spec.padding)?;
        let (wo, pad_left) = conv_output_len(wd, kw, spec.stride.1, spec.dilation.1, spec.padding)?;
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            sh: spec.stride.0,
            sw: spec.stride.1,
            dh: spec.dilation.0,
            dw: spec.dilation.1,
            pad_top,
            pad_left,
            ho,
            wo,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); batch * c_out * cols];
        let xin = self.value(x).data();
        let kernel = self.value(w).data();
        let in_stride = c_in * h * wd;
        for b in 0..batch {
            geom.im2col(&xin[b * in_stride..(b + 1) * in_stride], &mut col);
            T::gemm(
                c_out,
                rows,
                cols,
                kernel,
                (rows as isize, 1),
                &col,
                (cols as isize, 1),
                T::zero(),
                &mut out[b * c_out * cols..(b + 1) * c_out * cols],
                (cols as isize, 1),
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::from_vec(&[batch, c_out, ho, wo], out)?,
            Op::Conv2d { x, w, geom },
            rg,
        ))
    }

    /// Concatenates `[batch, c_k, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Argument, "concat of zero tensors");
        };
        let (batch, _, h, w) = dims4(self.shape(first), "concat")?;
        let mut channels = 0;
        for &p in parts {
            let (b2, c, h2, w2) = dims4(self.shape(p), "concat")?;
            if (b2, h2, w2) != (batch, h, w) {
                bail!(Shape, "concat: mismatched part shape {:?}", self.shape(p));
            }
            channels += c;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(batch * channels * plane);
        for b in 0..batch {
            for &p in parts {
                let c = self.shape(p)[1];
                let data = self.value(p).data();
                out.extend_from_slice(&data[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_vec(&[batch, channels, h, w], out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            bail!(Shape, "batch_norm expects [batch, features, ...], got {:?}", shape);
        }
        let (b, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Shape, "batch_norm: scale/shift must have shape [{}]", c);
        }
        Ok((b, c, s))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
        train: bool,
    ) -> Result<Var> {
        let (b, c, s) = self.bn_layout(x, gamma, beta)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for k in base..base + s {
                    let h = (xv[k] - mean[ci]) * inv_std[ci];
                    xhat[k] = h;
                    out[k] = g[ci] * h + bt[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Normalizes with the batch's own per-channel mean and population variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (b, c, s) = self.bn_layout(x, gamma, beta)?;
        if b < 2 {
            bail!(Argument, "training-mode batch norm needs a batch of at least 2, got {}", b);
        }
        let n = T::from_usize(b * s).expect("count");
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut sum = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                sum = sum + xv[base..base + s].iter().copied().sum::<T>();
            }
            let m = sum / n;
            let mut sq = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                for &v in &xv[base..base + s] {
                    sq = sq + (v - m) * (v - m);
                }
            }
            mean[ci] = m;
            var[ci] = sq / n;
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Fixed affine normalization with externally supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.bn_apply(x, gamma, beta, running_mean, running_var, eps, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| if a > T::zero() { a } else { T::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let v = self.map(x, |a| if a > T::zero() { a } else { a * s });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| T::one() / (T::one() + (-a).exp()));
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::LeakyRelu => self.leaky_relu(x, LEAKY_RELU_SLOPE),
            Activation::None => x,
        }
    }

    /// Non-overlapping max pooling over the spatial axes; trailing remainders are dropped.
    pub fn max_pool(&mut self, x: Var, pool: (usize, usize)) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "max_pool")?;
        let (ph, pw) = pool;
        if ph == 0 || pw == 0 || ph > h || pw > w {
            bail!(Shape, "pool {:?} does not fit input {}x{}", pool, h, w);
        }
        let (ho, wo) = (h / ph, w / pw);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * ph * w + ox * pw;
                    for i in 0..ph {
                        for j in 0..pw {
                            let k = base + (oy * ph + i) * w + ox * pw + j;
                            if xv[k] > xv[best] {
                                best = k;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_vec(&[b, c, ho, wo], out)?,
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` in training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            bail!(Argument, "dropout probability must lie in [0, 1), got {}", p);
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Dropout { x, mask }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// `[batch, ...] -> [batch, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, &[b, rest])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x), "slice_cols")?;
        if start + len > cols {
            bail!(Shape, "slice {}..{} out of {} columns", start, start + len, cols);
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[rows, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Row-wise `mask[r] * a + (1 - mask[r]) * b` for 2-D operands.
    pub fn row_blend(&mut self, a: Var, b: Var, mask: Vec<T>) -> Result<Var> {
        self.binary_same_shape(a, b, "row_blend")?;
        let (rows, cols) = dims2(self.shape(a), "row_blend")?;
        if mask.len() != rows {
            bail!(Shape, "row_blend: mask has {} entries for {} rows", mask.len(), rows);
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let m = mask[r];
            for c in 0..cols {
                let k = r * cols + c;
                out.push(m * av[k] + (T::one() - m) * bv[k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[rows, cols], out)?, Op::RowBlend { a, b, mask }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Mean over the batch of `-w_b * log softmax(logits_b)[target_b]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, classes) = dims2(self.shape(logits), "softmax_cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            bail!(Shape, "softmax_cross_entropy: {} rows, {} targets, {} weights", rows, targets.len(), weights.len());
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            bail!(Argument, "target class {} out of range for {} classes", t, classes);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            let z = &lv[r * classes..(r + 1) * classes];
            let m = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = z.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for k in 0..classes {
                probs[r * classes + k] = (z[k] - lse).exp();
            }
            total = total + weights[r] * (lse - z[targets[r]]);
        }
        let loss = total / T::from_usize(rows).expect("count");
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node; gradients are retrievable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            bail!(Shape, "backward needs a scalar, got shape {:?}", self.shape(loss));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &gout)?;
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::from_vec(self.shape(v), data).expect("gradient shape")
    }

    fn backprop_node(&mut self, i: usize, gout: &Tensor<T>) -> Result<()> {
        let g = gout.data();
        // Contributions are computed against immutable node data first, then accumulated.
        let mut contribs: Vec<(Var, Tensor<T>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                contribs.push((*a, gout.clone()));
                contribs.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                contribs.push((*a, gout.clone()));
                contribs.push((*b, self.like(*b, g.iter().map(|&v| -v).collect())));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    contribs.push((*a, self.like(*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect())));
                }
                if self.rg(*b) {
                    contribs.push((*b, self.like(*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect())));
                }
            }
            Op::Affine { x, w, b } => {
                let (rows, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); rows * k];
                    T::gemm(rows, n, k, g, (n as isize, 1), self.value(*w).data(), (1, n as isize), T::zero(), &mut gx, (k as isize, 1));
                    contribs.push((*x, self.like(*x, gx)));
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    T::gemm(k, rows, n, self.value(*x).data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut gw, (n as isize, 1));
                    contribs.push((*w, self.like(*w, gw)));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in g.chunks(n) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        contribs.push((*b, self.like(*b, gb)));
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let geom = *geom;
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_stride = geom.c_in * geom.h * geom.w;
                let out_stride = geom.c_out * cols;
                let xin = self.value(*x).data();
                let kernel = self.value(*w).data();
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut col = vec![T::zero(); rows * cols];
                let mut gw = vec![T::zero(); if need_w { geom.c_out * rows } else { 0 }];
                let mut gx = vec![T::zero(); if need_x { xin.len() } else { 0 }];
                for b in 0..geom.batch {
                    let gb = &g[b * out_stride..(b + 1) * out_stride];
                    if need_w {
                        geom.im2col(&xin[b * in_stride..(b + 1) * in_stride], &mut col);
                        T::gemm(geom.c_out, cols, rows, gb, (cols as isize, 1), &col, (1, cols as isize), T::one(), &mut gw, (rows as isize, 1));
                    }
                    if need_x {
                        T::gemm(rows, geom.c_out, cols, kernel, (1, rows as isize), gb, (cols as isize, 1), T::zero(), &mut col, (cols as isize, 1));
                        geom.col2im(&col, &mut gx[b * in_stride..(b + 1) * in_stride]);
                    }
                }
                if need_x {
                    contribs.push((*x, self.like(*x, gx)));
                }
                if need_w {
                    contribs.push((*w, self.like(*w, gw)));
                }
            }
            Op::Concat { parts } => {
                let shape = gout.shape();
                let (batch, channels, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(batch * c * plane);
                        for b in 0..batch {
                            let start = (b * channels + offset) * plane;
                            gp.extend_from_slice(&g[start..start + c * plane]);
                        }
                        contribs.push((p, self.like(p, gp)));
                    }
                    offset += c;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.shape(*x);
                let (b, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let n = T::from_usize(b * s).expect("count");
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for k in base..base + s {
                            sum_dy[ci] = sum_dy[ci] + g[k];
                            sum_dy_xhat[ci] = sum_dy_xhat[ci] + g[k] * xhat[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * s;
                            let scale = gv[ci] * inv_std[ci];
                            for k in base..base + s {
                                gx[k] = if *train {
                                    scale / n * (n * g[k] - sum_dy[ci] - xhat[k] * sum_dy_xhat[ci])
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    contribs.push((*x, self.like(*x, gx)));
                }
                contribs.push((*gamma, self.like(*gamma, sum_dy_xhat)));
                contribs.push((*beta, self.like(*beta, sum_dy)));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&gv, &a)| if a > T::zero() { gv } else { T::zero() }).collect();
                contribs.push((*x, self.like(*x, d)));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let d = g.iter().zip(xv).map(|(&gv, &a)| if a > T::zero() { gv } else { gv * *slope }).collect();
                contribs.push((*x, self.like(*x, d)));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                contribs.push((*x, self.like(*x, d)));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(&gv, &t)| gv * (T::one() - t * t)).collect();
                contribs.push((*x, self.like(*x, d)));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (&k, &gv) in argmax.iter().zip(g) {
                    d[k] = d[k] + gv;
                }
                contribs.push((*x, self.like(*x, d)));
            }
            Op::Dropout { x, mask } => {
                let d = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                contribs.push((*x, self.like(*x, d)));
            }
            Op::Reshape(x) => {
                contribs.push((*x, self.like(*x, g.to_vec())));
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = gout.shape()[1];
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                contribs.push((*x, self.like(*x, d)));
            }
            Op::RowBlend { a, b, mask } => {
                let cols = gout.shape()[1];
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for (k, &gv) in g.iter().enumerate() {
                    let m = mask[k / cols];
                    ga.push(m * gv);
                    gb.push((T::one() - m) * gv);
                }
                contribs.push((*a, self.like(*a, ga)));
                contribs.push((*b, self.like(*b, gb)));
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                contribs.push((*x, self.like(*x, vec![g[0]; n])));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let rows = targets.len();
                let scale = g[0] / T::from_usize(rows).expect("count");
                let mut d = probs.clone();
                for r in 0..rows {
                    d[r * classes + targets[r]] = d[r * classes + targets[r]] - T::one();
                    for k in 0..classes {
                        d[r * classes + k] = d[r * classes + k] * weights[r] * scale;
                    }
                }
                contribs.push((*logits, self.like(*logits, d)));
            }
        }
        for (v, c) in contribs {
            self.accumulate(v, c);
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    let p = store.get_mut(id);
                    if p.trainable {
                        p.grad.add_assign(g);
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
