//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order together with the
//! forward values its adjoint needs. [`Tape::backward`] walks the records
//! strictly in reverse, once; after that the tape only answers gradient
//! queries and refuses new operations.
//!
//! ```
//! use pfr_core::autodiff::Tape;
//! use pfr_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64([2], &[1.0, -2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.mean(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Upsample(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    PickChannel { x: Var, labels: Vec<usize> },
    LogSigmoid(Var),
    BatchMean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Upsample(_) => "bilinear_upsample",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar_mul",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Softmax(_) => "softmax_channel",
            Op::LogSoftmax(_) => "log_softmax_channel",
            Op::PickChannel { .. } => "pick_channel",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::BatchMean(_) => "batch_mean",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner record of executed operations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Source index pairs and interpolation weights along one upsampled axis,
/// using half-pixel centres (align-corners = false).
fn upsample_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = libm::floor(pos) as usize;
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            (i0, i1, T::from_f64(1.0 - frac), T::from_f64(frac))
        })
        .collect()
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, input_grad: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut input_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a `[N, C, H, W]` shape into `(N, C, H*W)`.
fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(TensorError::shape(
            op,
            format!("expected [N, C, H, W], got {shape:?}"),
        )),
    }
}

/// Splits a matrix or batch-of-matrices shape into `(batch, rows, cols)`.
fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [r, c] => Ok((1, *r, *c)),
        [b, r, c] => Ok((*b, *r, *c)),
        _ => Err(TensorError::shape(
            op,
            format!("expected a 2-D or 3-D tensor, got {shape:?}"),
        )),
    }
}

fn transpose_last2<T: Scalar>(data: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Number of recorded values.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        assert!(!self.consumed, "cannot record on a consumed tape");
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a copy of `v`'s current value as a fresh constant, cutting
    /// the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward output with respect to `v`, if `v` is
    /// a leaf that requires gradients and backward has run.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Signs of every rectifier input on the tape, in recording order.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::LeakyRelu(x, _) = node.op {
                sig.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        sig
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                pass: "forward",
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::shape(
                op,
                format!("operand shapes differ: {sa:?} vs {sb:?}"),
            ));
        }
        Ok(())
    }

    fn map_unary(
        &mut self,
        x: Var,
        op: Op<T>,
        f: impl Fn(T) -> T,
    ) -> Result<Var, TensorError> {
        let src = self.value(x);
        let out = Tensor::new(src.shape(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(out, op, &[x])
    }

    fn zip_binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, op, &[a, b])
    }

    /// 2-D cross-correlation with zero padding (no kernel flip).
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be positive"));
        }
        let (xs, ks, bs) = (
            self.value(input).shape(),
            self.value(kernel).shape(),
            self.value(bias).shape(),
        );
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (xs, ks) else {
            return Err(TensorError::shape(
                OP,
                format!("expected input [N,Cin,H,W] and kernel [Cout,Cin,kh,kw], got {xs:?} and {ks:?}"),
            ));
        };
        if kcin != cin {
            return Err(TensorError::shape(
                OP,
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        if bs != [cout] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {bs:?} does not match {cout} output channels"),
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(TensorError::shape(
                OP,
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let (k, p) = (geom.patch(), geom.positions());
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut cols = vec![T::zero(); n * k * p];
        let mut out = vec![T::zero(); n * cout * p];
        for s in 0..n {
            let col = &mut cols[s * k * p..(s + 1) * k * p];
            im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], &geom, col);
            let dst = &mut out[s * cout * p..(s + 1) * cout * p];
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
            T::gemm(cout, k, p, T::one(), wt, false, col, false, T::one(), dst);
        }
        let out = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            &[input, kernel, bias],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var, TensorError> {
        self.map_unary(x, Op::LeakyRelu(x, slope), |v| {
            if v < T::zero() {
                slope * v
            } else {
                v
            }
        })
    }

    /// Bilinear upsampling of `[N, C, h, w]` to `[N, C, out_h, out_w]`.
    pub fn bilinear_upsample(
        &mut self,
        x: Var,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "bilinear_upsample";
        let shape = self.value(x).shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(TensorError::shape(OP, format!("expected [N,C,H,W], got {shape:?}")));
        };
        if out_h < h || out_w < w {
            return Err(TensorError::invalid(
                OP,
                format!("cannot downsample {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        let rows = upsample_taps::<T>(h, out_h);
        let colt = upsample_taps::<T>(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
            for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in colt.iter().enumerate() {
                    let top = wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1];
                    let bot = wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1];
                    dst[oy * out_w + ox] = wy0 * top + wy1 * bot;
                }
            }
        }
        let out = Tensor::new([n, c, out_h, out_w], out)?;
        self.push(out, Op::Upsample(x), &[x])
    }

    /// Matrix product of `[m, k] x [k, n]`, or batched `[B, m, k] x [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "matmul";
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (ba, m, k) = matrix_dims(OP, &sa)?;
        let (bb, k2, n) = matrix_dims(OP, &sb)?;
        if sa.len() != sb.len() || ba != bb || k != k2 {
            return Err(TensorError::shape(
                OP,
                format!("incompatible operands {sa:?} x {sb:?}"),
            ));
        }
        let mut out = vec![T::zero(); ba * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..],
                false,
                &db[i * k * n..],
                false,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let (b, r, c) = matrix_dims("transpose", &shape)?;
        let data = transpose_last2(self.value(x).data(), b, r, c);
        let mut out_shape = shape;
        let nd = out_shape.len();
        out_shape.swap(nd - 2, nd - 1);
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let total = v.data().iter().fold(T::zero(), |acc, &e| acc + e);
        let mean = total / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(mean), Op::Mean(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Exp(x), |v| v.exp())
    }

    /// Square root; the adjoint at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    /// Per-pixel softmax over the channel axis of `[N, C, H, W]`.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var, TensorError> {
        let data = self.channel_log_softmax(x, "softmax_channel")?;
        let out = Tensor::new(
            self.value(x).shape(),
            data.into_iter().map(|v| v.exp()).collect(),
        )?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Per-pixel log-softmax over the channel axis of `[N, C, H, W]`.
    pub fn log_softmax_channel(&mut self, x: Var) -> Result<Var, TensorError> {
        let data = self.channel_log_softmax(x, "log_softmax_channel")?;
        let out = Tensor::new(self.value(x).shape(), data)?;
        self.push(out, Op::LogSoftmax(x), &[x])
    }

    fn channel_log_softmax(&self, x: Var, op: &'static str) -> Result<Vec<T>, TensorError> {
        let v = self.value(x);
        let (n, c, hw) = nchw(op, v.shape())?;
        if c < 2 {
            return Err(TensorError::shape(op, "needs at least two channels"));
        }
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let at = |ch: usize| base + ch * hw + p;
                let max = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
                let denom = (0..c).fold(T::zero(), |acc, ch| acc + (src[at(ch)] - max).exp());
                let log_denom = denom.ln();
                for ch in 0..c {
                    out[at(ch)] = src[at(ch)] - max - log_denom;
                }
            }
        }
        Ok(out)
    }

    /// Selects, per pixel, the channel named by `labels` (length `N*H*W`),
    /// producing `[N, H, W]`.
    pub fn pick_channel(&mut self, x: Var, labels: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "pick_channel";
        let shape = self.value(x).shape().to_vec();
        let (n, c, hw) = nchw(OP, &shape)?;
        if labels.len() != n * hw {
            return Err(TensorError::shape(
                OP,
                format!("{} labels for {} pixels", labels.len(), n * hw),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::invalid(
                OP,
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let src = self.value(x).data();
        let data = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let (s, p) = (i / hw, i % hw);
                src[s * c * hw + l * hw + p]
            })
            .collect();
        let out = Tensor::new([n, shape[2], shape[3]], data)?;
        self.push(
            out,
            Op::PickChannel {
                x,
                labels: labels.to_vec(),
            },
            &[x],
        )
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.map_unary(x, Op::LogSigmoid(x), |v| {
            v.min(T::zero()) - (-v.abs()).exp().ln_1p()
        })
    }

    /// Mean over the leading axis, keeping it with extent 1.
    pub fn batch_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let n = v.shape()[0];
        let per = v.numel() / n;
        let inv = T::one() / T::from_f64(n as f64);
        let mut data = vec![T::zero(); per];
        for chunk in v.data().chunks(per) {
            for (d, &s) in data.iter_mut().zip(chunk) {
                *d += s;
            }
        }
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape = v.shape().to_vec();
        shape[0] = 1;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::BatchMean(x), &[x])
    }

    /// Populates gradients of every `requires_grad` leaf with respect to the
    /// single-element `output`, consuming the tape.
    pub fn backward(&mut self, output: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        let out_shape = self.value(output).shape();
        if self.value(output).numel() != 1 {
            return Err(TensorError::NotScalar(out_shape.to_vec()));
        }
        self.consumed = true;
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[output.0].requires_grad {
            return Ok(());
        }
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            propagate(nodes, grads, node, &g);
        }

        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            } else if let Some(buf) = g {
                if buf.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite {
                        op: "backward",
                        pass: "backward",
                    });
                }
            }
        }
        Ok(())
    }
}

/// Returns the gradient buffer of `v`, creating it zeroed, or `None` if `v`
/// does not require gradients.
fn slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl Fn(usize) -> T,
) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(i);
        }
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols,
        } => {
            let (k, p) = (geom.patch(), geom.positions());
            let cout = geom.cout;
            if let Some(db) = slot(nodes, grads, *bias) {
                for gs in g.chunks(cout * p) {
                    for (co, row) in gs.chunks(p).enumerate() {
                        db[co] += row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
            }
            if let Some(dw) = slot(nodes, grads, *kernel) {
                for s in 0..geom.n {
                    T::gemm(
                        cout,
                        p,
                        k,
                        T::one(),
                        &g[s * cout * p..],
                        false,
                        &cols[s * k * p..],
                        true,
                        T::one(),
                        dw,
                    );
                }
            }
            let wt = val(*kernel);
            if let Some(dx) = slot(nodes, grads, *input) {
                let plane = geom.cin * geom.h * geom.w;
                let mut dcols = vec![T::zero(); k * p];
                for s in 0..geom.n {
                    T::gemm(
                        k,
                        cout,
                        p,
                        T::one(),
                        wt,
                        true,
                        &g[s * cout * p..],
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(&dcols, geom, &mut dx[s * plane..(s + 1) * plane]);
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |i| {
                if xv[i] > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::LeakyRelu(x, slope) => {
            let xv = val(*x);
            let slope = *slope;
            accumulate(nodes, grads, *x, |i| {
                if xv[i] > T::zero() {
                    g[i]
                } else {
                    g[i] * slope
                }
            });
        }
        Op::Upsample(x) => {
            let [_, _, h, w] = nodes[x.0].value.shape()[..] else {
                unreachable!()
            };
            let [_, _, oh, ow] = node.value.shape()[..] else {
                unreachable!()
            };
            let rows = upsample_taps::<T>(h, oh);
            let colt = upsample_taps::<T>(w, ow);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (plane, go) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in colt.iter().enumerate() {
                            let gv = go[oy * ow + ox];
                            plane[y0 * w + x0] += gv * wy0 * wx0;
                            plane[y0 * w + x1] += gv * wy0 * wx1;
                            plane[y1 * w + x0] += gv * wy1 * wx0;
                            plane[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (batch, m, k) = matrix_dims("matmul", sa).expect("recorded shape");
            let n = sb[sb.len() - 1];
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[i * m * n..],
                        false,
                        &bv[i * k * n..],
                        true,
                        T::one(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for i in 0..batch {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av[i * m * k..],
                        true,
                        &g[i * m * n..],
                        false,
                        T::one(),
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::Transpose(x) => {
            // g has the transposed shape; transposing it back restores x's layout
            let (b, r, c) = matrix_dims("transpose", node.value.shape()).expect("recorded shape");
            let back = transpose_last2(g, b, r, c);
            accumulate(nodes, grads, *x, |i| back[i]);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, |i| g[i]),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |i| g[i]);
            accumulate(nodes, grads, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |i| g[i]);
            accumulate(nodes, grads, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |i| g[i] * bv[i]);
            accumulate(nodes, grads, *b, |i| g[i] * av[i]);
        }
        Op::Scale(x, s) => {
            let s = *s;
            accumulate(nodes, grads, *x, |i| g[i] * s);
        }
        Op::Sum(x) => accumulate(nodes, grads, *x, |_| g[0]),
        Op::Mean(x) => {
            let share = g[0] / T::from_f64(nodes[x.0].value.numel() as f64);
            accumulate(nodes, grads, *x, |_| share);
        }
        Op::Log(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |i| g[i] / xv[i]);
        }
        Op::Exp(x) => accumulate(nodes, grads, *x, |i| g[i] * y[i]),
        Op::Sqrt(x) => {
            let half = T::from_f64(0.5);
            accumulate(nodes, grads, *x, |i| {
                if y[i] > T::zero() {
                    g[i] * half / y[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::Softmax(x) => {
            let (n, c, hw) = nchw("softmax_channel", node.value.shape()).expect("recorded shape");
            if let Some(dx) = slot(nodes, grads, *x) {
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let dot = (0..c).fold(T::zero(), |acc, ch| {
                            let i = base + ch * hw + p;
                            acc + y[i] * g[i]
                        });
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            dx[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let (n, c, hw) =
                nchw("log_softmax_channel", node.value.shape()).expect("recorded shape");
            if let Some(dx) = slot(nodes, grads, *x) {
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let total = (0..c).fold(T::zero(), |acc, ch| acc + g[base + ch * hw + p]);
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            dx[i] += g[i] - y[i].exp() * total;
                        }
                    }
                }
            }
        }
        Op::PickChannel { x, labels } => {
            let (_, c, hw) = nchw("pick_channel", nodes[x.0].value.shape()).expect("recorded shape");
            if let Some(dx) = slot(nodes, grads, *x) {
                for (i, &l) in labels.iter().enumerate() {
                    let (s, p) = (i / hw, i % hw);
                    dx[s * c * hw + l * hw + p] += g[i];
                }
            }
        }
        Op::LogSigmoid(x) => {
            let xv = val(*x);
            accumulate(nodes, grads, *x, |i| g[i] * sigmoid(-xv[i]));
        }
        Op::BatchMean(x) => {
            let n = nodes[x.0].value.shape()[0];
            let per = g.len();
            let inv = T::one() / T::from_f64(n as f64);
            accumulate(nodes, grads, *x, |i| g[i % per] * inv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_kernel_gives_bias_map() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 5, 4], |i| i as f64 * 0.3 - 1.0));
        let k = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        let b = tape.constant(t(&[1], &[0.75]));
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 5, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn conv_window_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 3, 3], |i| (i + 1) as f64));
        let k = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        let err = tape.conv2d(x, k, b, 1, 1).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }));
        let big = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        assert!(tape.conv2d(x, big, b, 1, 0).is_err());
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        let l = tape.leaky_relu(x, 0.2).unwrap();
        let got = tape.value(l).data();
        assert!((got[0] + 0.4).abs() < 1e-12 && got[1] == 3.0);
    }

    #[test]
    fn relu_gradient_mask() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn upsample_half_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[0.0, 2.0]));
        let y = tape.bilinear_upsample(x, 1, 4).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.5, 2.0]);
        let same = tape.bilinear_upsample(x, 1, 2).unwrap();
        assert_eq!(tape.value(same).data(), &[0.0, 2.0]);
        let c = tape.constant(Tensor::full([2, 3, 4, 4], 1.25));
        let up = tape.bilinear_upsample(c, 16, 13).unwrap();
        assert!(tape.value(up).data().iter().all(|&v| (v - 1.25).abs() < 1e-12));
        assert!(tape.bilinear_upsample(x, 1, 1).is_err());
    }

    #[test]
    fn primitives() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let m = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[11.0]);
        let v = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 6.0]));
        let mean = tape.mean(v).unwrap();
        assert_eq!(tape.value(mean).item(), Some(3.0));
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.reshape(v, &[3]).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4, 2, 2], 0.3f64));
        let s = tape.softmax_channel(x).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = tape.constant(t(&[1, 2, 1, 1], &[0.0, 3f64.ln()]));
        let s = tape.softmax_channel(x).unwrap();
        let got = tape.value(s).data();
        assert!((got[0] - 0.25).abs() < 1e-12 && (got[1] - 0.75).abs() < 1e-12);
        let one = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.softmax_channel(one).is_err());
    }

    #[test]
    fn backward_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 4.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let m = tape.mean(sq).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.exp(x).unwrap();
        assert_eq!(tape.backward(y), Err(TensorError::NotScalar(vec![2])));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::StaleTape));
        assert_eq!(tape.exp(x), Err(TensorError::StaleTape));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        assert!(matches!(
            tape.log(x),
            Err(TensorError::NonFinite { op: "log", .. })
        ));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64([3], &[-200.0, 0.0, 200.0]).unwrap());
        let y = tape.log_sigmoid(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 200.0).abs() < 1e-3);
        assert!((v[1] + core::f32::consts::LN_2).abs() < 1e-6);
        assert!(v[2].abs() < 1e-6);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(w, c).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(p).is_none());
    }
}
