//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so creation order is a valid topological
//! order and [`Graph::backward`] is a single reverse sweep that visits each
//! node once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ConvTGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel statistics computed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    AddChannelBias { x: Var, b: Var },
    Concat { inputs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<f64>, train: bool },
    MatMul(Var, Var),
    Reshape(Var),
    PadReplicate { x: Var },
    UpsampleNearest2(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// The tape. Confined to one thread of control.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `(outer, channels, inner)` view of a rank ≥ 2 shape split at axis 1.
fn split_axis1(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need rank ≥ 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are only kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- convolution -------------------------------------------------------

    /// Stride-1 cross-correlation with `pad` zeros on every border.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(w).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels (axis 1) {cin} != kernel input channels (axis 1) {wcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel extents {kh}×{kw} must be odd")));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("spatial axes (2,3) {h}×{wd} with pad {pad} smaller than kernel {kh}×{kw}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} != [{cout}] (kernel axis 0)", self.shape(b)),
                ));
            }
        }
        let g = ConvGeom { cin, cout, h, w: wd, kh, kw, pad };
        let (oh, ow) = (g.out_h(), g.out_w());
        let wf = kernels::to_f64(self.value(w).data());
        let bf = b.map(|b| kernels::to_f64(self.value(b).data()));
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut cols = Vec::new();
        let xv = self.value(x);
        for s in 0..n {
            kernels::conv2d_sample(
                xv.sample(s),
                &wf,
                bf.as_deref(),
                &g,
                &mut cols,
                &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow],
            );
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, &inputs))
    }

    /// Transposed convolution, kernel `[Cin, Cout, k, k]`, no padding.
    /// Output extent is `(H − 1)·stride + k`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d_transpose")?;
        let (wcin, cout, kh, kw) = self.value(w).dims4("conv2d_transpose")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("input channels (axis 1) {cin} != kernel axis 0 {wcin}"),
            ));
        }
        if kh != kw || stride == 0 {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("need square kernel and stride > 0, got {kh}×{kw} stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d_transpose",
                    format!("bias shape {:?} != [{cout}]", self.shape(b)),
                ));
            }
        }
        let g = ConvTGeom { cin, cout, h, w: wd, k: kh, stride };
        let (oh, ow) = (g.out_h(), g.out_w());
        let wf = kernels::to_f64(self.value(w).data());
        let bf = b.map(|b| kernels::to_f64(self.value(b).data()));
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let xv = self.value(x);
        for s in 0..n {
            kernels::conv_t_sample(
                xv.sample(s),
                &wf,
                bf.as_deref(),
                &g,
                &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow],
            );
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvT2d { x, w, b, stride }, &inputs))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let cs = T::from_f64(c);
        let value = self.value(x).map(|v| v * cs);
        self.push(value, Op::MulScalar(x, c), &[x])
    }

    /// Adds `b[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, c, inner) = split_axis1("add_channel_bias", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} vs channel axis {c}", self.shape(b)),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        let d = value.data_mut();
        for o in 0..outer {
            for (ci, &bc) in bv.iter().enumerate() {
                for v in &mut d[(o * c + ci) * inner..(o * c + ci + 1) * inner] {
                    *v = *v + bc;
                }
            }
        }
        Ok(self.push(value, Op::AddChannelBias { x, b }, &[x, b]))
    }

    // ---- shape -------------------------------------------------------------

    /// Concatenates along the channel axis (axis 1).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis1("concat", &base)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} differ outside channel axis 1"),
                ));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = base;
        shape[1] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, inputs))
    }

    /// Channels `start..start+len` of axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = split_axis1("slice_channels", &shape)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} outside channel axis of {c}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * c + start) * inner..(o * c + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Replicates the last row/column so that H and W become even.
    pub fn pad_to_even(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pad_to_even")?;
        let (h2, w2) = (h + h % 2, w + w % 2);
        if (h2, w2) == (h, w) {
            return Ok(x);
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * h2 * w2);
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h2 {
                let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
                data.extend_from_slice(row);
                if w2 > w {
                    data.push(row[w - 1]);
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], data)?;
        Ok(self.push(value, Op::PadReplicate { x }, &[x]))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest2")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * 4 * h * w);
        for p in 0..n * c {
            for y in 0..2 * h {
                let row = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                for &v in row {
                    data.push(v);
                    data.push(v);
                }
            }
        }
        let value = Tensor::new(vec![n, c, 2 * h, 2 * w], data)?;
        Ok(self.push(value, Op::UpsampleNearest2(x), &[x]))
    }

    // ---- activations -------------------------------------------------------

    /// `max(x, 0)`; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Softmax over axis 1 at every remaining position.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = split_axis1("softmax", &shape)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |ci: usize| (o * c + ci) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for ci in 0..c {
                    m = m.max(src[idx(ci)].as_f64());
                }
                let mut z = 0.0;
                let mut e = vec![0.0f64; c];
                for (ci, ev) in e.iter_mut().enumerate() {
                    *ev = (src[idx(ci)].as_f64() - m).exp();
                    z += *ev;
                }
                for (ci, ev) in e.iter().enumerate() {
                    data[idx(ci)] = T::from_f64(ev / z);
                }
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Log(x), &[x])
    }

    /// `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let m = T::from_f64(min);
        let value = self.value(x).map(|v| if v > m { v } else { m });
        self.push(value, Op::ClampMin(x, min), &[x])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum_f64() / t.len() as f64;
        self.push(Tensor::scalar(T::from_f64(s)), Op::Mean(x), &[x])
    }

    fn check_even(op: &'static str, h: usize, w: usize) -> Result<()> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(op, format!("spatial axes (2,3) {h}×{w} must be even")));
        }
        Ok(())
    }

    /// 2×2 max pooling, stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2")?;
        Self::check_even("max_pool2", h, w)?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// 2×2 average pooling, stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("avg_pool2")?;
        Self::check_even("avg_pool2", h, w)?;
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = base + 2 * oy * w + 2 * ox;
                    let s = src[i].as_f64()
                        + src[i + 1].as_f64()
                        + src[i + w].as_f64()
                        + src[i + w + 1].as_f64();
                    data.push(T::from_f64(0.25 * s));
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], data)?;
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    /// `N×C×H×W → N×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let src = self.value(x).data();
        let hw = h * w;
        let data = (0..n * c)
            .map(|p| {
                let s: f64 = src[p * hw..(p + 1) * hw].iter().map(|v| v.as_f64()).sum();
                T::from_f64(s / hw as f64)
            })
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    // ---- normalization -----------------------------------------------------

    /// Batch normalization over every axis except 1.
    ///
    /// In train mode the batch statistics (biased variance) are used and
    /// returned so the caller can fold them into its running estimates. In
    /// eval mode `running` supplies the statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: (&[f64], &[f64]),
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = split_axis1("batch_norm", &shape)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?} vs channel axis {c}", self.shape(v)),
                ));
            }
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length != channels"));
        }
        let src = self.value(x).data();
        let g = kernels::to_f64(self.value(gamma).data());
        let b = kernels::to_f64(self.value(beta).data());
        let m = (outer * inner) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for o in 0..outer {
                        s += src[(o * c + ci) * inner..(o * c + ci + 1) * inner]
                            .iter()
                            .map(|v| v.as_f64())
                            .sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for o in 0..outer {
                        q += src[(o * c + ci) * inner..(o * c + ci + 1) * inner]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ci] = mu;
                    var[ci] = q / m;
                }
                (mean, var)
            }
            Mode::Eval => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for ci in 0..c {
                let r = (o * c + ci) * inner..(o * c + ci + 1) * inner;
                for i in r {
                    let xh = (src[i].as_f64() - mean[ci]) * inv_std[ci];
                    xhat[i] = T::from_f64(xh);
                    out[i] = T::from_f64(g[ci] * xh + b[ci]);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let train = mode == Mode::Train;
        let var_node = self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            &[x, gamma, beta],
        );
        Ok((var_node, train.then_some(BatchStats { mean, var })))
    }

    // ---- dense -------------------------------------------------------------

    /// `[M,K] · [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} · {sb:?}: need rank 2 with lhs axis 1 == rhs axis 0"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let af = kernels::to_f64(self.value(a).data());
        let bf = kernels::to_f64(self.value(b).data());
        let mut acc = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, &af, &bf, &mut acc);
        let value = Tensor::new(vec![m, n], acc.into_iter().map(T::from_f64).collect())?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf with
    /// `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                let gt: Vec<T> = gy.iter().map(|&v| T::from_f64(v)).collect();
                match &mut node.grad {
                    Some(g) => {
                        for (a, b) in g.data_mut().iter_mut().zip(&gt) {
                            *a = *a + *b;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), gt)?),
                }
                continue;
            }
            for (input, g) in self.local_grads(id, &gy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn local_grads(&self, id: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, pad } => {
                let xv = val(*x);
                let wv = val(*w);
                let (n, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (cout, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
                let g = ConvGeom { cin, cout, h, w: wd, kh, kw, pad: *pad };
                let wf = kernels::to_f64(wv.data());
                let per_out = out.len() / n;
                let per_in = cin * h * wd;
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let want_b = b.map(|b| self.wants(b)).unwrap_or(false);
                let mut dx = want_x.then(|| vec![0.0; xv.len()]);
                let mut dw = want_w.then(|| vec![0.0; wv.len()]);
                let mut db = want_b.then(|| vec![0.0; cout]);
                let mut cols = Vec::new();
                for s in 0..n {
                    kernels::conv2d_sample_backward(
                        xv.sample(s),
                        &wf,
                        &gy[s * per_out..(s + 1) * per_out],
                        &g,
                        &mut cols,
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                        dx.as_mut().map(|d| &mut d[s * per_in..(s + 1) * per_in]),
                    );
                }
                let mut res = Vec::new();
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                if let Some(dw) = dw {
                    res.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    res.push((*b, db));
                }
                res
            }
            Op::ConvT2d { x, w, b, stride } => {
                let xv = val(*x);
                let wv = val(*w);
                let (n, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (cout, k) = (wv.shape()[1], wv.shape()[2]);
                let g = ConvTGeom { cin, cout, h, w: wd, k, stride: *stride };
                let wf = kernels::to_f64(wv.data());
                let per_out = out.len() / n;
                let per_in = cin * h * wd;
                let want_b = b.map(|b| self.wants(b)).unwrap_or(false);
                let mut dx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; wv.len()]);
                let mut db = want_b.then(|| vec![0.0; cout]);
                for s in 0..n {
                    kernels::conv_t_sample_backward(
                        xv.sample(s),
                        &wf,
                        &gy[s * per_out..(s + 1) * per_out],
                        &g,
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                        dx.as_mut().map(|d| &mut d[s * per_in..(s + 1) * per_in]),
                    );
                }
                let mut res = Vec::new();
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                if let Some(dw) = dw {
                    res.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    res.push((*b, db));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, gy.iter().zip(bv).map(|(g, y)| g * y.as_f64()).collect()),
                    (*b, gy.iter().zip(av).map(|(g, x)| g * x.as_f64()).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, gy.iter().zip(bv).map(|(g, y)| g / y.as_f64()).collect()),
                    (
                        *b,
                        gy.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(g, (x, y))| {
                                let (x, y) = (x.as_f64(), y.as_f64());
                                -g * x / (y * y)
                            })
                            .collect(),
                    ),
                ]
            }
            Op::AddScalar(x) => vec![(*x, gy.to_vec())],
            Op::MulScalar(x, c) => vec![(*x, gy.iter().map(|g| g * c).collect())],
            Op::AddChannelBias { x, b } => {
                let (outer, c, inner) = split_axis1("add_channel_bias", out.shape()).unwrap();
                let mut db = vec![0.0; c];
                for o in 0..outer {
                    for (ci, d) in db.iter_mut().enumerate() {
                        *d += gy[(o * c + ci) * inner..(o * c + ci + 1) * inner].iter().sum::<f64>();
                    }
                }
                vec![(*x, gy.to_vec()), (*b, db)]
            }
            Op::Concat { inputs } => {
                let (outer, total, inner) = split_axis1("concat", out.shape()).unwrap();
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &v in inputs {
                    let c = val(v).shape()[1];
                    let mut g = Vec::with_capacity(outer * c * inner);
                    for o in 0..outer {
                        g.extend_from_slice(&gy[(o * total + offset) * inner..(o * total + offset + c) * inner]);
                    }
                    offset += c;
                    res.push((v, g));
                }
                res
            }
            Op::SliceChannels { x, start } => {
                let (outer, c, inner) = split_axis1("slice_channels", val(*x).shape()).unwrap();
                let len = out.shape()[1];
                let mut g = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    g[(o * c + start) * inner..(o * c + start + len) * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, g)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            Op::PadReplicate { x } => {
                let s = val(*x).shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (h2, w2) = (out.shape()[2], out.shape()[3]);
                let mut g = vec![0.0; val(*x).len()];
                for p in 0..nc {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            g[p * h * w + y.min(h - 1) * w + xx.min(w - 1)] += gy[(p * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::UpsampleNearest2(x) => {
                let s = val(*x).shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut g = vec![0.0; val(*x).len()];
                for p in 0..nc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            g[(p * h + y / 2) * w + xx / 2] += gy[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                vec![(
                    *x,
                    gy.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > T::zero() { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Sigmoid(x) => vec![(
                *x,
                gy.iter()
                    .zip(out.data())
                    .map(|(g, s)| {
                        let s = s.as_f64();
                        g * s * (1.0 - s)
                    })
                    .collect(),
            )],
            Op::Softmax(x) => {
                let (outer, c, inner) = split_axis1("softmax", out.shape()).unwrap();
                let y = out.data();
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |ci: usize| (o * c + ci) * inner + i;
                        let dotp: f64 = (0..c).map(|ci| gy[idx(ci)] * y[idx(ci)].as_f64()).sum();
                        for ci in 0..c {
                            g[idx(ci)] = y[idx(ci)].as_f64() * (gy[idx(ci)] - dotp);
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::Log(x) => vec![(
                *x,
                gy.iter().zip(val(*x).data()).map(|(g, v)| g / v.as_f64()).collect(),
            )],
            Op::ClampMin(x, min) => vec![(
                *x,
                gy.iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| if v.as_f64() > *min { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Sum(x) => vec![(*x, vec![gy[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![gy[0] / n as f64; n])]
            }
            Op::MaxPool2 { x, argmax } => {
                let mut g = vec![0.0; val(*x).len()];
                for (gv, &i) in gy.iter().zip(argmax) {
                    g[i as usize] += gv;
                }
                vec![(*x, g)]
            }
            Op::AvgPool2(x) => {
                let s = val(*x).shape();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut g = vec![0.0; val(*x).len()];
                for p in 0..nc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = 0.25 * gy[(p * oh + oy) * ow + ox];
                            let i = p * h * w + 2 * oy * w + 2 * ox;
                            g[i] += v;
                            g[i + 1] += v;
                            g[i + w] += v;
                            g[i + w + 1] += v;
                        }
                    }
                }
                vec![(*x, g)]
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let mut g = vec![0.0; val(*x).len()];
                for (p, gv) in gy.iter().enumerate() {
                    g[p * hw..(p + 1) * hw].fill(gv / hw as f64);
                }
                vec![(*x, g)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (outer, c, inner) = split_axis1("batch_norm", out.shape()).unwrap();
                let gam = kernels::to_f64(val(*gamma).data());
                let m = (outer * inner) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for o in 0..outer {
                    for ci in 0..c {
                        for i in (o * c + ci) * inner..(o * c + ci + 1) * inner {
                            dgamma[ci] += gy[i] * xhat[i].as_f64();
                            dbeta[ci] += gy[i];
                        }
                    }
                }
                let mut dx = vec![0.0; gy.len()];
                for o in 0..outer {
                    for ci in 0..c {
                        let k = gam[ci] * inv_std[ci];
                        for i in (o * c + ci) * inner..(o * c + ci + 1) * inner {
                            dx[i] = if *train {
                                k * (gy[i] - dbeta[ci] / m - xhat[i].as_f64() * dgamma[ci] / m)
                            } else {
                                k * gy[i]
                            };
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let af = kernels::to_f64(av.data());
                let bf = kernels::to_f64(bv.data());
                let mut res = Vec::new();
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, gy, &bf, &mut da);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(m, k, n, &af, gy, &mut db);
                    res.push((*b, db));
                }
                res
            }
        }
    }

    /// Activation pattern of every non-smooth primitive: the sign of each
    /// ReLU/clamp input and the winner of every max-pool window. Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => sig.extend(
                    self.value(*x).data().iter().map(|v| (*v > T::zero()) as u32),
                ),
                Op::ClampMin(x, m) => sig.extend(
                    self.value(*x).data().iter().map(|v| (v.as_f64() > *m) as u32),
                ),
                Op::MaxPool2 { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }
}
