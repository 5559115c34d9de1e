use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::tensor::numel;
use crate::{ParamId, ParamStore, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Square,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Unary, Var),
    Clamp { x: Var, lo: T, hi: T },
    Matmul(Var, Var),
    AddBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, geom: ConvGeom },
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize, len: usize },
    Tile { x: Var, h: usize, w: usize },
    Reshape(Var),
    SumAll(Var),
    SumRows(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Operation tape. Nodes are appended in creation order, which is a valid
/// topological order; backward walks it once in reverse.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(TensorError::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used for gradient checks on inputs).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bring a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.id(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(
            store.get(id).clone(),
            Op::Param,
            true,
        );
        self.params.insert(key, v);
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{op}: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_with(a, b, Op::Minimum(a, b), |x, y| if y < x { y } else { x }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::Tanh => |v| v.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |v| if v > T::zero() { v } else { T::zero() },
            Unary::Softplus => softplus,
            Unary::Square => |v| v * v,
        };
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: lhs {sa:?} vs rhs {sb:?} (inner dims must agree)"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Add a per-channel bias `[C]` to `[N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias);
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return shape_err(format!("add_bias: input {sx:?} vs bias {sb:?} (bias must be [C])"));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(sx, data)?, Op::AddBias { x, bias }, rg))
    }

    /// 2-D convolution, zero padding. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return shape_err(format!("conv2d: input {sx:?} and kernel {sw:?} must both be rank 4"));
        }
        if sx[1] != sw[1] {
            return shape_err(format!(
                "conv2d: input channels {} (input {sx:?}) != kernel channels {} (kernel {sw:?})",
                sx[1], sw[1]
            ));
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad).ok_or_else(|| {
            TensorError::Shape(format!(
                "conv2d: kernel {}x{} exceeds padded input {}x{} (pad {pad}, stride {stride})",
                sw[2],
                sw[3],
                sx[2] + 2 * pad,
                sx[3] + 2 * pad
            ))
        })?;
        let out = conv::conv_forward(self.value(x).data(), self.value(w).data(), sx[0], sw[0], &geom);
        let t = Tensor::new(vec![sx[0], sw[0], geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, rg))
    }

    /// Transposed convolution (upsampling). `x: [N, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`,
    /// output side `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return shape_err(format!(
                "conv_transpose2d: input {sx:?} vs kernel {sw:?} (input channels must equal kernel dim 0)"
            ));
        }
        if stride == 0 || (sx[2] - 1) * stride + sw[2] <= 2 * pad || (sx[3] - 1) * stride + sw[3] <= 2 * pad {
            return shape_err(format!("conv_transpose2d: padding {pad} leaves an empty output"));
        }
        let oh = (sx[2] - 1) * stride + sw[2] - 2 * pad;
        let ow = (sx[3] - 1) * stride + sw[3] - 2 * pad;
        let geom = ConvGeom::new(sw[1], oh, ow, sw[2], sw[3], stride, pad)
            .filter(|g| g.out_h == sx[2] && g.out_w == sx[3])
            .ok_or_else(|| TensorError::Shape(format!("conv_transpose2d: inconsistent geometry for {sx:?}")))?;
        let out = conv::conv_t_forward(self.value(x).data(), self.value(w).data(), sx[0], sx[1], &geom);
        let t = Tensor::new(vec![sx[0], sw[1], oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::ConvT2d { x, w, geom }, rg))
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat: no inputs".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return shape_err(format!("concat: inputs must have rank >= 2, got {s0:?}"));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return shape_err(format!("concat: input {s:?} incompatible with {s0:?} off axis 1"));
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let batch = s0[0];
        let mut data = Vec::with_capacity(batch * channels * inner);
        for n in 0..batch {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[n * per..(n + 1) * per]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Slice `len` entries starting at `start` along axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return shape_err(format!("narrow: [{start}, {}) outside axis 1 of {s:?}", start + len));
        }
        let inner: usize = s[2..].iter().product();
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for n in 0..s[0] {
            let base = n * s[1] * inner;
            data.extend_from_slice(&v[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow { x, start, len }, rg))
    }

    /// Give a `[N, F]` vector spatial extent: `[N, F, h, w]`.
    pub fn tile(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("tile: expected [N, F], got {s:?}"));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(s[0] * s[1] * hw);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat_n(v, hw));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[0], s[1], h, w], data)?, Op::Tile { x, h, w }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s.first().copied().unwrap_or(1);
        let rest = numel(s) / n.max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return shape_err("sum_rows: scalar input".into());
        }
        let inner: usize = s[1..].iter().product();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![s[0]], data)?, Op::SumRows(x), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let grads = crate::graph::backward::run(self, loss);
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<(u64, usize), Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients for `store`; parameters not reached by the loss get zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                match self
                    .params
                    .get(&(store.id(), i))
                    .and_then(|&v| self.wrt(v))
                {
                    Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(t.shape().to_vec()),
                }
            })
            .collect()
    }
}

/// L2 norm over a list of gradient tensors.
pub fn grad_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

mod backward;
