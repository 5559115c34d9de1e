//! Parameterised layers built on [`Graph`] ops.

use rand::Rng;

use crate::{Graph, ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};

fn uniform<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn lecun_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in.max(1) as f64).sqrt()
}

/// Multiply every weight of a layer by `factor` (used to start output layers small).
pub fn rescale<T: Real>(store: &mut ParamStore<T>, id: ParamId, factor: f64) {
    let f = T::from_f64(factor);
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= f);
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform(vec![in_dim, out_dim], lecun_bound(in_dim), rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            uniform(vec![out_ch, in_ch, kernel, kernel], lecun_bound(fan_in), rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// "Same" convolution: stride 1, padding `kernel / 2`.
    pub fn same<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, kernel, 1, kernel / 2, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_bias(y, b)
    }
}

/// Transposed convolution with bias, kernel layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel / (stride * stride)).max(1);
        let w = store.add(
            format!("{name}.w"),
            uniform(vec![in_ch, out_ch, kernel, kernel], lecun_bound(fan_in), rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv_transpose2d(x, w, self.stride, self.pad)?;
        g.add_bias(y, b)
    }
}

/// One step of a convolutional LSTM.
///
/// `kernel: [4 * hidden, in + hidden, k, k]` produces the input, forget,
/// output and candidate gates (in that channel order) from `[input, hidden]`.
pub fn conv_lstm_cell<T: Real>(
    g: &mut Graph<T>,
    input: Var,
    hidden: Var,
    cell: Var,
    kernel: Var,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let (si, sh, sc) = (g.shape(input).to_vec(), g.shape(hidden).to_vec(), g.shape(cell).to_vec());
    if si.len() != 4 || sh.len() != 4 || si[2..] != sh[2..] || si[0] != sh[0] {
        return Err(TensorError::Shape(format!(
            "conv_lstm_cell: input {si:?} and hidden {sh:?} differ in batch or spatial size"
        )));
    }
    if sc != sh {
        return Err(TensorError::Shape(format!(
            "conv_lstm_cell: cell {sc:?} does not match hidden {sh:?}"
        )));
    }
    let hid = sh[1];
    let k = g.shape(kernel).to_vec();
    if k.len() != 4 || k[0] != 4 * hid || k[2] != k[3] || k[2] % 2 == 0 {
        return Err(TensorError::Shape(format!(
            "conv_lstm_cell: kernel {k:?} must be [4*{hid}, C, k, k] with odd k"
        )));
    }
    let xh = g.concat(&[input, hidden])?;
    let mut z = g.conv2d(xh, kernel, 1, k[2] / 2)?;
    if let Some(b) = bias {
        z = g.add_bias(z, b)?;
    }
    let zi = g.narrow(z, 0, hid)?;
    let zf = g.narrow(z, hid, hid)?;
    let zo = g.narrow(z, 2 * hid, hid)?;
    let zc = g.narrow(z, 3 * hid, hid)?;
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let o = g.sigmoid(zo);
    let cand = g.tanh(zc);
    let keep = g.mul(f, cell)?;
    let write = g.mul(i, cand)?;
    let cell_next = g.add(keep, write)?;
    let squashed = g.tanh(cell_next);
    let hidden_next = g.mul(o, squashed)?;
    Ok((hidden_next, cell_next))
}

/// Convolutional LSTM layer owning its gate kernel.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub gates: Conv2d,
    pub hidden: usize,
}

impl ConvLstm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let gates = Conv2d::same(store, name, in_ch + hidden, 4 * hidden, kernel, rng);
        // forget-gate bias starts at 1
        let b = store.get_mut(gates.b).data_mut();
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        ConvLstm { gates, hidden }
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
        hidden: Var,
        cell: Var,
    ) -> Result<(Var, Var)> {
        let k = g.param(store, self.gates.w);
        let b = g.param(store, self.gates.b);
        conv_lstm_cell(g, input, hidden, cell, k, Some(b))
    }
}
