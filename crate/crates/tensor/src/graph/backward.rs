use super::{sigmoid, Graph, Op, Unary, Var};
use crate::conv;
use crate::Real;

fn accumulate<T: Real>(g: &Graph<T>, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    if !g.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn is_leaf<T>(op: &Op<T>) -> bool {
    matches!(op, Op::Leaf | Op::Param)
}

pub(super) fn run<T: Real>(g: &Graph<T>, loss: Var) -> Vec<Option<Vec<T>>> {
    let mut grads: Vec<Option<Vec<T>>> = (0..g.nodes.len()).map(|_| None).collect();
    if !g.nodes[loss.0].requires_grad {
        return grads;
    }
    grads[loss.0] = Some(vec![T::one()]);
    for i in (0..=loss.0).rev() {
        let node = &g.nodes[i];
        if !node.requires_grad || is_leaf(&node.op) {
            continue;
        }
        let Some(gy) = grads[i].take() else { continue };
        let val = |v: Var| g.nodes[v.0].value.data();
        let rg = |v: Var| g.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Add(a, b) => {
                if rg(*b) {
                    accumulate(g, &mut grads, *b, gy.clone());
                }
                accumulate(g, &mut grads, *a, gy);
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    accumulate(g, &mut grads, *b, gy.iter().map(|&d| -d).collect());
                }
                accumulate(g, &mut grads, *a, gy);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let d = gy.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect();
                    accumulate(g, &mut grads, *a, d);
                }
                if rg(*b) {
                    let d = gy.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect();
                    accumulate(g, &mut grads, *b, d);
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    let d = gy
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&d, (&x, &y))| if y < x { T::zero() } else { d })
                        .collect();
                    accumulate(g, &mut grads, *a, d);
                }
                if rg(*b) {
                    let d = gy
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&d, (&x, &y))| if y < x { d } else { T::zero() })
                        .collect();
                    accumulate(g, &mut grads, *b, d);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(g, &mut grads, *x, gy.iter().map(|&d| d * c).collect());
            }
            Op::AddScalar(x) => accumulate(g, &mut grads, *x, gy),
            Op::Unary(kind, x) => {
                let xs = val(*x);
                let ys = node.value.data();
                let two = T::from_f64(2.0);
                let d: Vec<T> = match kind {
                    Unary::Exp => gy.iter().zip(ys).map(|(&d, &y)| d * y).collect(),
                    Unary::Log => gy.iter().zip(xs).map(|(&d, &x)| d / x).collect(),
                    Unary::Tanh => gy.iter().zip(ys).map(|(&d, &y)| d * (T::one() - y * y)).collect(),
                    Unary::Sigmoid => gy.iter().zip(ys).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
                    Unary::Relu => gy
                        .iter()
                        .zip(xs)
                        .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                        .collect(),
                    Unary::Softplus => gy.iter().zip(xs).map(|(&d, &x)| d * sigmoid(x)).collect(),
                    Unary::Square => gy.iter().zip(xs).map(|(&d, &x)| d * two * x).collect(),
                };
                accumulate(g, &mut grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = gy
                    .iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| if v >= *lo && v <= *hi { d } else { T::zero() })
                    .collect();
                accumulate(g, &mut grads, *x, d);
            }
            Op::Matmul(a, b) => {
                let sa = g.nodes[a.0].value.shape();
                let sb = g.nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &gy, false, val(*b), true, T::zero(), &mut da);
                    accumulate(g, &mut grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, val(*a), true, &gy, false, T::zero(), &mut db);
                    accumulate(g, &mut grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                if rg(*bias) {
                    let s = node.value.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in gy.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().copied().sum();
                    }
                    accumulate(g, &mut grads, *bias, db);
                }
                accumulate(g, &mut grads, *x, gy);
            }
            Op::Conv2d { x, w, geom } => {
                let batch = g.nodes[x.0].value.shape()[0];
                let out_ch = g.nodes[w.0].value.shape()[0];
                let (dx, dw) =
                    conv::conv_backward(val(*x), val(*w), &gy, batch, out_ch, geom, rg(*x), rg(*w));
                if let Some(dx) = dx {
                    accumulate(g, &mut grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(g, &mut grads, *w, dw);
                }
            }
            Op::ConvT2d { x, w, geom } => {
                let sx = g.nodes[x.0].value.shape();
                let (dx, dw) =
                    conv::conv_t_backward(val(*x), val(*w), &gy, sx[0], sx[1], geom, rg(*x), rg(*w));
                if let Some(dx) = dx {
                    accumulate(g, &mut grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(g, &mut grads, *w, dw);
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let total = s[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let per = g.nodes[p.0].value.shape()[1] * inner;
                    if rg(p) {
                        let mut d = Vec::with_capacity(s[0] * per);
                        for n in 0..s[0] {
                            d.extend_from_slice(&gy[n * total + offset..n * total + offset + per]);
                        }
                        accumulate(g, &mut grads, p, d);
                    }
                    offset += per;
                }
            }
            Op::Narrow { x, start, len } => {
                let s = g.nodes[x.0].value.shape();
                let inner: usize = s[2..].iter().product();
                let mut d = vec![T::zero(); s.iter().product()];
                for n in 0..s[0] {
                    let base = n * s[1] * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gy[n * len * inner..(n + 1) * len * inner]);
                }
                accumulate(g, &mut grads, *x, d);
            }
            Op::Tile { x, h, w } => {
                let d = gy.chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                accumulate(g, &mut grads, *x, d);
            }
            Op::Reshape(x) => accumulate(g, &mut grads, *x, gy),
            Op::SumAll(x) => {
                let n = g.nodes[x.0].value.numel();
                accumulate(g, &mut grads, *x, vec![gy[0]; n]);
            }
            Op::SumRows(x) => {
                let n = g.nodes[x.0].value.numel();
                let inner = n / gy.len().max(1);
                let d = gy.iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect();
                accumulate(g, &mut grads, *x, d);
            }
        }
    }
    grads
}
