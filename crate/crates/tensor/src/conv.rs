//! Convolution kernels over NCHW buffers, lowered to GEMM via im2col.

use crate::Real;

/// Spatial geometry of a 2-D convolution (one sample, one direction).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh > in_h + 2 * pad || kw > in_w + 2 * pad {
            return None;
        }
        Some(ConvGeom {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
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

/// Scatter-add columns back into an image buffer (adjoint of `im2col`).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W * im2col(x[n])`. `w` is `[O, C, kh, kw]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_sz = g.channels * g.in_h * g.in_w;
    let out_sz = out_ch * g.col_cols();
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let src: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        T::gemm(
            out_ch,
            g.col_rows(),
            g.col_cols(),
            w,
            false,
            src,
            false,
            T::zero(),
            &mut out[n * out_sz..(n + 1) * out_sz],
        );
    }
    out
}

/// Gradients of `conv_forward` w.r.t. input and kernel.
pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    out_ch: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = g.channels * g.in_h * g.in_w;
    let out_sz = out_ch * g.col_cols();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let dn = &dout[n * out_sz..(n + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            let src: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            T::gemm(out_ch, g.col_cols(), g.col_rows(), dn, false, src, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(g.col_rows(), out_ch, g.col_cols(), w, true, dn, false, T::zero(), dxn);
            } else {
                T::gemm(g.col_rows(), out_ch, g.col_cols(), w, true, dn, false, T::zero(), &mut cols);
                col2im(&cols, g, dxn);
            }
        }
    }
    (dx, dw)
}

/// Transposed convolution. `w` is `[Cin, Cout, kh, kw]`; `g` describes the
/// *adjoint* convolution, i.e. `g.channels == Cout`, `g.in_* ` is the output
/// size and `g.out_*` is the input size.
pub(crate) fn conv_t_forward<T: Real>(
    x: &[T],
    w: &[T],
    batch: usize,
    in_ch: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_sz = in_ch * g.col_cols();
    let out_sz = g.channels * g.in_h * g.in_w;
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        T::gemm(g.col_rows(), in_ch, g.col_cols(), w, true, xn, false, T::zero(), &mut cols);
        col2im(&cols, g, &mut out[n * out_sz..(n + 1) * out_sz]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_t_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    batch: usize,
    in_ch: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = in_ch * g.col_cols();
    let out_sz = g.channels * g.in_h * g.in_w;
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_sz]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..batch {
        im2col(&dout[n * out_sz..(n + 1) * out_sz], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                in_ch,
                g.col_rows(),
                g.col_cols(),
                w,
                false,
                &cols,
                false,
                T::zero(),
                &mut dx[n * in_sz..(n + 1) * in_sz],
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            T::gemm(in_ch, g.col_cols(), g.col_rows(), xn, false, &cols, true, T::one(), dw);
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 5, 4, 3, 2, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| ((i * 3) % 13) as f64 * 0.25)
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn oversized_kernel_rejected() {
        assert!(ConvGeom::new(1, 3, 3, 4, 1, 1, 0).is_none());
        assert!(ConvGeom::new(1, 3, 3, 4, 1, 1, 1).is_some());
    }
}
