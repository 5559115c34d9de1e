//! conv2d against a direct nested-loop implementation.

use apr_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    k: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (o, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                    * k[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn run_conv(x: Tensor<f64>, k: Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let kv = g.constant(k);
    let y = g.conv2d(xv, kv, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn identity_kernel_returns_input() {
    let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let k = Tensor::full(vec![1, 1, 1, 1], 1.0);
    assert_eq!(run_conv(x.clone(), k, 1, 0), x);
}

#[test]
fn all_ones_three_by_three_sums_to_nine() {
    let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let k = Tensor::full(vec![1, 1, 3, 3], 1.0);
    let y = run_conv(x, k, 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

#[test]
fn strided_padded_case_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xd: Vec<f64> = (0..2 * 25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kd: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (want, oh, ow) = naive_conv(&xd, &kd, (1, 2, 5, 5), (3, 3, 3), 2, 1);
    let y = run_conv(
        Tensor::new(vec![1, 2, 5, 5], xd).unwrap(),
        Tensor::new(vec![3, 2, 3, 3], kd).unwrap(),
        2,
        1,
    );
    assert_eq!(y.shape(), &[1, 3, oh, ow]);
    assert_eq!((oh, ow), (3, 3));
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn oversized_kernel_names_dimensions() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    let k = g.constant(Tensor::zeros(vec![1, 1, 5, 5]));
    let err = g.conv2d(x, k, 1, 0).unwrap_err().to_string();
    assert!(err.contains("5x5"), "{err}");
    let k2 = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    let err = g.conv2d(x, k2, 1, 0).unwrap_err().to_string();
    assert!(err.contains("channels"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn conv2d_equals_loop_oracle(
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..8, w in 3usize..8, kh in 1usize..4, kw in 1usize..4,
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xd: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kd: Vec<f64> = (0..o * c * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (want, oh, ow) = naive_conv(&xd, &kd, (n, c, h, w), (o, kh, kw), stride, pad);
        let y = run_conv(
            Tensor::new(vec![n, c, h, w], xd).unwrap(),
            Tensor::new(vec![o, c, kh, kw], kd).unwrap(),
            stride,
            pad,
        );
        prop_assert_eq!(y.shape(), &[n, o, oh, ow][..]);
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
