//! Analytic gradients vs central finite differences for every differentiable op.

use apr_tensor::dist::{gaussian_kl, gaussian_log_prob, gaussian_nll_fixed, reparam_sample};
use apr_tensor::gradcheck::{max_rel_error, numeric_gradient, rel_error_norm};
use apr_tensor::nn::conv_lstm_cell;
use apr_tensor::{Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build<T> = dyn Fn(&mut Graph<T>, &[Var]) -> Var;

fn rand_tensor<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::from_f64(rng.random_range(lo..hi))).collect(),
    )
    .unwrap()
}

/// Keep values away from the origin so kinks (relu, |x|) are never straddled.
fn away_from_zero<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| {
                let m = rng.random_range(0.1..1.5);
                T::from_f64(if rng.random_bool(0.5) { m } else { -m })
            })
            .collect(),
    )
    .unwrap()
}

/// Loss = sum(out * w) with a fixed random `w`, so every output entry matters.
fn scalar_loss<T: Real>(g: &mut Graph<T>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor::<T>(&shape, -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

/// `floor = None` switches to the whole-vector norm metric.
fn check_op<T: Real>(name: &str, inputs: &[Tensor<T>], build: &Build<T>, h: f64, floor: impl Into<Option<f64>>) -> f64 {
    let floor = floor.into();
    let seed = 0xC0FFEE;
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves);
    let loss = scalar_loss(&mut g, out, seed);
    let grads = g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<T> = match grads.wrt(leaves[i]) {
            Some(gr) => gr.to_vec(),
            None => vec![T::zero(); input.numel()],
        };
        let numeric = numeric_gradient(
            |x: &[T]| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == i {
                            g.leaf(Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            g.leaf(t.clone())
                        }
                    })
                    .collect();
                let out = build(&mut g, &vars);
                let l = scalar_loss(&mut g, out, seed);
                g.value(l).item()
            },
            input.data(),
            h,
        );
        let err = match floor {
            Some(f) => max_rel_error(&analytic, &numeric, f),
            None => rel_error_norm(&analytic, &numeric),
        };
        worst = worst.max(err);
    }
    assert!(worst.is_finite(), "{name}: non-finite error");
    worst
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

const F64_TOL: f64 = 1e-6;
const F64_H: f64 = 1e-6;
const F64_FLOOR: f64 = 1e-6;

fn elementwise_ops() -> Vec<(&'static str, usize, Box<Build<f64>>, bool)> {
    // (name, arity, builder, needs positive input)
    vec![
        ("add", 2, Box::new(|g, v| g.add(v[0], v[1]).unwrap()), false),
        ("sub", 2, Box::new(|g, v| g.sub(v[0], v[1]).unwrap()), false),
        ("mul", 2, Box::new(|g, v| g.mul(v[0], v[1]).unwrap()), false),
        ("scale", 1, Box::new(|g, v| g.scale(v[0], -1.7)), false),
        ("add_scalar", 1, Box::new(|g, v| g.add_scalar(v[0], 0.3)), false),
        ("exp", 1, Box::new(|g, v| g.exp(v[0])), false),
        ("log", 1, Box::new(|g, v| g.log(v[0])), true),
        ("tanh", 1, Box::new(|g, v| g.tanh(v[0])), false),
        ("sigmoid", 1, Box::new(|g, v| g.sigmoid(v[0])), false),
        ("relu", 1, Box::new(|g, v| g.relu(v[0])), false),
        ("softplus", 1, Box::new(|g, v| g.softplus(v[0])), false),
        ("square", 1, Box::new(|g, v| g.square(v[0])), false),
        ("clamp", 1, Box::new(|g, v| g.clamp(v[0], -0.8, 0.7)), false),
        ("sum", 1, Box::new(|g, v| g.sum(v[0])), false),
        ("mean", 1, Box::new(|g, v| g.mean(v[0])), false),
        ("sum_rows", 1, Box::new(|g, v| g.sum_rows(v[0]).unwrap()), false),
    ]
}

#[test]
fn elementwise_ops_match_finite_differences_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cases = 0;
    for (name, arity, build, positive) in elementwise_ops() {
        for _ in 0..8 {
            let rank = rng.random_range(1..=4);
            let shape = random_shape(&mut rng, rank);
            let inputs: Vec<Tensor<f64>> = (0..arity)
                .map(|_| {
                    if positive {
                        rand_tensor(&shape, 0.2, 2.0, &mut rng)
                    } else {
                        away_from_zero(&shape, &mut rng)
                    }
                })
                .collect();
            let err = check_op(name, &inputs, build.as_ref(), F64_H, F64_FLOOR);
            assert!(err < F64_TOL, "{name} shape {shape:?}: rel err {err:e}");
            cases += 1;
        }
    }
    assert!(cases >= 100);
}

#[test]
fn minimum_routes_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let shape = random_shape(&mut rng, 2);
        let a: Tensor<f64> = rand_tensor(&shape, -1.0, 1.0, &mut rng);
        // b differs from a by at least 0.05 everywhere
        let b = a.map(|x| if x > 0.0 { x - 0.3 } else { x + 0.3 });
        let err = check_op("minimum", &[a, b], &|g, v| g.minimum(v[0], v[1]).unwrap(), F64_H, F64_FLOOR);
        assert!(err < F64_TOL, "minimum: {err:e}");
    }
}

#[test]
fn structural_ops_match_finite_differences_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let a = rand_tensor::<f64>(&[m, k], -1.0, 1.0, &mut rng);
        let b = rand_tensor::<f64>(&[k, n], -1.0, 1.0, &mut rng);
        let err = check_op("matmul", &[a, b], &|g, v| g.matmul(v[0], v[1]).unwrap(), F64_H, F64_FLOOR);
        assert!(err < F64_TOL, "matmul {m}x{k}x{n}: {err:e}");

        let (bn, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor::<f64>(&[bn, c, h, w], -1.0, 1.0, &mut rng);
        let bias = rand_tensor::<f64>(&[c], -1.0, 1.0, &mut rng);
        let err = check_op("add_bias", &[x.clone(), bias], &|g, v| g.add_bias(v[0], v[1]).unwrap(), F64_H, F64_FLOOR);
        assert!(err < F64_TOL, "add_bias: {err:e}");

        let y = rand_tensor::<f64>(&[bn, c + 1, h, w], -1.0, 1.0, &mut rng);
        let err = check_op("concat", &[x.clone(), y], &|g, v| g.concat(&[v[0], v[1]]).unwrap(), F64_H, F64_FLOOR);
        assert!(err < F64_TOL, "concat: {err:e}");

        let start = rng.random_range(0..c);
        let len = rng.random_range(1..=c - start);
        let err = check_op("narrow", &[x.clone()], &move |g, v| g.narrow(v[0], start, len).unwrap(), F64_H, F64_FLOOR);
        assert!(err < F64_TOL, "narrow: {err:e}");

        let err = check_op("reshape", &[x.clone()], &|g, v| g.flatten(v[0]).unwrap(), F64_H, F64_FLOOR);
        assert!(err < F64_TOL, "reshape: {err:e}");

        let vecs = rand_tensor::<f64>(&[bn, c], -1.0, 1.0, &mut rng);
        let err = check_op("tile", &[vecs], &move |g, v| g.tile(v[0], h, w).unwrap(), F64_H, F64_FLOOR);
        assert!(err < F64_TOL, "tile: {err:e}");
    }
}

#[test]
fn convolutions_match_finite_differences_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..12 {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let h = rng.random_range(k.max(2)..6);
        let w = rng.random_range(k.max(2)..6);
        let x = rand_tensor::<f64>(&[n, c, h, w], -1.0, 1.0, &mut rng);
        let kern = rand_tensor::<f64>(&[o, c, k, k], -1.0, 1.0, &mut rng);
        let err = check_op(
            "conv2d",
            &[x, kern],
            &move |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap(),
            F64_H,
            F64_FLOOR,
        );
        assert!(err < F64_TOL, "conv2d: {err:e}");

        let xt = rand_tensor::<f64>(&[n, c, h, w], -1.0, 1.0, &mut rng);
        let kt = rand_tensor::<f64>(&[c, o, k + 1, k + 1], -1.0, 1.0, &mut rng);
        let tpad = pad.min(k / 2);
        let err = check_op(
            "conv_transpose2d",
            &[xt, kt],
            &move |g, v| g.conv_transpose2d(v[0], v[1], stride, tpad).unwrap(),
            F64_H,
            F64_FLOOR,
        );
        assert!(err < F64_TOL, "conv_transpose2d: {err:e}");
    }
}

#[test]
fn composite_ops_match_finite_differences_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..6 {
        let shape = random_shape(&mut rng, 2);
        let t = |rng: &mut ChaCha8Rng| rand_tensor::<f64>(&shape, -1.0, 1.0, rng);
        let err = check_op(
            "gaussian_kl",
            &[t(&mut rng), t(&mut rng), t(&mut rng), t(&mut rng)],
            &|g, v| gaussian_kl(g, v[0], v[1], v[2], v[3]).unwrap(),
            F64_H,
            F64_FLOOR,
        );
        assert!(err < F64_TOL, "kl: {err:e}");
        let err = check_op(
            "gaussian_log_prob",
            &[t(&mut rng), t(&mut rng), t(&mut rng)],
            &|g, v| gaussian_log_prob(g, v[0], v[1], v[2]).unwrap(),
            F64_H,
            F64_FLOOR,
        );
        assert!(err < F64_TOL, "log_prob: {err:e}");
        let err = check_op(
            "gaussian_nll_fixed",
            &[t(&mut rng), t(&mut rng)],
            &|g, v| gaussian_nll_fixed(g, v[0], v[1], 0.6).unwrap(),
            F64_H,
            F64_FLOOR,
        );
        assert!(err < F64_TOL, "nll: {err:e}");
        let eps = t(&mut rng);
        let err = check_op(
            "reparam_sample",
            &[t(&mut rng), t(&mut rng)],
            &move |g, v| reparam_sample(g, v[0], v[1], eps.clone()).unwrap(),
            F64_H,
            F64_FLOOR,
        );
        assert!(err < F64_TOL, "reparam: {err:e}");
    }
}

#[test]
fn conv_lstm_cell_matches_finite_differences_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..4 {
        let (n, ci, hid, s) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..4));
        let inputs = vec![
            rand_tensor::<f64>(&[n, ci, s, s], -1.0, 1.0, &mut rng),
            rand_tensor::<f64>(&[n, hid, s, s], -1.0, 1.0, &mut rng),
            rand_tensor::<f64>(&[n, hid, s, s], -1.0, 1.0, &mut rng),
            rand_tensor::<f64>(&[4 * hid, ci + hid, 3, 3], -0.5, 0.5, &mut rng),
            rand_tensor::<f64>(&[4 * hid], -0.5, 0.5, &mut rng),
        ];
        let err = check_op(
            "conv_lstm_cell",
            &inputs,
            &|g, v| {
                let (h, c) = conv_lstm_cell(g, v[0], v[1], v[2], v[3], Some(v[4])).unwrap();
                g.concat(&[h, c]).unwrap()
            },
            F64_H,
            F64_FLOOR,
        );
        assert!(err < F64_TOL, "conv_lstm: {err:e}");
    }
}

#[test]
fn two_layer_tanh_net_f32() {
    // linear -> tanh -> linear, 32-bit, h = 1e-3, rel err < 1e-3
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor::<f32>(&[3, 4], -1.0, 1.0, &mut rng);
    let w1 = rand_tensor::<f32>(&[4, 5], -0.5, 0.5, &mut rng);
    let w2 = rand_tensor::<f32>(&[5, 2], -0.5, 0.5, &mut rng);
    let err = check_op(
        "mlp",
        &[x, w1, w2],
        &|g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.tanh(h);
            g.matmul(h, v[2]).unwrap()
        },
        1e-3,
        None,
    );
    assert!(err < 1e-3, "two-layer net (f32): {err:e}");
}

#[test]
fn square_at_three_has_gradient_six() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut store = apr_tensor::ParamStore::<f64>::new();
    let used = store.add("used", Tensor::full(vec![2], 1.5));
    let _unused = store.add("unused", Tensor::full(vec![3], 2.0));
    let mut g = Graph::new();
    let p = g.param(&store, used);
    let s = g.square(p);
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap().for_store(&store);
    assert_eq!(grads[0].data(), &[3.0, 3.0]);
    assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::zeros(vec![2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor::<f32>(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
        let k = rand_tensor::<f32>(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let kv = g.leaf(k);
        let y = g.conv2d(xv, kv, 1, 1).unwrap();
        let y = g.tanh(y);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let bits: Vec<u32> = grads.wrt(kv).unwrap().iter().map(|v| v.to_bits()).collect();
        bits
    };
    assert_eq!(run(), run());
}
