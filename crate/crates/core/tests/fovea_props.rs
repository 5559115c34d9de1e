use apr_core::fovea::{build_grid, build_uniform_grid, pixel_center, sample, warp, Image, WARP_MAX};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(h, w, c);
    for v in &mut img.data {
        *v = rng.random();
    }
    img
}

#[test]
fn radial_profile_strictly_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut radii: Vec<f64> = (0..10_000).map(|_| rng.random_range(1e-6..2f64.sqrt())).collect();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let prof = |r: f64| r * (r + 1.0).ln();
    for w in radii.windows(2) {
        assert!(prof(w[1]) > prof(w[0]));
    }
}

#[test]
fn grid_containment_and_bound() {
    let g = build_grid(64).unwrap();
    assert_eq!(g.coords.len(), 4096);
    assert!(g.coords.iter().all(|&(a, b)| a.abs() <= WARP_MAX && b.abs() <= WARP_MAX));
}

#[test]
fn small_radius_is_quadratic() {
    for r in [1e-2, 1e-3, 1e-4] {
        let (a, _) = warp(r, 0.0);
        assert!((a / (r * r) - 1.0).abs() < r, "r = {r}: {a}");
    }
}

#[test]
fn centre_quarter_gets_more_than_quarter_of_output() {
    // central 25% of source area is the square |u|,|v| < 0.5
    let n = 64;
    let g = build_grid(n).unwrap();
    let inside = g.coords.iter().filter(|&&(a, b)| a.abs() < 0.5 && b.abs() < 0.5).count();
    assert!(inside * 4 > n * n, "{inside} of {}", n * n);
    let u = build_uniform_grid(n).unwrap();
    let uniform = u.coords.iter().filter(|&&(a, b)| a.abs() < 0.5 && b.abs() < 0.5).count();
    assert_eq!(uniform * 4, n * n);
}

#[test]
fn dihedral_equivariance() {
    let src = random_image(40, 40, 3, 2);
    let grid = build_grid(16).unwrap();
    let base = sample(&src, &grid);
    let ops: [fn(&Image) -> Image; 2] = [Image::rotate90, Image::flip_horizontal];
    // generate all 8 group elements as words in rotation and reflection
    let mut elems: Vec<Vec<usize>> = vec![vec![]];
    for r in 0..4 {
        for f in 0..2 {
            let mut word = vec![0; r];
            word.extend(std::iter::repeat_n(1, f));
            elems.push(word);
        }
    }
    for word in elems {
        let apply = |img: &Image| word.iter().fold(img.clone(), |acc, &k| ops[k](&acc));
        let lhs = sample(&apply(&src), &grid);
        let rhs = apply(&base);
        let err = lhs.data.iter().zip(&rhs.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-5, "word {word:?}: {err}");
    }
}

#[test]
fn output_values_stay_in_unit_range() {
    let src = random_image(33, 47, 4, 3);
    let out = sample(&src, &build_grid(20).unwrap());
    assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pixel_centres_symmetric() {
    for n in [2, 3, 64, 257] {
        for i in 0..n {
            assert!((pixel_center(i, n) + pixel_center(n - 1 - i, n)).abs() < 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn warp_contained(u in -1.0f64..=1.0, v in -1.0f64..=1.0) {
        let (a, b) = warp(u, v);
        prop_assert!(a.abs() <= WARP_MAX + 1e-15 && b.abs() <= WARP_MAX + 1e-15);
        prop_assert!(a.abs() <= u.abs() && b.abs() <= v.abs());
    }
}
