//! Diagonal Gaussian helpers expressed as graph ops.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Graph, Real, Result, Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `mu + exp(log_std) * eps`, with `eps` supplied by the caller.
pub fn reparam_sample<T: Real>(
    g: &mut Graph<T>,
    mu: Var,
    log_std: Var,
    eps: Tensor<T>,
) -> Result<Var> {
    let eps = g.constant(eps);
    let std = g.exp(log_std);
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// Elementwise `KL(N(mu_q, s_q) || N(mu_p, s_p))` for log-std parameterised Gaussians.
pub fn gaussian_kl<T: Real>(
    g: &mut Graph<T>,
    mu_q: Var,
    log_std_q: Var,
    mu_p: Var,
    log_std_p: Var,
) -> Result<Var> {
    // (lp - lq) + 0.5 exp(2 (lq - lp)) + 0.5 (mu_q - mu_p)^2 exp(-2 lp) - 0.5
    let dl = g.sub(log_std_p, log_std_q)?;
    let ratio = g.scale(dl, -2.0);
    let ratio = g.exp(ratio);
    let ratio = g.scale(ratio, 0.5);
    let dm = g.sub(mu_q, mu_p)?;
    let dm2 = g.square(dm);
    let inv_var_p = g.scale(log_std_p, -2.0);
    let inv_var_p = g.exp(inv_var_p);
    let maha = g.mul(dm2, inv_var_p)?;
    let maha = g.scale(maha, 0.5);
    let kl = g.add(dl, ratio)?;
    let kl = g.add(kl, maha)?;
    Ok(g.add_scalar(kl, -0.5))
}

/// Elementwise `log N(x; mu, exp(log_std))`.
pub fn gaussian_log_prob<T: Real>(g: &mut Graph<T>, x: Var, mu: Var, log_std: Var) -> Result<Var> {
    let d = g.sub(x, mu)?;
    let inv = g.neg(log_std);
    let inv = g.exp(inv);
    let z = g.mul(d, inv)?;
    let z2 = g.square(z);
    let z2 = g.scale(z2, -0.5);
    let lp = g.sub(z2, log_std)?;
    Ok(g.add_scalar(lp, -HALF_LN_2PI))
}

/// Elementwise negative log-likelihood of `x` under `N(mean, sigma^2)` with fixed `sigma`.
pub fn gaussian_nll_fixed<T: Real>(g: &mut Graph<T>, x: Var, mean: Var, sigma: f64) -> Result<Var> {
    let d = g.sub(x, mean)?;
    let d2 = g.square(d);
    let nll = g.scale(d2, 0.5 / (sigma * sigma));
    Ok(g.add_scalar(nll, sigma.ln() + HALF_LN_2PI))
}

/// Per-element normalisation constant of [`gaussian_nll_fixed`] (its value at `x == mean`).
pub fn gaussian_nll_constant(sigma: f64) -> f64 {
    sigma.ln() + HALF_LN_2PI
}
