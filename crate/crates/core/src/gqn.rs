//! Generative scene representation: a convolutional tower encodes each view
//! (image + head joints v + gripper pose g) into a spatial code, the codes are
//! summed into `r`, and a DRAW-style ConvLSTM generator predicts a query view
//! from `r` and the query proprioception.

use apr_tensor::dist::{gaussian_kl, gaussian_nll_fixed, reparam_sample, standard_normal};
use apr_tensor::nn::{Conv2d, ConvLstm, ConvTranspose2d};
use apr_tensor::{Graph, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fovea::Image;
use crate::{CoreError, Result};

pub const V_DIM: usize = 6;
pub const G_DIM: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GqnConfig {
    pub image_size: usize,
    /// 3 (RGB) or 4 (RGB + target mask).
    pub image_channels: usize,
    /// Channels of `r` and of the wide tower layers.
    pub r_channels: usize,
    /// Channels of the narrow tower layers.
    pub tower_mid: usize,
    pub hidden: usize,
    pub latent: usize,
    pub steps: usize,
    pub lstm_kernel: usize,
    pub condition_on_g: bool,
    pub sigma_start: f64,
    pub sigma_end: f64,
    pub sigma_anneal_steps: usize,
}

impl Default for GqnConfig {
    fn default() -> Self {
        // reference widths 256 / 128 / 128 / 64 divided by 4
        GqnConfig {
            image_size: 64,
            image_channels: 3,
            r_channels: 64,
            tower_mid: 32,
            hidden: 32,
            latent: 16,
            steps: 12,
            lstm_kernel: 5,
            condition_on_g: false,
            sigma_start: 2.0,
            sigma_end: 0.7,
            sigma_anneal_steps: 100_000,
        }
    }
}

impl GqnConfig {
    pub fn rep_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(format!("gqn.{m}")));
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return bad(format!("image_size must be a multiple of 4 and >= 8, got {}", self.image_size));
        }
        if !(3..=4).contains(&self.image_channels) {
            return bad(format!("image_channels must be 3 or 4, got {}", self.image_channels));
        }
        if self.lstm_kernel % 2 == 0 {
            return bad("lstm_kernel must be odd".into());
        }
        if [self.r_channels, self.tower_mid, self.hidden, self.latent, self.steps].contains(&0) {
            return bad("widths and steps must be positive".into());
        }
        if self.sigma_start <= 0.0 || self.sigma_end <= 0.0 {
            return bad("sigma_start/sigma_end must be positive".into());
        }
        Ok(())
    }

    /// Observation std after `step` updates (linear anneal).
    pub fn sigma_at(&self, step: usize) -> f64 {
        if self.sigma_anneal_steps == 0 {
            return self.sigma_end;
        }
        let frac = (1.0 - step as f64 / self.sigma_anneal_steps as f64).max(0.0);
        self.sigma_end + (self.sigma_start - self.sigma_end) * frac
    }

    fn query_dim(&self) -> usize {
        if self.condition_on_g {
            V_DIM + G_DIM
        } else {
            V_DIM
        }
    }
}

/// One observation as fed to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalInput {
    pub image: Image,
    pub v: [f64; V_DIM],
    pub g: [f64; G_DIM],
}

impl MultimodalInput {
    pub fn validate(&self, cfg: &GqnConfig) -> Result<()> {
        let im = &self.image;
        if im.height != cfg.image_size || im.width != cfg.image_size || im.channels != cfg.image_channels {
            return Err(CoreError::Shape(format!(
                "view image {}x{}x{} but the model expects {s}x{s}x{}",
                im.height,
                im.width,
                im.channels,
                cfg.image_channels,
                s = cfg.image_size
            )));
        }
        for k in 0..3 {
            let (s, c) = (self.g[3 + 2 * k], self.g[4 + 2 * k]);
            if ((s * s + c * c) - 1.0).abs() > 1e-6 {
                return Err(CoreError::Shape(format!("gripper pose pair {k} ({s}, {c}) is not on the unit circle")));
            }
        }
        Ok(())
    }
}

/// A batch of views, one per scene: images `[B, C, S, S]`, v `[B, 6]`, g `[B, 9]`.
#[derive(Clone, Debug)]
pub struct ViewBatch<T> {
    pub images: Tensor<T>,
    pub v: Tensor<T>,
    pub g: Tensor<T>,
}

impl<T: Real> ViewBatch<T> {
    pub fn from_inputs(views: &[&MultimodalInput]) -> Result<Self> {
        let first = views.first().ok_or_else(|| CoreError::Shape("empty view batch".into()))?;
        let (c, h, w) = (first.image.channels, first.image.height, first.image.width);
        let mut img = Vec::with_capacity(views.len() * c * h * w);
        let mut v = Vec::with_capacity(views.len() * V_DIM);
        let mut g = Vec::with_capacity(views.len() * G_DIM);
        for view in views {
            if (view.image.channels, view.image.height, view.image.width) != (c, h, w) {
                return Err(CoreError::Shape("views in a batch differ in image shape".into()));
            }
            img.extend(view.image.data.iter().map(|&x| T::from_f64(x as f64)));
            v.extend(view.v.iter().map(|&x| T::from_f64(x)));
            g.extend(view.g.iter().map(|&x| T::from_f64(x)));
        }
        let b = views.len();
        Ok(ViewBatch {
            images: Tensor::new(vec![b, c, h, w], img)?,
            v: Tensor::new(vec![b, V_DIM], v)?,
            g: Tensor::new(vec![b, G_DIM], g)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Seven convolutions with two residual skips; v and g enter at 1/4 resolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    c5: Conv2d,
    c6: Conv2d,
    c7: Conv2d,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &GqnConfig, rng: &mut impl Rng) -> Self {
        let (c, r, m) = (cfg.image_channels, cfg.r_channels, cfg.tower_mid);
        let p = V_DIM + G_DIM;
        Encoder {
            c1: Conv2d::new(store, "enc.c1", c, r, 2, 2, 0, rng),
            c2: Conv2d::new(store, "enc.c2", r, r, 2, 2, 0, rng),
            c3: Conv2d::same(store, "enc.c3", r, m, 3, rng),
            c4: Conv2d::new(store, "enc.c4", m, r, 2, 2, 0, rng),
            c5: Conv2d::same(store, "enc.c5", r + p, r, 3, rng),
            c6: Conv2d::same(store, "enc.c6", r + p, m, 3, rng),
            c7: Conv2d::same(store, "enc.c7", m, r, 3, rng),
        }
    }

    /// Per-view representation `[B, r_channels, S/4, S/4]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, view: &ViewBatch<T>) -> Result<Var> {
        let x = g.constant(view.images.clone());
        let pose = Tensor::new(
            vec![view.batch(), V_DIM + G_DIM],
            view.v
                .data()
                .chunks(V_DIM)
                .zip(view.g.data().chunks(G_DIM))
                .flat_map(|(a, b)| a.iter().chain(b).copied())
                .collect(),
        )?;
        let pose = g.constant(pose);
        let h = self.c1.forward(g, store, x)?;
        let h = g.relu(h);
        let skip = self.c2.forward(g, store, h)?;
        let skip = g.relu(skip);
        let y = self.c3.forward(g, store, h)?;
        let y = g.relu(y);
        let y = self.c4.forward(g, store, y)?;
        let y = g.relu(y);
        let y = g.add(y, skip)?;
        let s = g.shape(y)[2];
        let tiled = g.tile(pose, s, s)?;
        let y = g.concat(&[y, tiled])?;
        let skip = self.c5.forward(g, store, y)?;
        let skip = g.relu(skip);
        let y = self.c6.forward(g, store, y)?;
        let y = g.relu(y);
        let y = self.c7.forward(g, store, y)?;
        let y = g.relu(y);
        Ok(g.add(y, skip)?)
    }
}

/// Sum per-view codes in ascending view-id order, so the result does not
/// depend on the order the views were supplied in.
pub fn aggregate<T: Real>(g: &mut Graph<T>, views: &[(u64, Var)]) -> Result<Var> {
    if views.is_empty() {
        return Err(CoreError::Shape("aggregate of zero views".into()));
    }
    let mut sorted = views.to_vec();
    sorted.sort_by_key(|(id, _)| *id);
    let mut acc = sorted[0].1;
    for &(_, v) in &sorted[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Value-level scene representation (outside any graph).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRep<T> {
    pub r: Tensor<T>,
    pub n_views: usize,
}

impl<T: Real> SceneRep<T> {
    pub fn aggregate(reps: &[Tensor<T>]) -> Result<Self> {
        let first = reps.first().ok_or_else(|| CoreError::Shape("aggregate of zero views".into()))?;
        let mut r = first.clone();
        for t in &reps[1..] {
            if t.shape() != first.shape() {
                return Err(CoreError::Shape(format!("aggregate: {:?} vs {:?}", t.shape(), first.shape())));
            }
            r.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b);
        }
        Ok(SceneRep { r, n_views: reps.len() })
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    down: Conv2d,
    inference: ConvLstm,
    generation: ConvLstm,
    posterior: Conv2d,
    prior: Conv2d,
    write: ConvTranspose2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMode {
    Sample,
    Mean,
}

/// Graph handles of the ELBO pieces (all batch-averaged scalars except `mean`).
pub struct ElboTerms {
    pub loss: Var,
    pub kl: Var,
    pub nll: Var,
    /// Predicted image `[B, C, S, S]` (sigmoid of the final canvas).
    pub mean: Var,
}

impl Generator {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &GqnConfig, rng: &mut impl Rng) -> Self {
        let (c, r, h, z, k) = (cfg.image_channels, cfg.r_channels, cfg.hidden, cfg.latent, cfg.lstm_kernel);
        let q = cfg.query_dim();
        let post = Conv2d::same(store, "gen.posterior", h, 2 * z, k, rng);
        let prior = Conv2d::same(store, "gen.prior", h, 2 * z, k, rng);
        apr_tensor::nn::rescale(store, post.w, 0.1);
        apr_tensor::nn::rescale(store, prior.w, 0.1);
        Generator {
            down: Conv2d::new(store, "gen.down", c, h, 4, 4, 0, rng),
            inference: ConvLstm::new(store, "gen.inference", h + h + q + r, h, k, rng),
            generation: ConvLstm::new(store, "gen.generation", z + q + r, h, k, rng),
            posterior: post,
            prior,
            write: ConvTranspose2d::new(store, "gen.write", h, c, 4, 4, 0, rng),
        }
    }

    fn query_pose<T: Real>(&self, g: &mut Graph<T>, cfg: &GqnConfig, v: &Tensor<T>, gp: &Tensor<T>) -> Result<Var> {
        let b = v.shape()[0];
        let data: Vec<T> = if cfg.condition_on_g {
            v.data()
                .chunks(V_DIM)
                .zip(gp.data().chunks(G_DIM))
                .flat_map(|(a, c)| a.iter().chain(c).copied())
                .collect()
        } else {
            v.data().to_vec()
        };
        let t = g.constant(Tensor::new(vec![b, cfg.query_dim()], data)?);
        let s = cfg.rep_size();
        Ok(g.tile(t, s, s)?)
    }

    fn split<T: Real>(g: &mut Graph<T>, stats: Var, z: usize) -> Result<(Var, Var)> {
        let mu = g.narrow(stats, 0, z)?;
        let ls = g.narrow(stats, z, z)?;
        Ok((mu, g.clamp(ls, -8.0, 4.0)))
    }

    /// Sample (or take the mean of) the prior at every step and decode.
    #[allow(clippy::too_many_arguments)]
    pub fn generate<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &GqnConfig,
        r: Var,
        query_v: &Tensor<T>,
        query_g: &Tensor<T>,
        mode: GenMode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let b = query_v.shape()[0];
        let s = cfg.rep_size();
        let n = cfg.image_size;
        let qp = self.query_pose(g, cfg, query_v, query_g)?;
        let mut h = g.constant(Tensor::zeros(vec![b, cfg.hidden, s, s]));
        let mut c = h;
        let mut canvas = g.constant(Tensor::zeros(vec![b, cfg.image_channels, n, n]));
        for _ in 0..cfg.steps {
            let stats = self.prior.forward(g, store, h)?;
            let (mu, ls) = Self::split(g, stats, cfg.latent)?;
            let z = match mode {
                GenMode::Mean => mu,
                GenMode::Sample => reparam_sample(g, mu, ls, standard_normal(&[b, cfg.latent, s, s], rng))?,
            };
            let input = g.concat(&[z, qp, r])?;
            (h, c) = self.generation.step(g, store, input, h, c)?;
            let delta = self.write.forward(g, store, h)?;
            canvas = g.add(canvas, delta)?;
        }
        Ok(g.sigmoid(canvas))
    }

    /// Negative ELBO for `query` given the aggregated context code `r`.
    /// `noise[l]` is the standard-normal draw used at step `l`.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &GqnConfig,
        r: Var,
        query: &ViewBatch<T>,
        sigma: f64,
        noise: &[Tensor<T>],
    ) -> Result<ElboTerms> {
        let b = query.batch();
        let s = cfg.rep_size();
        let n = cfg.image_size;
        if query.images.shape() != [b, cfg.image_channels, n, n] {
            return Err(CoreError::Shape(format!(
                "query images {:?} do not match the model ({} channels at {n}x{n}); mask mode mismatch?",
                query.images.shape(),
                cfg.image_channels
            )));
        }
        if noise.len() != cfg.steps {
            return Err(CoreError::Shape(format!("need {} noise tensors, got {}", cfg.steps, noise.len())));
        }
        let x = g.constant(query.images.clone());
        let xd = self.down.forward(g, store, x)?;
        let qp = self.query_pose(g, cfg, &query.v, &query.g)?;
        let zero = g.constant(Tensor::zeros(vec![b, cfg.hidden, s, s]));
        let (mut hg, mut cg, mut he, mut ce) = (zero, zero, zero, zero);
        let mut canvas = g.constant(Tensor::zeros(vec![b, cfg.image_channels, n, n]));
        let mut kl_total: Option<Var> = None;
        for eps in noise {
            let prior_stats = self.prior.forward(g, store, hg)?;
            let (mu_p, ls_p) = Self::split(g, prior_stats, cfg.latent)?;
            let inf_in = g.concat(&[hg, xd, qp, r])?;
            (he, ce) = self.inference.step(g, store, inf_in, he, ce)?;
            let post_stats = self.posterior.forward(g, store, he)?;
            let (mu_q, ls_q) = Self::split(g, post_stats, cfg.latent)?;
            let z = reparam_sample(g, mu_q, ls_q, eps.clone())?;
            let kl = gaussian_kl(g, mu_q, ls_q, mu_p, ls_p)?;
            let kl = g.sum(kl);
            kl_total = Some(match kl_total {
                Some(acc) => g.add(acc, kl)?,
                None => kl,
            });
            let gen_in = g.concat(&[z, qp, r])?;
            (hg, cg) = self.generation.step(g, store, gen_in, hg, cg)?;
            let delta = self.write.forward(g, store, hg)?;
            canvas = g.add(canvas, delta)?;
        }
        let mean = g.sigmoid(canvas);
        let nll = gaussian_nll_fixed(g, x, mean, sigma)?;
        let nll = g.sum(nll);
        let inv_b = 1.0 / b as f64;
        let nll = g.scale(nll, inv_b);
        let kl = g.scale(kl_total.expect("steps > 0"), inv_b);
        let loss = g.add(kl, nll)?;
        Ok(ElboTerms { loss, kl, nll, mean })
    }

    pub fn noise<T: Real>(cfg: &GqnConfig, batch: usize, rng: &mut impl Rng) -> Vec<Tensor<T>> {
        let s = cfg.rep_size();
        (0..cfg.steps)
            .map(|_| standard_normal(&[batch, cfg.latent, s, s], rng))
            .collect()
    }
}

/// Encoder and generator with separate parameter stores, so encoder gradients
/// can be inspected (and isolated) on their own.
#[derive(Clone, Debug)]
pub struct Gqn<T: Real> {
    pub cfg: GqnConfig,
    pub encoder: Encoder,
    pub generator: Generator,
    pub enc_params: ParamStore<T>,
    pub gen_params: ParamStore<T>,
}

impl<T: Real> Gqn<T> {
    pub fn new(cfg: GqnConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut enc_params = ParamStore::new();
        let mut gen_params = ParamStore::new();
        let encoder = Encoder::new(&mut enc_params, &cfg, rng);
        let generator = Generator::new(&mut gen_params, &cfg, rng);
        Ok(Gqn {
            cfg,
            encoder,
            generator,
            enc_params,
            gen_params,
        })
    }

    /// Encode each context batch and sum; context `k` carries view id `k`.
    pub fn represent(&self, g: &mut Graph<T>, context: &[ViewBatch<T>]) -> Result<Var> {
        let mut codes = Vec::with_capacity(context.len());
        for (k, view) in context.iter().enumerate() {
            codes.push((k as u64, self.encoder.forward(g, &self.enc_params, view)?));
        }
        aggregate(g, &codes)
    }

    /// Full negative ELBO for a batch of scenes.
    pub fn elbo_loss(
        &self,
        g: &mut Graph<T>,
        context: &[ViewBatch<T>],
        query: &ViewBatch<T>,
        sigma: f64,
        noise: &[Tensor<T>],
    ) -> Result<ElboTerms> {
        if context.is_empty() {
            return Err(CoreError::Shape("elbo needs at least one context view".into()));
        }
        let r = self.represent(g, context)?;
        self.generator.elbo(g, &self.gen_params, &self.cfg, r, query, sigma, noise)
    }

    pub fn generate(&self, r: &Tensor<T>, query_v: &Tensor<T>, query_g: &Tensor<T>, mode: GenMode, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let rv = g.constant(r.clone());
        let out = self.generator.generate(&mut g, &self.gen_params, &self.cfg, rv, query_v, query_g, mode, rng)?;
        Ok(g.value(out).clone())
    }

    /// Value-level encoding of single views (no gradients).
    pub fn encode(&self, view: &MultimodalInput) -> Result<Tensor<T>> {
        view.validate(&self.cfg)?;
        let batch = ViewBatch::from_inputs(&[view])?;
        let mut g = Graph::new();
        let r = self.encoder.forward(&mut g, &self.enc_params, &batch)?;
        Ok(g.value(r).clone())
    }
}
