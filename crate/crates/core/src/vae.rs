//! A small MLP VAE over (PI-1, PI-2) pairs, used as the conditioning prior
//! at sampling time.

use std::fmt;

use thiserror::Error;

use crate::pimage::PersistenceImage;
use crate::rng::{self, Rng};
use crate::tensor::{Adam, ParamStore, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VaeError {
    #[error("invalid VAE config: {0}")]
    Config(String),
    #[error("input width {got}, expected {expected}")]
    Width { got: usize, expected: usize },
    #[error("empty training set")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, VaeError>;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub pi_n: usize,
    pub latent: usize,
    pub hidden: (usize, usize),
    pub kl_weight: f64,
    /// Pixels are divided by this before encoding and the decoder output is
    /// multiplied by it.
    pub pixel_scale: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { pi_n: crate::pimage::DEFAULT_RESOLUTION, latent: 32, hidden: (256, 64), kl_weight: 1.0, pixel_scale: 1.0 }
    }
}

impl VaeConfig {
    pub fn input_width(&self) -> usize {
        2 * self.pi_n * self.pi_n
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi_n == 0 || self.latent == 0 || self.hidden.0 == 0 || self.hidden.1 == 0 {
            return Err(VaeError::Config("sizes must be positive".into()));
        }
        if !(self.kl_weight >= 0.0 && self.pixel_scale > 0.0 && self.pixel_scale.is_finite()) {
            return Err(VaeError::Config("kl_weight must be >= 0 and pixel_scale > 0".into()));
        }
        Ok(())
    }

    /// Same `key = value` format as the model config.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = VaeConfig::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| VaeError::Config(format!("expected key = value: `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || VaeError::Config(format!("bad value `{v}` for `{k}`"));
            match k {
                "pi_n" => cfg.pi_n = v.parse().map_err(|_| bad())?,
                "latent" => cfg.latent = v.parse().map_err(|_| bad())?,
                "hidden1" => cfg.hidden.0 = v.parse().map_err(|_| bad())?,
                "hidden2" => cfg.hidden.1 = v.parse().map_err(|_| bad())?,
                "kl_weight" => cfg.kl_weight = v.parse().map_err(|_| bad())?,
                "pixel_scale" => cfg.pixel_scale = v.parse().map_err(|_| bad())?,
                other => return Err(VaeError::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for VaeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pi_n = {}", self.pi_n)?;
        writeln!(f, "latent = {}", self.latent)?;
        writeln!(f, "hidden1 = {}", self.hidden.0)?;
        writeln!(f, "hidden2 = {}", self.hidden.1)?;
        writeln!(f, "kl_weight = {:e}", self.kl_weight)?;
        writeln!(f, "pixel_scale = {:e}", self.pixel_scale)
    }
}

/// Layer names and `[in, out]` shapes, encoder then decoder.
fn layers(cfg: &VaeConfig) -> Vec<(&'static str, usize, usize)> {
    let (w, (h1, h2), z) = (cfg.input_width(), cfg.hidden, cfg.latent);
    vec![
        ("enc1", w, h1),
        ("enc2", h1, h2),
        ("mu", h2, z),
        ("logvar", h2, z),
        ("dec1", z, h2),
        ("dec2", h2, h1),
        ("dec3", h1, w),
    ]
}

pub struct Vae {
    config: VaeConfig,
    params: ParamStore,
}

impl fmt::Debug for Vae {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vae").field("config", &self.config).finish()
    }
}

/// Concatenated, flattened pair as one input row.
pub fn pair_row(pi1: &PersistenceImage, pi2: &PersistenceImage) -> Vec<f64> {
    pi1.pixels.iter().chain(&pi2.pixels).copied().collect()
}

/// Output of [`Vae::encode`]: both `[B, latent]`.
pub struct Posterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// `KL(N(mu, e^logvar) || N(0, 1))` summed over latent dims, averaged over rows.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let rows = mu.shape()[0] as f64;
    let terms = mu.square().add(&logvar.exp())?.sub(&logvar.add_scalar(1.0))?;
    Ok(terms.sum().scale(0.5 / rows))
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "vae-init");
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in layers(&config) {
            let std = 1.0 / (fan_in as f64).sqrt();
            let w = rng::normals(&mut r, fan_in * fan_out).into_iter().map(|v| v * std).collect();
            params.insert(format!("{name}.w"), w, &[fan_in, fan_out])?;
            params.insert(format!("{name}.b"), vec![0.0; fan_out], &[fan_out])?;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: VaeConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let fresh = Vae::new(config.clone(), 0)?;
        fresh.params.load_values(&params)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        Ok(x.linear(self.params.get(&format!("{name}.w"))?, self.params.get(&format!("{name}.b"))?)?)
    }

    /// Rows are raw (unscaled) pixel pairs, `[B, 2 n^2]`.
    pub fn encode(&self, x: &Tensor) -> Result<Posterior> {
        let w = self.config.input_width();
        if x.shape().len() != 2 || x.shape()[1] != w {
            return Err(VaeError::Width { got: x.shape().last().copied().unwrap_or(0), expected: w });
        }
        let h = self.linear(&x.scale(1.0 / self.config.pixel_scale), "enc1")?.gelu();
        let h = self.linear(&h, "enc2")?.gelu();
        Ok(Posterior { mu: self.linear(&h, "mu")?, logvar: self.linear(&h, "logvar")?.clamp(LOGVAR_MIN, LOGVAR_MAX) })
    }

    /// `[B, latent]` codes to nonnegative `[B, 2 n^2]` pixel pairs.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.latent {
            return Err(VaeError::Width { got: z.shape().last().copied().unwrap_or(0), expected: self.config.latent });
        }
        let h = self.linear(z, "dec1")?.gelu();
        let h = self.linear(&h, "dec2")?.gelu();
        Ok(self.linear(&h, "dec3")?.softplus().scale(self.config.pixel_scale))
    }

    /// Reconstruction MSE over all pixels (in scaled units) plus
    /// `kl_weight` times the mean KL.
    pub fn loss(&self, x: &Tensor, rng: &mut Rng) -> Result<(Tensor, f64, f64)> {
        let post = self.encode(x)?;
        let z = reparameterize(&post.mu, &post.logvar, rng)?;
        let recon = self.decode(&z)?;
        let s = 1.0 / self.config.pixel_scale;
        let mse = recon.scale(s).mse(&x.scale(s).detach())?;
        let kl = kl_divergence(&post.mu, &post.logvar)?;
        let (m, k) = (mse.item(), kl.item());
        Ok((mse.add(&kl.scale(self.config.kl_weight))?, m, k))
    }

    /// Decodes a prior draw into a (PI-1, PI-2) pair.
    pub fn sample_prior(&self, rng: &mut Rng) -> (PersistenceImage, PersistenceImage) {
        let z = Tensor::new(rng::normals(rng, self.config.latent), &[1, self.config.latent]).expect("latent shape");
        let out = self.decode(&z).expect("decoder shapes are fixed").to_vec();
        self.split_pair(&out)
    }

    pub fn split_pair(&self, row: &[f64]) -> (PersistenceImage, PersistenceImage) {
        let n2 = self.config.pi_n * self.config.pi_n;
        let mut a = PersistenceImage::zeros(self.config.pi_n, 1);
        let mut b = PersistenceImage::zeros(self.config.pi_n, 2);
        a.pixels.copy_from_slice(&row[..n2]);
        b.pixels.copy_from_slice(&row[n2..2 * n2]);
        (a, b)
    }
}

/// `z = mu + exp(logvar / 2) * eta`, differentiable in both inputs.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let eta = Tensor::new(rng::normals(rng, mu.numel()), mu.shape())?;
    let std = logvar.clamp(LOGVAR_MIN, LOGVAR_MAX).scale(0.5).exp();
    Ok(mu.add(&std.mul(&eta)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeTrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for VaeTrainOptions {
    fn default() -> Self {
        Self { steps: 1000, lr: 5e-3, batch: 10 }
    }
}

/// Adam on minibatches drawn with replacement. Returns the loss per step.
pub fn train(vae: &mut Vae, data: &[Vec<f64>], opts: &VaeTrainOptions, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(VaeError::Empty);
    }
    let w = vae.config.input_width();
    if let Some(row) = data.iter().find(|r| r.len() != w) {
        return Err(VaeError::Width { got: row.len(), expected: w });
    }
    let mut r = rng::stream(seed, "vae-train");
    let adam = Adam::new(opts.lr);
    let batch = opts.batch.clamp(1, data.len());
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let rows: Vec<f64> = (0..batch).flat_map(|_| data[rng::uniform_int(&mut r, 0, data.len() - 1)].clone()).collect();
        let x = Tensor::new(rows, &[batch, w])?;
        vae.params.zero_grad();
        let (loss, _, _) = vae.loss(&x, &mut r)?;
        loss.backward()?;
        vae.params.adam_step(&adam)?;
        losses.push(loss.item());
    }
    Ok(losses)
}

/// Largest pixel over a training set, for [`VaeConfig::pixel_scale`].
pub fn pixel_scale(data: &[Vec<f64>]) -> f64 {
    let m = data.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}
