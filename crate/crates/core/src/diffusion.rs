//! DDPM noise schedule, forward corruption, the simplified noise-prediction
//! loss and ancestral sampling.

use std::str::FromStr;

use thiserror::Error;

use crate::geometry::PointCloud;
use crate::model::{ModelError, TopoDiT};
use crate::pimage::PersistenceImage;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::vae::Vae;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("unknown variance mode `{0}` (expected beta or posterior)")]
    Mode(String),
    #[error("sampling produced non-finite values at step {0}")]
    Diverged(usize),
    #[error("no persistence-image source for sampling")]
    MissingPiSource,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Variance tables indexed by `t` in `[1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(DiffusionError::Schedule("no steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(DiffusionError::Timestep { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// A shorter chain over `steps` timesteps of this schedule, evenly
    /// spaced and always ending at `T`. Returns the new schedule and, for
    /// each of its steps, the original timestep fed to the model.
    pub fn respaced(&self, steps: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(DiffusionError::Schedule(format!("cannot respace {total} steps to {steps}")));
        }
        let ts: Vec<usize> = (1..=steps).map(|i| (i * total).div_ceil(steps)).collect();
        let mut prev = 1.0;
        let betas = ts
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t);
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok((NoiseSchedule::from_betas(betas)?, ts))
    }
}

/// Betas linear from `beta_1` to `beta_t` inclusive.
pub fn linear_schedule(steps: usize, beta_1: f64, beta_t: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(DiffusionError::Schedule("T must be at least 1".into()));
    }
    if !(beta_1 > 0.0 && beta_t < 1.0 && beta_1 <= beta_t) {
        return Err(DiffusionError::Schedule(format!("endpoints {beta_1}, {beta_t}")));
    }
    let betas = (0..steps)
        .map(|i| if steps == 1 { beta_1 } else { beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64 })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `T = 1000`, betas from `1e-4` to `0.02`.
pub fn default_schedule() -> NoiseSchedule {
    linear_schedule(1000, 1e-4, 0.02).expect("valid defaults")
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x0.len() != eps.len() {
        return Err(DiffusionError::Length(x0.len(), eps.len()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// `sigma_t^2 = beta_t`
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t)`
    Posterior,
}

impl FromStr for VarianceMode {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(VarianceMode::Beta),
            "posterior" => Ok(VarianceMode::Posterior),
            other => Err(DiffusionError::Mode(other.to_string())),
        }
    }
}

pub fn sigma(t: usize, sched: &NoiseSchedule, mode: VarianceMode) -> f64 {
    match mode {
        VarianceMode::Beta => sched.beta(t).sqrt(),
        VarianceMode::Posterior => (sched.beta(t) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - sched.alpha_bar(t))).sqrt(),
    }
}

/// `mu = (x_t - beta_t / sqrt(1 - ab_t) eps_hat) / sqrt(alpha_t)`.
pub fn posterior_mean(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(DiffusionError::Length(x_t.len(), eps_hat.len()));
    }
    let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let s = 1.0 / sched.alpha(t).sqrt();
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| s * (x - c * e)).collect())
}

/// One ancestral step `x_{t-1} = mu + sigma_t z`, with `z = 0` at `t = 1`.
pub fn p_sample_step(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &NoiseSchedule, mode: VarianceMode, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut mu = posterior_mean(x_t, t, eps_hat, sched)?;
    if t > 1 {
        let s = sigma(t, sched, mode);
        for (m, z) in mu.iter_mut().zip(rng::normals(rng, x_t.len())) {
            *m += s * z;
        }
    }
    Ok(mu)
}

/// Replaces `eps_hat` by the noise consistent with the implied clean
/// estimate clamped to `[-clip, clip]`.
pub fn clip_eps(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &NoiseSchedule, clip: f64) -> Vec<f64> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = ((x - b * e) / a).clamp(-clip, clip);
            (x - a * x0) / b
        })
        .collect()
}

/// Anything that predicts noise for a noisy cloud.
pub trait Denoiser {
    fn predict(&self, x_t: &PointCloud, t: usize, pi1: &PersistenceImage, pi2: &PersistenceImage) -> std::result::Result<Tensor, ModelError>;
}

impl Denoiser for TopoDiT {
    fn predict(&self, x_t: &PointCloud, t: usize, pi1: &PersistenceImage, pi2: &PersistenceImage) -> std::result::Result<Tensor, ModelError> {
        self.forward(x_t, t, pi1, pi2).map(|(eps, _)| eps)
    }
}

/// One training example.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub cloud: PointCloud,
    pub pi1: PersistenceImage,
    pub pi2: PersistenceImage,
}

/// `mean || eps_theta(x_t, t) - eps ||^2` over all coordinates, with
/// `t ~ U[1, T]` and `eps ~ N(0, I)` drawn from `rng`.
pub fn training_loss(model: &impl Denoiser, item: &TrainItem, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    let t = rng::uniform_int(rng, 1, sched.steps());
    let x0 = item.cloud.flat();
    let eps = rng::normals(rng, x0.len());
    let x_t = PointCloud::from_flat(&q_sample(&x0, t, &eps, sched)?).map_err(ModelError::from)?;
    let pred = model.predict(&x_t, t, &item.pi1, &item.pi2)?;
    let target = Tensor::new(eps, pred.shape()).map_err(|e| ModelError::Stage { stage: "loss", source: e })?;
    pred.mse(&target).map_err(|e| ModelError::Stage { stage: "loss", source: e }.into())
}

/// Mean of [`training_loss`] over a batch.
pub fn batch_loss(model: &impl Denoiser, items: &[TrainItem], sched: &NoiseSchedule, rng: &mut Rng) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for item in items {
        let l = training_loss(model, item, sched, rng)?;
        total = Some(match total {
            None => l,
            Some(acc) => acc.add(&l).map_err(|e| ModelError::Stage { stage: "loss", source: e })?,
        });
    }
    let total = total.ok_or(DiffusionError::Length(0, 1))?;
    Ok(total.scale(1.0 / items.len() as f64))
}

/// Where sampling gets its conditioning images from.
pub enum PiSource<'a> {
    Fixed(PersistenceImage, PersistenceImage),
    Prior(&'a Vae),
}

impl PiSource<'_> {
    pub fn draw(&self, seed: u64) -> (PersistenceImage, PersistenceImage) {
        match self {
            PiSource::Fixed(a, b) => (a.clone(), b.clone()),
            PiSource::Prior(vae) => vae.sample_prior(&mut rng::stream(seed, "pi-prior")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Respace the chain to this many steps.
    pub steps: Option<usize>,
    pub variance: VarianceMode,
    /// Clamp the implied clean estimate to `[-clip, clip]` each step.
    pub clip: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { steps: None, variance: VarianceMode::Beta, clip: Some(DEFAULT_CLIP) }
    }
}

/// Default clamp on the clean estimate, in normalized units.
pub const DEFAULT_CLIP: f64 = 2.5;

/// Ancestral sampling of an `n`-point cloud from `x_T ~ N(0, I)`.
/// Deterministic in `seed`.
pub fn sample(
    model: &impl Denoiser,
    sched: &NoiseSchedule,
    pis: Option<&PiSource>,
    n: usize,
    opts: &SampleOptions,
    seed: u64,
) -> Result<PointCloud> {
    let source = pis.ok_or(DiffusionError::MissingPiSource)?;
    let (pi1, pi2) = source.draw(seed);
    let (chain, ts) = match opts.steps {
        Some(s) => sched.respaced(s)?,
        None => (sched.clone(), (1..=sched.steps()).collect()),
    };
    let mut rng = rng::stream(seed, "sample");
    let mut x = rng::normals(&mut rng, 3 * n);
    for i in (1..=chain.steps()).rev() {
        let cloud = PointCloud::from_flat(&x).map_err(|_| DiffusionError::Diverged(i))?;
        let mut eps = model.predict(&cloud, ts[i - 1], &pi1, &pi2)?.to_vec();
        if let Some(c) = opts.clip {
            eps = clip_eps(&x, i, &eps, &chain, c);
        }
        x = p_sample_step(&x, i, &eps, &chain, opts.variance, &mut rng)?;
    }
    PointCloud::from_flat(&x).map_err(|_| DiffusionError::Diverged(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn schedule_examples() {
        let s = linear_schedule(1, 0.01, 0.01).unwrap();
        assert!((s.alpha_bar(1) - 0.99).abs() < 1e-15);
        let s = linear_schedule(2, 0.01, 0.01).unwrap();
        assert!((s.alpha_bar(2) - 0.9801).abs() < 1e-15);
        let s = default_schedule();
        assert!(s.alpha_bar(1000) < 1e-4);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..1000 {
            assert!(s.beta(t + 1) > s.beta(t));
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_examples() {
        let s = default_schedule();
        let x0 = [0.3, -1.2, 2.0];
        let t = 400;
        let z = q_sample(&x0, t, &[0.0; 3], &s).unwrap();
        for (a, b) in z.iter().zip(x0) {
            assert!((a - s.alpha_bar(t).sqrt() * b).abs() < 1e-15);
        }
        let eps = [1.0, -0.5, 0.25];
        let z = q_sample(&[0.0; 3], t, &eps, &s).unwrap();
        for (a, b) in z.iter().zip(eps) {
            assert!((a - (1.0 - s.alpha_bar(t)).sqrt() * b).abs() < 1e-15);
        }
        assert!(matches!(q_sample(&x0, 0, &eps, &s), Err(DiffusionError::Timestep { .. })));
        assert!(matches!(q_sample(&x0, 1001, &eps, &s), Err(DiffusionError::Timestep { .. })));
    }

    #[test]
    fn single_step_chain_inverts_q_sample() {
        let s = linear_schedule(1, 0.3, 0.3).unwrap();
        let mut r = rng::stream(1, "inv");
        let x0 = rng::normals(&mut r, 30);
        let eps = rng::normals(&mut r, 30);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let back = p_sample_step(&x1, 1, &eps, &s, VarianceMode::Posterior, &mut r).unwrap();
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn variance_modes_differ_above_one() {
        let s = default_schedule();
        let x = vec![0.5; 6];
        let e = vec![0.1; 6];
        let a = p_sample_step(&x, 10, &e, &s, VarianceMode::Beta, &mut rng::stream(2, "z")).unwrap();
        let b = p_sample_step(&x, 10, &e, &s, VarianceMode::Posterior, &mut rng::stream(2, "z")).unwrap();
        assert_ne!(a, b);
        let a = p_sample_step(&x, 1, &e, &s, VarianceMode::Beta, &mut rng::stream(2, "z")).unwrap();
        assert_eq!(a, posterior_mean(&x, 1, &e, &s).unwrap());
        assert!("bogus".parse::<VarianceMode>().is_err());
    }

    #[test]
    fn respacing_keeps_alpha_bars() {
        let s = default_schedule();
        let (r, ts) = s.respaced(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(*ts.last().unwrap(), 1000);
        for (i, &t) in ts.iter().enumerate() {
            assert!((r.alpha_bar(i + 1) - s.alpha_bar(t)).abs() < 1e-12);
        }
        let (full, ts) = s.respaced(1000).unwrap();
        assert_eq!(ts, (1..=1000).collect::<Vec<_>>());
        for t in 1..=1000 {
            assert!((full.beta(t) - s.beta(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_is_identity_inside_range() {
        let s = default_schedule();
        let x0 = [0.2, -0.4, 0.9];
        let eps = [0.3, 1.1, -0.7];
        let xt = q_sample(&x0, 300, &eps, &s).unwrap();
        for (a, b) in clip_eps(&xt, 300, &eps, &s, 1.0).iter().zip(eps) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    struct Oracle {
        x0: Vec<f64>,
        sched: NoiseSchedule,
    }

    impl Denoiser for Oracle {
        fn predict(&self, x_t: &PointCloud, t: usize, _: &PersistenceImage, _: &PersistenceImage) -> std::result::Result<Tensor, ModelError> {
            let ab = self.sched.alpha_bar(t);
            let eps = x_t.flat().iter().zip(&self.x0).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect();
            Ok(Tensor::new(eps, &[x_t.len(), 3]).unwrap())
        }
    }

    struct Zero;

    impl Denoiser for Zero {
        fn predict(&self, x_t: &PointCloud, _: usize, _: &PersistenceImage, _: &PersistenceImage) -> std::result::Result<Tensor, ModelError> {
            Ok(Tensor::zeros(&[x_t.len(), 3]))
        }
    }

    fn item(n: usize) -> TrainItem {
        let x0 = rng::normals(&mut rng::stream(3, "x0"), 3 * n);
        TrainItem { cloud: PointCloud::from_flat(&x0).unwrap(), pi1: PersistenceImage::zeros(4, 1), pi2: PersistenceImage::zeros(4, 2) }
    }

    #[test]
    fn loss_of_oracle_and_zero_models() {
        let s = default_schedule();
        let it = item(500);
        let oracle = Oracle { x0: it.cloud.flat(), sched: s.clone() };
        let l = training_loss(&oracle, &it, &s, &mut rng::stream(4, "l")).unwrap().item();
        assert!(l < 1e-20, "{l}");
        let mut r = rng::stream(5, "l");
        let mean: f64 = (0..40).map(|_| training_loss(&Zero, &it, &s, &mut r).unwrap().item()).sum::<f64>() / 40.0;
        assert!((mean - 1.0).abs() < 0.03, "{mean}");
    }

    #[test]
    fn loss_is_finite_positive_at_init_and_reaches_params() {
        let cfg = ModelConfig { voxel: 16, patch: 8, hidden: 24, heads: 4, dit_depth: 1, resampler_depth: 1, queries: 6, pi_n: 4, ..ModelConfig::default() };
        let model = TopoDiT::new(cfg, 6).unwrap();
        let s = default_schedule();
        let l = batch_loss(&model, &[item(64), item(32)], &s, &mut rng::stream(7, "b")).unwrap();
        assert!(l.item().is_finite() && l.item() > 0.0);
        l.backward().unwrap();
        let missing: Vec<&str> = model.params().iter().filter(|(_, t)| t.grad().is_none()).map(|(n, _)| n).collect();
        assert!(missing.is_empty(), "{missing:?}");
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let cfg = ModelConfig { voxel: 16, patch: 8, hidden: 24, heads: 4, dit_depth: 1, resampler_depth: 1, queries: 6, pi_n: 4, ..ModelConfig::default() };
        let model = TopoDiT::new(cfg, 8).unwrap();
        let s = default_schedule();
        let pis = PiSource::Fixed(PersistenceImage::zeros(4, 1), PersistenceImage::zeros(4, 2));
        let opts = SampleOptions { steps: Some(50), ..Default::default() };
        let a = sample(&model, &s, Some(&pis), 128, &opts, 9).unwrap();
        let b = sample(&model, &s, Some(&pis), 128, &opts, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 128);
        let flat = a.flat();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let std = (flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / flat.len() as f64).sqrt();
        assert!((0.5..=2.0).contains(&std), "{std}");
        assert_eq!(sample(&model, &s, None, 8, &opts, 9).unwrap_err(), DiffusionError::MissingPiSource);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-3, batch: 4 }
    }
}

/// Adam on minibatches drawn with replacement from `items`. `on_step`
/// sees the step index and its loss. Returns all losses.
pub fn train(
    model: &mut TopoDiT,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    opts: &TrainOptions,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(DiffusionError::Length(0, 1));
    }
    let mut r = rng::stream(seed, "train");
    let adam = crate::tensor::Adam::new(opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch: Vec<TrainItem> = (0..opts.batch.max(1)).map(|_| items[rng::uniform_int(&mut r, 0, items.len() - 1)].clone()).collect();
        model.params().zero_grad();
        let loss = batch_loss(&*model, &batch, sched, &mut r)?;
        let stage = |source| ModelError::Stage { stage: "optimizer", source };
        loss.backward().map_err(stage)?;
        model.params_mut().adam_step(&adam).map_err(stage)?;
        let l = loss.item();
        on_step(step, l);
        losses.push(l);
    }
    Ok(losses)
}
