//! The denoiser: patch tokens and topology tokens are squeezed through a
//! latent-query resampler, processed by adaLN-zero transformer blocks,
//! expanded back to one token per patch and devoxelized at the noisy points.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::{self, GeometryError, PointCloud, ALLOWED_RESOLUTIONS};
use crate::pimage::PersistenceImage;
use crate::rng;
use crate::tensor::{ParamStore, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: TensorError },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("persistence image resolution {got}, expected {expected}")]
    ImageResolution { got: usize, expected: usize },
    #[error("token ledger at {stage}: expected {expected}, got {got}")]
    Ledger { stage: &'static str, expected: usize, got: usize },
    #[error("parameters: {0}")]
    Params(TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn at(stage: &'static str) -> impl Fn(TensorError) -> ModelError {
    move |source| ModelError::Stage { stage, source }
}

const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;
const QUERY_STD: f64 = 0.02;

/// Named `(hidden, dit_depth, heads)` sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePreset {
    S,
    B,
    L,
    XL,
}

impl SizePreset {
    /// `(hidden width, transformer depth, heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizePreset::S => (384, 12, 6),
            SizePreset::B => (768, 12, 12),
            SizePreset::L => (1024, 24, 16),
            SizePreset::XL => (1152, 28, 16),
        }
    }
}

impl FromStr for SizePreset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(SizePreset::S),
            "B" => Ok(SizePreset::B),
            "L" => Ok(SizePreset::L),
            "XL" => Ok(SizePreset::XL),
            other => Err(ModelError::Config(format!("unknown size preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub voxel: usize,
    pub patch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dit_depth: usize,
    pub resampler_depth: usize,
    /// Latent queries in the downsampler, i.e. the trunk length.
    pub queries: usize,
    pub pi_n: usize,
    /// Half-width of the voxel domain `[-extent, extent]^3`.
    pub extent: f64,
    pub timesteps: usize,
    /// Add the 3D position embedding to the upsampler queries.
    pub up_posembed: bool,
    /// Use adaLN gates on the transformer residual branches.
    pub gating: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(SizePreset::S)
    }
}

impl ModelConfig {
    pub fn preset(size: SizePreset) -> Self {
        let (hidden, dit_depth, heads) = size.dims();
        Self {
            voxel: 32,
            patch: 4,
            hidden,
            heads,
            dit_depth,
            resampler_depth: 6,
            queries: 96,
            pi_n: crate::pimage::DEFAULT_RESOLUTION,
            extent: 1.0,
            timesteps: 1000,
            up_posembed: true,
            gating: true,
        }
    }

    /// Desk-scale configuration for smoke runs.
    pub fn micro() -> Self {
        Self {
            voxel: 16,
            patch: 4,
            hidden: 32,
            heads: 4,
            dit_depth: 2,
            resampler_depth: 2,
            queries: 96,
            pi_n: crate::pimage::DEFAULT_RESOLUTION,
            ..Self::preset(SizePreset::S)
        }
    }

    pub fn with_size(mut self, size: SizePreset) -> Self {
        (self.hidden, self.dit_depth, self.heads) = size.dims();
        self
    }

    /// Patch tokens `L = (V/p)^3`; also the upsampler query count.
    pub fn tokens(&self) -> usize {
        (self.voxel / self.patch).pow(3)
    }

    pub fn patch_width(&self) -> usize {
        3 * self.patch.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !ALLOWED_RESOLUTIONS.contains(&self.voxel) {
            return bad(format!("voxel {} not in {ALLOWED_RESOLUTIONS:?}", self.voxel));
        }
        if self.patch == 0 || self.voxel % self.patch != 0 {
            return bad(format!("patch {} does not divide voxel {}", self.patch, self.voxel));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.hidden < 6 {
            return bad(format!("hidden {} below 6", self.hidden));
        }
        if self.resampler_depth == 0 || self.queries == 0 || self.pi_n == 0 || self.timesteps == 0 {
            return bad("resampler_depth, queries, pi_n and timesteps must be positive".into());
        }
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return bad(format!("extent {} must be positive", self.extent));
        }
        Ok(())
    }

    /// `key = value` lines; `#` starts a comment. Unknown keys are errors.
    /// A `size` key applies a preset before the keys that follow it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| ModelError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        match key {
            "size" => *self = self.clone().with_size(value.parse().map_err(|e: ModelError| e.to_string())?),
            "voxel" => self.voxel = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "dit_depth" => self.dit_depth = num(key, value)?,
            "resampler_depth" => self.resampler_depth = num(key, value)?,
            "queries" => self.queries = num(key, value)?,
            "pi_n" => self.pi_n = num(key, value)?,
            "extent" => self.extent = num(key, value)?,
            "timesteps" => self.timesteps = num(key, value)?,
            "up_posembed" => self.up_posembed = num(key, value)?,
            "gating" => self.gating = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "voxel = {}", self.voxel)?;
        writeln!(f, "patch = {}", self.patch)?;
        writeln!(f, "hidden = {}", self.hidden)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "dit_depth = {}", self.dit_depth)?;
        writeln!(f, "resampler_depth = {}", self.resampler_depth)?;
        writeln!(f, "queries = {}", self.queries)?;
        writeln!(f, "pi_n = {}", self.pi_n)?;
        writeln!(f, "extent = {}", self.extent)?;
        writeln!(f, "timesteps = {}", self.timesteps)?;
        writeln!(f, "up_posembed = {}", self.up_posembed)?;
        writeln!(f, "gating = {}", self.gating)
    }
}

/// Per-axis sinusoids of the lattice coordinates of a `side^3` grid,
/// concatenated and zero-padded to `d`. Rows follow patch-token order.
/// Each axis gets `2 * floor(d / 6)` channels.
pub fn sincos_posembed_3d(side: usize, d: usize) -> Vec<f64> {
    let per_axis = 2 * (d / 6);
    let half = per_axis / 2;
    let omega: Vec<f64> = (0..half).map(|i| 1.0 / 10000f64.powf(i as f64 / half as f64)).collect();
    let mut out = vec![0.0; side.pow(3) * d];
    for a in 0..side {
        for b in 0..side {
            for c in 0..side {
                let row = &mut out[((a * side + b) * side + c) * d..][..d];
                for (axis, pos) in [a, b, c].into_iter().enumerate() {
                    let block = &mut row[axis * per_axis..(axis + 1) * per_axis];
                    for (i, w) in omega.iter().enumerate() {
                        block[i] = (pos as f64 * w).sin();
                        block[half + i] = (pos as f64 * w).cos();
                    }
                }
            }
        }
    }
    out
}

/// Sinusoidal features of a timestep, `[cos | sin]` halves, zero-padded to `d`.
pub fn timestep_features(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).cos();
        out[half + i] = (t as f64 * freq).sin();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `N(0, 1/fan_in)` for a `[fan_in, fan_out]` weight.
    Fan,
}

fn linear_specs(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, fan_in: usize, fan_out: usize, init: Init) {
    specs.push((format!("{name}.w"), vec![fan_in, fan_out], init));
    specs.push((format!("{name}.b"), vec![fan_out], Init::Zeros));
}

fn norm_specs(specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    specs.push((format!("{name}.g"), vec![d], Init::Ones));
    specs.push((format!("{name}.b"), vec![d], Init::Zeros));
}

fn resampler_specs(specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.hidden;
    for j in 0..cfg.resampler_depth {
        let l = format!("{prefix}.{j}");
        norm_specs(specs, &format!("{l}.ln_q"), d);
        norm_specs(specs, &format!("{l}.ln_kv"), d);
        for w in ["q", "k", "v", "o"] {
            linear_specs(specs, &format!("{l}.attn.{w}"), d, d, Init::Fan);
        }
        norm_specs(specs, &format!("{l}.ln_ff"), d);
        linear_specs(specs, &format!("{l}.ff1"), d, MLP_RATIO * d, Init::Fan);
        linear_specs(specs, &format!("{l}.ff2"), MLP_RATIO * d, d, Init::Fan);
    }
}

fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.hidden;
    let n2 = cfg.pi_n * cfg.pi_n;
    let mut s = Vec::new();
    linear_specs(&mut s, "embed", cfg.patch_width(), d, Init::Fan);
    for slot in 0..2 {
        norm_specs(&mut s, &format!("topo.{slot}.ln"), n2);
        linear_specs(&mut s, &format!("topo.{slot}.fc1"), n2, d, Init::Fan);
        linear_specs(&mut s, &format!("topo.{slot}.fc2"), d, d, Init::Fan);
    }
    linear_specs(&mut s, "time.fc1", d, d, Init::Fan);
    linear_specs(&mut s, "time.fc2", d, d, Init::Fan);
    s.push(("down.queries".into(), vec![cfg.queries, d], Init::Normal(QUERY_STD)));
    resampler_specs(&mut s, "down", cfg);
    for i in 0..cfg.dit_depth {
        let b = format!("dit.{i}");
        linear_specs(&mut s, &format!("{b}.attn.qkv"), d, 3 * d, Init::Fan);
        linear_specs(&mut s, &format!("{b}.attn.o"), d, d, Init::Fan);
        linear_specs(&mut s, &format!("{b}.mlp.fc1"), d, MLP_RATIO * d, Init::Fan);
        linear_specs(&mut s, &format!("{b}.mlp.fc2"), MLP_RATIO * d, d, Init::Fan);
        linear_specs(&mut s, &format!("{b}.ada"), d, 6 * d, Init::Zeros);
    }
    s.push(("up.queries".into(), vec![cfg.tokens(), d], Init::Normal(QUERY_STD)));
    resampler_specs(&mut s, "up", cfg);
    norm_specs(&mut s, "final.ln", d);
    linear_specs(&mut s, "final.proj", d, cfg.patch_width(), Init::Fan);
    s
}

/// Token counts observed during one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLedger {
    pub patches: usize,
    pub kv: usize,
    pub trunk: usize,
    pub out: usize,
}

/// Multi-head scaled dot-product attention. `q: [M, d]`, `k, v: [K, d]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> std::result::Result<Tensor, TensorError> {
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.narrow(1, h * dh, dh)?;
        let kh = k.narrow(1, h * dh, dh)?;
        let vh = v.narrow(1, h * dh, dh)?;
        let weights = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
        outs.push(weights.matmul(&vh)?);
    }
    Tensor::concat(&outs, 1)
}

/// The denoiser with its parameters.
pub struct TopoDiT {
    config: ModelConfig,
    params: ParamStore,
    posembed: Tensor,
    /// Gather index taking flat tokens to the flat `V^3 x 3` field.
    unpatch: Rc<Vec<usize>>,
}

impl fmt::Debug for TopoDiT {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TopoDiT").field("config", &self.config).field("values", &self.params.num_values()).finish()
    }
}

impl TopoDiT {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model-init");
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => rng::normals(&mut r, n).into_iter().map(|v| v * std).collect(),
                Init::Fan => {
                    let std = 1.0 / (shape[0] as f64).sqrt();
                    rng::normals(&mut r, n).into_iter().map(|v| v * std).collect()
                }
            };
            params.insert(name, values, &shape).map_err(ModelError::Params)?;
        }
        Self::assemble(config, params)
    }

    /// Wraps an existing store, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            let missing = specs.iter().find(|(n, _, _)| !params.contains(n)).map(|(n, _, _)| n.clone());
            return Err(ModelError::Params(TensorError::UnknownParam(missing.unwrap_or_else(|| "extra parameter".into()))));
        }
        for (name, shape, _) in &specs {
            let t = params.get(name).map_err(ModelError::Params)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Params(TensorError::Shape { op: "from_params", lhs: shape.clone(), rhs: t.shape().to_vec() }));
            }
        }
        Self::assemble(config, params)
    }

    fn assemble(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let side = config.voxel / config.patch;
        let posembed = Tensor::new(sincos_posembed_3d(side, config.hidden), &[config.tokens(), config.hidden]).expect("shape");
        let perm = geometry::patch_permutation(config.voxel, config.patch)?;
        let mut inv = vec![0; perm.len()];
        for (t, &i) in perm.iter().enumerate() {
            inv[i] = t;
        }
        Ok(Self { config, params, posembed, unpatch: Rc::new(inv) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|_| panic!("parameter `{name}` registered at construction"))
    }

    fn linear(&self, x: &Tensor, name: &str) -> std::result::Result<Tensor, TensorError> {
        x.linear(self.p(&format!("{name}.w")), self.p(&format!("{name}.b")))
    }

    fn norm(&self, x: &Tensor, name: &str) -> std::result::Result<Tensor, TensorError> {
        x.layer_norm(Some(self.p(&format!("{name}.g"))), Some(self.p(&format!("{name}.b"))), LN_EPS)
    }

    /// Two `d`-dimensional tokens, one per image, each from its own
    /// LayerNorm -> linear -> GELU -> linear stack.
    pub fn topology_tokens(&self, pi1: &PersistenceImage, pi2: &PersistenceImage) -> Result<Tensor> {
        let n2 = self.config.pi_n * self.config.pi_n;
        let mut tokens = Vec::with_capacity(2);
        for (slot, img) in [pi1, pi2].into_iter().enumerate() {
            if img.n != self.config.pi_n {
                return Err(ModelError::ImageResolution { got: img.n, expected: self.config.pi_n });
            }
            let x = Tensor::new(img.pixels.clone(), &[1, n2]).expect("n^2 pixels");
            let h = self.norm(&x, &format!("topo.{slot}.ln")).map_err(at("topology"))?;
            let h = self.linear(&h, &format!("topo.{slot}.fc1")).map_err(at("topology"))?.gelu();
            tokens.push(self.linear(&h, &format!("topo.{slot}.fc2")).map_err(at("topology"))?);
        }
        Tensor::concat(&tokens, 0).map_err(at("topology"))
    }

    /// Sinusoidal features followed by linear -> SiLU -> linear. Shape `[1, d]`.
    pub fn timestep_embedding(&self, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.config.timesteps {
            return Err(ModelError::Timestep { t, max: self.config.timesteps });
        }
        let d = self.config.hidden;
        let x = Tensor::new(timestep_features(t, d), &[1, d]).expect("d features");
        let h = self.linear(&x, "time.fc1").map_err(at("timestep"))?.silu();
        self.linear(&h, "time.fc2").map_err(at("timestep"))
    }

    /// Stacked cross-attention layers: `l = MHCA(kv, q) + q`, then
    /// `q = FFN(l) + l`, with pre-normalization inside both branches.
    pub fn perceiver_resampler(&self, prefix: &str, queries: &Tensor, kv: &Tensor) -> std::result::Result<Tensor, TensorError> {
        let mut q = queries.clone();
        for j in 0..self.config.resampler_depth {
            let l = format!("{prefix}.{j}");
            let qn = self.norm(&q, &format!("{l}.ln_q"))?;
            let kvn = self.norm(kv, &format!("{l}.ln_kv"))?;
            let qq = self.linear(&qn, &format!("{l}.attn.q"))?;
            let kk = self.linear(&kvn, &format!("{l}.attn.k"))?;
            let vv = self.linear(&kvn, &format!("{l}.attn.v"))?;
            let att = self.linear(&attention(&qq, &kk, &vv, self.config.heads)?, &format!("{l}.attn.o"))?;
            let lat = att.add(&q)?;
            let h = self.norm(&lat, &format!("{l}.ln_ff"))?;
            let h = self.linear(&self.linear(&h, &format!("{l}.ff1"))?.gelu(), &format!("{l}.ff2"))?;
            q = h.add(&lat)?;
        }
        Ok(q)
    }

    /// `[L, d]` patch tokens plus `[2, d]` topology tokens to `[M, d]` latents.
    pub fn downsample(&self, patch_tokens: &Tensor, topo: &Tensor) -> Result<(Tensor, usize)> {
        let kv = Tensor::concat(&[patch_tokens.clone(), topo.clone()], 0).map_err(at("downsample"))?;
        let kv_len = kv.shape()[0];
        let out = self.perceiver_resampler("down", self.p("down.queries"), &kv).map_err(at("downsample"))?;
        Ok((out, kv_len))
    }

    /// `[M, d]` latents to `[L, d]` tokens.
    pub fn upsample(&self, latents: &Tensor) -> Result<Tensor> {
        let q = self.p("up.queries");
        let q = if self.config.up_posembed { q.add(&self.posembed).map_err(at("upsample"))? } else { q.clone() };
        self.perceiver_resampler("up", &q, latents).map_err(at("upsample"))
    }

    /// adaLN-zero block: shift/scale/gate for the attention and MLP
    /// branches regressed from `cond` (`[1, d]`).
    pub fn dit_block(&self, i: usize, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let run = || -> std::result::Result<Tensor, TensorError> {
            let d = self.config.hidden;
            let b = format!("dit.{i}");
            let m = self.linear(&cond.silu(), &format!("{b}.ada"))?.reshape(&[6 * d])?;
            let chunk = |k: usize| m.narrow(0, k * d, d);
            let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
            let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);
            let modulate = |h: &Tensor, shift: &Tensor, scale: &Tensor| -> std::result::Result<Tensor, TensorError> {
                h.layer_norm(None, None, LN_EPS)?.mul(&scale.add_scalar(1.0))?.add(shift)
            };
            let gated = |h: Tensor, gate: &Tensor| if self.config.gating { h.mul(gate) } else { Ok(h) };

            let h = modulate(x, &shift1, &scale1)?;
            let qkv = self.linear(&h, &format!("{b}.attn.qkv"))?;
            let parts = qkv.split(1, &[d, d, d])?;
            let a = self.linear(&attention(&parts[0], &parts[1], &parts[2], self.config.heads)?, &format!("{b}.attn.o"))?;
            let x = x.add(&gated(a, &gate1)?)?;

            let h = modulate(&x, &shift2, &scale2)?;
            let h = self.linear(&self.linear(&h, &format!("{b}.mlp.fc1"))?.gelu(), &format!("{b}.mlp.fc2"))?;
            x.add(&gated(h, &gate2)?)
        };
        run().map_err(at("dit_block"))
    }

    /// Predicted noise `[N, 3]` at the points of `x_t`, plus the token ledger.
    pub fn forward(&self, x_t: &PointCloud, t: usize, pi1: &PersistenceImage, pi2: &PersistenceImage) -> Result<(Tensor, TokenLedger)> {
        let cfg = &self.config;
        let (v, width, l) = (cfg.voxel, cfg.patch_width(), cfg.tokens());

        let grid = geometry::voxelize_in(x_t, v, cfg.extent)?;
        let tokens = geometry::patchify(&grid, cfg.patch)?;
        let s = Tensor::new(tokens.values, &[tokens.count, width]).map_err(at("patchify"))?;
        let s = self.linear(&s, "embed").map_err(at("embed"))?.add(&self.posembed).map_err(at("embed"))?;
        let patches = s.shape()[0];

        let topo = self.topology_tokens(pi1, pi2)?;
        let (mut h, kv) = self.downsample(&s, &topo)?;
        let trunk = h.shape()[0];

        let cond = self.timestep_embedding(t)?;
        for i in 0..cfg.dit_depth {
            h = self.dit_block(i, &h, &cond)?;
        }

        let up = self.upsample(&h)?;
        let out_tokens = up.shape()[0];
        let payload = self.norm(&up, "final.ln").and_then(|u| self.linear(&u, "final.proj")).map_err(at("final"))?;

        let field = payload.gather(self.unpatch.clone(), &[v * v * v, 3]).map_err(at("unpatchify"))?;
        let rows: Vec<Vec<(usize, f64)>> = x_t
            .points()
            .iter()
            .map(|p| {
                let st = geometry::trilinear_stencil(p, v, cfg.extent);
                st.nodes.iter().copied().zip(st.weights).collect()
            })
            .collect();
        let eps = field.sparse_rows(Rc::new(rows)).map_err(at("devoxelize"))?;

        let ledger = TokenLedger { patches, kv, trunk, out: out_tokens };
        for (stage, expected, got) in [
            ("patches", l, patches),
            ("kv", l + 2, kv),
            ("trunk", cfg.queries, trunk),
            ("out", l, out_tokens),
        ] {
            if expected != got {
                return Err(ModelError::Ledger { stage, expected, got });
            }
        }
        Ok((eps, ledger))
    }
}


#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::tensor::check::max_relative_error;

    #[test]
    fn full_model_matches_finite_differences() {
        let cfg = ModelConfig { voxel: 16, patch: 8, hidden: 24, heads: 4, dit_depth: 1, resampler_depth: 1, queries: 6, pi_n: 4, ..ModelConfig::default() };
        let model = TopoDiT::new(cfg, 40).unwrap();
        let mut r = rng::stream(41, "fd");
        for (_, t) in model.params().iter() {
            let vals: Vec<f64> = rng::normals(&mut r, t.numel()).into_iter().map(|v| 0.3 * v).collect();
            t.set_data(&vals);
        }
        let x = PointCloud::from_flat(&rng::normals(&mut r, 96).iter().map(|v| 0.4 * v).collect::<Vec<_>>()).unwrap();
        let mut p1 = PersistenceImage::zeros(4, 1);
        let mut p2 = PersistenceImage::zeros(4, 2);
        p1.pixels.iter_mut().chain(p2.pixels.iter_mut()).for_each(|v| *v = rng::uniform(&mut r));
        let target = Tensor::new(rng::normals(&mut r, 96), &[32, 3]).unwrap();
        let loss = || model.forward(&x, 250, &p1, &p2).unwrap().0.mse(&target).unwrap();
        let probes: Vec<(Tensor, Vec<usize>)> = model
            .params()
            .iter()
            .map(|(_, t)| {
                let n = t.numel();
                let picks = (0..3).map(|_| rng::uniform_int(&mut r, 0, n - 1)).collect();
                (t.clone(), picks)
            })
            .collect();
        let err = max_relative_error(&loss, &probes, 1e-5, 1e-7);
        assert!(err < 1e-3, "{err}");
    }
}
