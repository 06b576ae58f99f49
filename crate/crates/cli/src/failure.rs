use std::fmt;
use std::path::Path;

use topogen::diffusion::DiffusionError;
use topogen::homology::HomologyError;
use topogen::metrics::MetricsError;
use topogen::model::ModelError;
use topogen::pipeline::PipelineError;
use topogen::tensor::TensorError;
use topogen::vae::VaeError;
use topogen::Error;

pub const BAD_INPUT: u8 = 2;
pub const RESOURCE_CAP: u8 = 3;
pub const INVARIANT: u8 = 4;

/// A message and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

pub type Result<T> = std::result::Result<T, Failure>;

impl Failure {
    pub fn bad_input(msg: impl Into<String>) -> Self {
        Self { code: BAD_INPUT, msg: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::bad_input(format!("{}: {e}", path.display()))
    }

    /// Prefix the message with where it happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.msg = format!("{what}: {}", self.msg);
        self
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

fn tensor_code(e: &TensorError) -> u8 {
    match e {
        TensorError::Checkpoint(_) | TensorError::UnknownParam(_) | TensorError::DuplicateParam(_) => BAD_INPUT,
        _ => INVARIANT,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::Ledger { .. } => INVARIANT,
        ModelError::Stage { source, .. } => tensor_code(source),
        _ => BAD_INPUT,
    }
}

fn homology_code(e: &HomologyError) -> u8 {
    match e {
        HomologyError::TooManySimplices { .. } => RESOURCE_CAP,
        HomologyError::NotAFiltration { .. } => INVARIANT,
        _ => BAD_INPUT,
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Homology(h) | Error::Pipeline(PipelineError::Homology(h)) => homology_code(h),
        Error::Metrics(MetricsError::TooLarge(_)) => RESOURCE_CAP,
        Error::Tensor(t) | Error::Vae(VaeError::Tensor(t)) => tensor_code(t),
        Error::Model(m) | Error::Diffusion(DiffusionError::Model(m)) => model_code(m),
        Error::Diffusion(DiffusionError::Diverged(_)) => INVARIANT,
        _ => BAD_INPUT,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: exit_code(&e), msg: e.to_string() }
    }
}

macro_rules! via_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

via_error!(
    topogen::geometry::GeometryError,
    HomologyError,
    TensorError,
    ModelError,
    DiffusionError,
    VaeError,
    MetricsError,
    PipelineError,
    topogen::io::FormatError
);
