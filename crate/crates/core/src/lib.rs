//! Topology-conditioned point-cloud diffusion at desk scale.
//!
//! Persistent homology of a cloud is vectorized into persistence images,
//! which condition a voxel diffusion transformer through a Perceiver-style
//! resampler. A small VAE models the images so that generation does not need
//! a reference shape.
//!
//! Everything runs in `f64` on the CPU with a built-in reverse-mode autodiff
//! ([`tensor`]). Randomness flows through named ChaCha streams ([`rng`]), so
//! every result is reproducible from a seed.
//!
//! ```
//! use topogen::{geometry::PointCloud, homology};
//!
//! let square = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
//! let f = homology::build_vr_filtration(&square, 2, 2.0).unwrap();
//! let pds = homology::persistence_diagrams(&f);
//! assert_eq!(pds[1].pairs.len(), 1);
//! ```

pub mod diffusion;
pub mod geometry;
pub mod homology;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pimage;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod vae;

use thiserror::Error;

/// Any error the library can produce.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Homology(#[from] homology::HomologyError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Diffusion(#[from] diffusion::DiffusionError),
    #[error(transparent)]
    Vae(#[from] vae::VaeError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Format(#[from] io::FormatError),
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/homology.md")]
    mod homology {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
