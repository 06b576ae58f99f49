//! Dataset-level glue: landmark sampling, persistence diagrams and
//! persistence images for a collection of clouds.

use rayon::prelude::*;

use crate::geometry::{self, GeometryError, PointCloud};
use crate::homology::{self, HomologyError, PersistenceDiagram, VrOptions, DEFAULT_SIMPLEX_CAP};
use crate::pimage::{self, GridSpec, PersistenceImage, SigmaPolicy};

/// Landmarks per cloud used for persistence.
pub const DEFAULT_LANDMARKS: usize = 64;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Homology(#[from] HomologyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub landmarks: usize,
    pub max_dim: usize,
    pub cap: usize,
    pub seed: u64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { landmarks: DEFAULT_LANDMARKS, max_dim: 3, cap: DEFAULT_SIMPLEX_CAP, seed: 0 }
    }
}

/// Farthest-point subsample and the radius its filtration is truncated at.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks {
    pub cloud: PointCloud,
    pub r_max: f64,
}

pub fn landmarks(cloud: &PointCloud, opts: &ExtractOptions) -> Result<Landmarks, PipelineError> {
    let k = opts.landmarks.min(cloud.len());
    let idx = geometry::farthest_point_sample(cloud, k, opts.seed)?;
    let sub = cloud.select(&idx);
    let r_max = sub.diameter().max(f64::MIN_POSITIVE);
    Ok(Landmarks { cloud: sub, r_max })
}

/// Diagrams of dimensions `0..max_dim` of the landmarks' filtration.
pub fn landmark_diagrams(l: &Landmarks, opts: &ExtractOptions) -> Result<Vec<PersistenceDiagram>, PipelineError> {
    let filt = homology::build_vr_filtration_with(&l.cloud, &VrOptions { max_dim: opts.max_dim, r_max: l.r_max, cap: opts.cap })?;
    Ok(homology::persistence_diagrams(&filt))
}

/// [`landmarks`] followed by [`landmark_diagrams`].
pub fn cloud_diagrams(cloud: &PointCloud, opts: &ExtractOptions) -> Result<Vec<PersistenceDiagram>, PipelineError> {
    landmark_diagrams(&landmarks(cloud, opts)?, opts)
}

/// [`cloud_diagrams`] for every cloud, in parallel.
pub fn dataset_diagrams(clouds: &[PointCloud], opts: &ExtractOptions) -> Result<Vec<Vec<PersistenceDiagram>>, PipelineError> {
    clouds.par_iter().map(|c| cloud_diagrams(c, opts)).collect()
}

fn dim_or_empty(diagrams: &[PersistenceDiagram], dim: usize) -> PersistenceDiagram {
    diagrams.iter().find(|d| d.dimension == dim).cloned().unwrap_or_else(|| PersistenceDiagram::empty(dim))
}

/// One grid per homology dimension (1 and 2), fitted to the whole dataset.
pub fn dataset_specs(per_cloud: &[Vec<PersistenceDiagram>], n: usize, policy: SigmaPolicy) -> [GridSpec; 2] {
    [1, 2].map(|dim| {
        let pds: Vec<PersistenceDiagram> = per_cloud.iter().map(|d| dim_or_empty(d, dim)).collect();
        pimage::dataset_spec(&pds, n, policy)
    })
}

/// (PI-1, PI-2) for every cloud.
pub fn dataset_images(per_cloud: &[Vec<PersistenceDiagram>], specs: &[GridSpec; 2]) -> Vec<(PersistenceImage, PersistenceImage)> {
    per_cloud
        .par_iter()
        .map(|d| {
            (pimage::rasterize(&dim_or_empty(d, 1), &specs[0]), pimage::rasterize(&dim_or_empty(d, 2), &specs[1]))
        })
        .collect()
}
